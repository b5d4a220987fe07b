"""Exact expectations of every bound on a DiscreteJoint, by enumeration.

Multi-sample estimators are symmetric in their "free" slots, so instead of
all nz^K tuples we sum over count vectors c ~ Multinomial(m, p) of the free
slots; this makes K in the hundreds cheap on small alphabets.  AIS chains are
enumerated as full trajectories using each kernel's transition matrix.
"""

from __future__ import annotations

from math import comb

import numpy as np
from scipy.special import gammaln

from ._numerics import logsumexp, softmax
from .ais_engine import AnnealedPath, JointTarget
from .models import DiscreteJoint

MAX_TERMS = 10**7


class EnumerationSizeError(ValueError):
    """The outcome product exceeds the enumeration budget."""


def _check_size(terms: int, what: str) -> None:
    if terms > MAX_TERMS:
        raise EnumerationSizeError(
            f"{what} needs {terms:.3g} terms, more than the limit of {MAX_TERMS:.0e}")


def compositions(m: int, k: int) -> np.ndarray:
    """All k-part count vectors summing to m, shape (comb(m + k - 1, k - 1), k)."""
    if k < 1:
        raise ValueError("need at least one part")
    rows = np.zeros((1, 0), dtype=np.int64)
    rem = np.array([m], dtype=np.int64)
    for _ in range(k - 1):
        reps = rem + 1
        starts = np.repeat(np.cumsum(reps) - reps, reps)
        c = np.arange(int(reps.sum()), dtype=np.int64) - starts
        rows = np.concatenate([np.repeat(rows, reps, axis=0), c[:, None]], axis=1)
        rem = np.repeat(rem, reps) - c
    return np.concatenate([rows, rem[:, None]], axis=1)


def _log_multinomial(counts: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    m = counts.sum(axis=1)
    coef = gammaln(m + 1.0) - np.sum(gammaln(counts + 1.0), axis=1)
    with np.errstate(invalid="ignore"):
        terms = np.where(counts > 0, counts * log_p, 0.0)
    return coef + terms.sum(axis=1)


def multiset_expectation(p, v, m: int, extra, K: int, sign: float = 1.0,
                         chunk: int = 200_000) -> np.ndarray:
    """E over c ~ Mult(m, p) of sign * log((1/K) [sum_s e^{sign*extra_s} + sum_l c_l e^{sign*v_l}]).

    ``extra`` has shape (S,) or (S, e): S scenarios, each with e fixed slots
    (e = 0 allowed).  Returns one expectation per scenario.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    keep = p > 0
    p, v = p[keep], v[keep]
    extra = np.asarray(extra, dtype=float)
    if extra.ndim == 1:
        extra = extra[:, None]
    S = extra.shape[0]
    L = p.size
    n_comp = comb(m + L - 1, m) if L else 1
    _check_size(n_comp * max(L, 1) + n_comp * S, "multiset expectation")
    E = logsumexp(sign * extra, axis=1) if extra.shape[1] else np.full(S, -np.inf)
    if m == 0:
        return sign * (E - np.log(K))
    log_p = np.log(p)
    comps = compositions(m, L)
    out = np.zeros(S)
    for a in range(0, comps.shape[0], chunk):
        c = comps[a:a + chunk]
        lw = _log_multinomial(c, log_p)
        with np.errstate(divide="ignore"):
            A = logsumexp(np.log(c) + sign * v, axis=1)
        val = np.logaddexp(A[:, None], E[None, :])
        out += np.exp(lw) @ val
    return sign * (out - np.log(K))


def _tables(model: DiscreteJoint, q):
    lq = q.log_table if hasattr(q, "log_table") else q.log_prob_table(np.arange(model.nx))
    lq = np.asarray(lq, dtype=float)
    with np.errstate(invalid="ignore"):
        logw = model.log_table - lq
    return lq, logw


def _critic_table(model: DiscreteJoint, critic) -> np.ndarray:
    if hasattr(critic, "table"):
        return np.asarray(critic.table, dtype=float)
    xs, zs = np.meshgrid(np.arange(model.nx), np.arange(model.nz), indexing="ij")
    return np.asarray(critic(xs, zs), dtype=float)


def _psum(p, v):
    """sum p * v with 0 * anything = 0."""
    p = np.asarray(p, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), p.shape)
    mask = p > 0
    return float(np.sum(p[mask] * v[mask]))


# ---------------------------------------------------------------------------
# static bounds
# ---------------------------------------------------------------------------

def expected_log_likelihood(model: DiscreteJoint) -> float:
    return _psum(model.table, model.log_lik_table)


def ba_lower(model: DiscreteJoint, q) -> float:
    lq, _ = _tables(model, q)
    return _psum(model.table, lq - model.log_pz[None, :])


def ba_upper(model: DiscreteJoint, q) -> float:
    lq, logw = _tables(model, q)
    qt = np.exp(lq)
    return expected_log_likelihood(model) - float(np.sum(model.px * [_psum(qt[i], logw[i]) for i in range(model.nx)]))


def posterior_kl(model: DiscreteJoint, q) -> float:
    """E_x KL[p(z|x) || q(z|x)]."""
    lq, _ = _tables(model, q)
    with np.errstate(divide="ignore"):
        lpost = np.log(model.post_table)
    return _psum(model.table, lpost - lq)


def _contrastive(model, q, T, K):
    """E_x E_{z1 ~ p(z|x), z2:K ~ q} [T(z1) - log mean_k e^{T(z_k)}] with T a (nx, nz) table."""
    lq, _ = _tables(model, q)
    qt = np.exp(lq)
    total = 0.0
    for i in range(model.nx):
        post = model.post_table[i]
        lme = multiset_expectation(qt[i], T[i], K - 1, T[i], K)
        total += model.px[i] * _psum(post, T[i] - lme)
    return total


def giwae(model: DiscreteJoint, q, critic, K: int) -> tuple[float, float, float]:
    """(total, ba_term, contrastive_term) of the GIWAE lower bound."""
    ba = ba_lower(model, q)
    c = _contrastive(model, q, _critic_table(model, critic), K)
    return ba + c, ba, c


def iwae_lower(model: DiscreteJoint, q, K: int) -> tuple[float, float, float]:
    """IWAE lower bound on MI as (total, ba_term, contrastive_term)."""
    _, logw = _tables(model, q)
    ba = ba_lower(model, q)
    c = _contrastive(model, q, logw, K)
    return ba + c, ba, c


def iwae_upper(model: DiscreteJoint, q, K: int) -> float:
    lq, logw = _tables(model, q)
    qt = np.exp(lq)
    elbo = sum(model.px[i] * multiset_expectation(qt[i], logw[i], K, np.zeros((1, 0)), K)[0]
               for i in range(model.nx))
    return expected_log_likelihood(model) - elbo


def riwae(model: DiscreteJoint, q, K: int) -> tuple[float, float]:
    """Expected (lower, upper) bounds on log p(x), averaged over p(x)."""
    lq, logw = _tables(model, q)
    qt = np.exp(lq)
    lo = hi = 0.0
    for i in range(model.nx):
        post = model.post_table[i]
        v = multiset_expectation(post, logw[i], K - 1, logw[i], K, sign=-1.0)
        lo += model.px[i] * _psum(qt[i], v)
        hi += model.px[i] * multiset_expectation(post, logw[i], K, np.zeros((1, 0)), K, sign=-1.0)[0]
    return lo, hi


def riwae_mi(model: DiscreteJoint, q, K: int) -> tuple[float, float]:
    """(lower_mi, upper_mi) from reverse IWAE."""
    lo, hi = riwae(model, q, K)
    ell = expected_log_likelihood(model)
    return ell - hi, ell - lo


def expected_log_evidence(model: DiscreteJoint) -> float:
    return _psum(model.px, model.log_px)


# ---------------------------------------------------------------------------
# energy-based bounds
# ---------------------------------------------------------------------------

def _energy_parts(model, q, critic):
    lq, _ = _tables(model, q)
    T = _critic_table(model, critic)
    logZ = logsumexp(lq + T, axis=1)  # log Z(x) = log E_q e^T
    return lq, T, logZ


def ibal(model: DiscreteJoint, q, critic) -> float:
    """BA + E_p[T] - E_x log E_q[e^T]."""
    lq, T, logZ = _energy_parts(model, q, critic)
    return ba_lower(model, q) + _psum(model.table, T) - _psum(model.px, logZ)


def mine_dv(model: DiscreteJoint, q, critic) -> float:
    """BA + E_p[T] - log E_x E_q[e^T]."""
    lq, T, logZ = _energy_parts(model, q, critic)
    mask = model.px > 0
    return (ba_lower(model, q) + _psum(model.table, T)
            - float(logsumexp(np.log(model.px[mask]) + logZ[mask], axis=0)))


def mine_f(model: DiscreteJoint, q, critic) -> float:
    """BA + E_p[T] - E_x E_q[e^{T - 1}]."""
    lq, T, logZ = _energy_parts(model, q, critic)
    return ba_lower(model, q) + _psum(model.table, T) - _psum(model.px, np.exp(logZ - 1.0))


def marginal_kl(model: DiscreteJoint, q, critic) -> float:
    """log E_x Z(x) - E_x log Z(x), the gap between IBAL and MINE-DV."""
    _, _, logZ = _energy_parts(model, q, critic)
    mask = model.px > 0
    return float(logsumexp(np.log(model.px[mask]) + logZ[mask], axis=0)) - _psum(model.px, logZ)


def energy_posterior(model: DiscreteJoint, q, critic) -> np.ndarray:
    """pi(z|x) proportional to q(z|x) e^{T(x, z)}, as an (nx, nz) table."""
    lq, T, _ = _energy_parts(model, q, critic)
    return softmax(lq + T, axis=1)


def ibal_grad_critic(model: DiscreteJoint, q, critic) -> np.ndarray:
    """d IBAL / d T(x, z) = p(x, z) - p(x) pi(z|x)."""
    return model.table - model.px[:, None] * energy_posterior(model, q, critic)


def optimal_critic_table(model: DiscreteJoint, q, shift=None) -> np.ndarray:
    """T*(x, z) = log p(x, z) - log q(z|x) (+ shift(x))."""
    _, logw = _tables(model, q)
    if shift is not None:
        logw = logw + np.asarray(shift, dtype=float)[:, None]
    return logw


def index_kl(model: DiscreteJoint, q, critic, K: int) -> float:
    """E_x E_{z_1:K ~ p_tgt} KL[SNIS_true(s|z) || SNIS_critic(s|z)].

    p_tgt(z_1:K|x) = (1/K) sum_s p(z_s|x) prod_{k != s} q(z_k|x), enumerated
    over all nz^K tuples.
    """
    lq, logw = _tables(model, q)
    T = _critic_table(model, critic)
    nz = model.nz
    _check_size(model.nx * nz**K * K, "index KL")
    grids = np.stack(np.meshgrid(*([np.arange(nz)] * K), indexing="ij"), axis=-1).reshape(-1, K)
    total = 0.0
    for i in range(model.nx):
        if model.px[i] == 0:
            continue
        lqz = lq[i][grids]  # (N, K)
        with np.errstate(divide="ignore"):
            lpz = np.log(model.post_table[i])[grids]
        sum_lq = lqz.sum(axis=1, keepdims=True)
        log_tgt = logsumexp(lpz + sum_lq - lqz, axis=1) - np.log(K)
        lw = logw[i][grids]
        lt = T[i][grids]
        s_true = lw - logsumexp(lw, axis=1)[:, None]
        s_crit = lt - logsumexp(lt, axis=1)[:, None]
        kl = np.sum(np.exp(s_true) * (s_true - s_crit), axis=1)
        total += model.px[i] * _psum(np.exp(log_tgt), kl)
    return total


# ---------------------------------------------------------------------------
# AIS
# ---------------------------------------------------------------------------

class _Outcomes:
    __slots__ = ("prob", "logw", "end")

    def __init__(self, prob, logw, end):
        keep = prob > 0
        self.prob, self.logw, self.end = prob[keep], logw[keep], end[keep]


def _chain_tables(path: AnnealedPath, kernel, x: int):
    lb = np.asarray(path.base.log_prob_table(np.asarray(x)), dtype=float)
    lt = np.asarray(path.target.log_table(np.asarray(x)), dtype=float)
    f = lt - lb
    mats = [None] + [np.asarray(kernel.transition_matrix(path, t, np.asarray(x)))
                     for t in range(1, path.T)]
    return lb, lt, f, mats


def forward_outcomes(path: AnnealedPath, kernel, x: int, start=None) -> _Outcomes:
    """All forward trajectories for one x: probability, log weight, endpoint z_T."""
    lb, _, f, mats = _chain_tables(path, kernel, x)
    nz = lb.size
    rho = np.exp(lb) if start is None else np.asarray(start, dtype=float)
    _check_size(nz**path.T, "forward trajectories")
    cur = np.arange(nz)
    prob = rho.copy()
    logw = path.dbeta[0] * f
    for t in range(1, path.T):
        M = mats[t]
        prob = (prob[:, None] * M[cur]).ravel()
        nxt = np.tile(np.arange(nz), cur.size)
        logw = np.repeat(logw, nz) + path.dbeta[t] * f[nxt]
        cur = nxt
        keep = prob > 0
        prob, logw, cur = prob[keep], logw[keep], cur[keep]
    return _Outcomes(prob, logw, cur)


def backward_outcomes(path: AnnealedPath, kernel, x: int, start) -> _Outcomes:
    """All backward trajectories from z_T ~ ``start``; ``end`` holds z_1."""
    lb, _, f, mats = _chain_tables(path, kernel, x)
    nz = lb.size
    _check_size(nz**path.T, "backward trajectories")
    cur = np.arange(nz)
    prob = np.asarray(start, dtype=float).copy()
    logw = path.dbeta[path.T - 1] * f
    for t in range(path.T - 1, 0, -1):
        M = mats[t]
        prob = (prob[:, None] * M[cur]).ravel()
        nxt = np.tile(np.arange(nz), cur.size)
        logw = np.repeat(logw, nz) + path.dbeta[t - 1] * f[nxt]
        cur = nxt
        keep = prob > 0
        prob, logw, cur = prob[keep], logw[keep], cur[keep]
    return _Outcomes(prob, logw, cur)


def _none():
    return np.zeros((1, 0))


def ais_logz(model: DiscreteJoint, path: AnnealedPath, kernel, variant: str, K: int,
             direction: str) -> float:
    """E_x of the expected lower or upper log Z estimate of a multi-sample AIS variant.

    ``variant`` is im_ais, ir_ais or cr_ais; ``direction`` is lower_logz or
    upper_logz.  The path target must be the model joint (normalizer p(x)).
    """
    if not isinstance(path.target, JointTarget):
        raise ValueError("AIS enumeration needs the model joint as the path target")
    total = 0.0
    for i in range(model.nx):
        if model.px[i] == 0:
            continue
        post = model.post_table[i]
        total += model.px[i] * _ais_logz_x(path, kernel, i, post, variant, K, direction)
    return total


def _ais_logz_x(path, kernel, x, post, variant, K, direction):
    if variant == "im_ais":
        F = forward_outcomes(path, kernel, x)
        if direction == "lower_logz":
            return multiset_expectation(F.prob, F.logw, K, _none(), K)[0]
        B = backward_outcomes(path, kernel, x, post)
        _check_size(B.prob.size * F.prob.size, "im_ais outcomes")
        vals = multiset_expectation(F.prob, F.logw, K - 1, B.logw, K)
        return float(B.prob @ vals)
    if variant == "ir_ais":
        B = backward_outcomes(path, kernel, x, post)
        if direction == "upper_logz":
            return multiset_expectation(B.prob, B.logw, K, _none(), K, sign=-1.0)[0]
        F = forward_outcomes(path, kernel, x)
        vals = multiset_expectation(B.prob, B.logw, K - 1, F.logw, K, sign=-1.0)
        return float(F.prob @ vals)
    if variant == "cr_ais":
        nz = post.size
        if direction == "upper_logz":
            out = 0.0
            for zT in range(nz):
                if post[zT] == 0:
                    continue
                B = backward_outcomes(path, kernel, x, np.eye(nz)[zT])
                out += post[zT] * multiset_expectation(B.prob, B.logw, K, _none(), K, sign=-1.0)[0]
            return out
        F = forward_outcomes(path, kernel, x)
        out = 0.0
        for e in np.unique(F.end):
            sel = F.end == e
            B = backward_outcomes(path, kernel, x, np.eye(nz)[e])
            vals = multiset_expectation(B.prob, B.logw, K - 1, F.logw[sel], K, sign=-1.0)
            out += float(F.prob[sel] @ vals)
        return out
    raise ValueError(f"unknown AIS variant {variant!r}")


def ais_mi(model: DiscreteJoint, path: AnnealedPath, kernel, variant: str, K: int) -> tuple[float, float]:
    """(lower_mi, upper_mi) of a multi-sample AIS variant."""
    ell = expected_log_likelihood(model)
    lo = ais_logz(model, path, kernel, variant, K, "lower_logz")
    hi = ais_logz(model, path, kernel, variant, K, "upper_logz")
    return ell - hi, ell - lo


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------

def enumerate_bound(model: DiscreteJoint, spec: dict) -> float:
    """Exact expectation of one bound on MI.

    ``spec`` keys: ``estimator`` (an estimator id), ``direction`` (lower_mi or
    upper_mi, for two-sided estimators), ``q``, ``critic``, ``K``, ``path``,
    ``kernel`` as the estimator needs them.
    """
    from .variational import TableProposal

    est = spec["estimator"]
    K = int(spec.get("K", 1))
    if est in ("s_infonce", "s_infonce_upper", "infonce"):
        q = TableProposal.prior(model)
    else:
        q = spec.get("q")
    direction = spec.get("direction")
    if est == "ba_lower":
        return ba_lower(model, q)
    if est == "ba_upper":
        return ba_upper(model, q)
    if est in ("iwae_lower", "s_infonce"):
        return iwae_lower(model, q, K)[0]
    if est in ("iwae_upper", "s_infonce_upper"):
        return iwae_upper(model, q, K)
    if est in ("giwae", "infonce"):
        return giwae(model, q, spec["critic"], K)[0]
    if est == "mine_dv":
        return mine_dv(model, q, spec["critic"])
    if est == "mine_f":
        return mine_f(model, q, spec["critic"])
    if est == "ibal":
        return ibal(model, q, spec["critic"])
    if est == "riwae":
        lo, hi = riwae_mi(model, q, K)
        return _pick(lo, hi, direction)
    if est in ("im_ais", "ir_ais", "cr_ais", "bdmc"):
        path = spec["path"]
        kernel = spec["kernel"]
        if est == "bdmc":
            if direction == "upper_mi":
                return expected_log_likelihood(model) - ais_logz(model, path, kernel, "im_ais", K, "lower_logz")
            return expected_log_likelihood(model) - ais_logz(model, path, kernel, "cr_ais", K, "upper_logz")
        lo, hi = ais_mi(model, path, kernel, est, K)
        return _pick(lo, hi, direction)
    raise ValueError(f"no enumeration rule for estimator {est!r}")


def _pick(lo, hi, direction):
    if direction == "lower_mi":
        return lo
    if direction == "upper_mi":
        return hi
    raise ValueError("direction must be 'lower_mi' or 'upper_mi' for two-sided estimators")
