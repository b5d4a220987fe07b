"""Multi-sample AIS on extended state spaces: IM-AIS, IR-AIS, CR-AIS and BDMC.

Chain layout is (n, K, ...): n outer draws, K chains each, x broadcast as
(n, 1, ...).  All slots' initial states are evaluated in one stacked call, so
at T = 1 the weights coincide bitwise with the IWAE / reverse-IWAE weights.

  IM-AIS  lower log Z: K forward chains, log-mean-exp of weights.
          upper log Z: chain 1 backward from the posterior sample, K - 1 forward.
  IR-AIS  lower log Z: 1 forward, K - 1 backward from posterior samples.
          upper log Z: K backward from K posterior samples.
          Both use -log-mean-exp(-w).
  CR-AIS  lower log Z: 1 forward chain, K - 1 backward from its endpoint.
          upper log Z: K backward chains from one shared posterior sample.
          Both use -log-mean-exp(-w).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ._numerics import as_rng, logmeanexp
from .ais_engine import (AnnealedPath, ChainState, default_kernel, initial_state, run_backward,
                         run_forward)
from .models import Capability, JointModel
from .results import BoundEstimate, Direction, SandwichBounds
from .variational import PriorProposal

VARIANTS = ("im_ais", "ir_ais", "cr_ais")
DIRECTIONS = ("both", "lower_logz", "upper_logz")


def _check(K, T):
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")


def _slice(state: ChainState, a: int, b: int | None) -> ChainState:
    def s(v):
        return None if v is None else v[:, a:b]

    return ChainState(s(state.z), s(state.base_lp), s(state.target_lp), s(state.base_grad),
                      s(state.target_grad))


def _stack(*parts):
    return np.concatenate([np.asarray(p) for p in parts], axis=1)


class _Diag:
    def __init__(self):
        self.accept = []
        self.divergences = 0

    def add(self, rec):
        if rec.accept is not None and rec.accept.size:
            self.accept.append(float(np.mean(rec.accept)))
        self.divergences += int(rec.divergences)
        return rec.log_weight

    def as_dict(self):
        return {"mean_accept": float(np.mean(self.accept)) if self.accept else None,
                "divergences": self.divergences}


# ---------------------------------------------------------------------------
# log Z estimators on a given batch (x, positive sample)
# ---------------------------------------------------------------------------

def im_lower_logz(path, kernel, x, K, rng, diag=None):
    """log mean_k w_k over K forward chains; returns (estimate, weights)."""
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    z0 = path.base.sample_k(x, K, rng)
    w = diag.add(run_forward(path, kernel, xb, z0, rng))
    return logmeanexp(w, axis=1), w


def im_upper_logz(path, kernel, x, zpos, K, rng, diag=None):
    """Chain 1 runs backward from ``zpos``; the other K - 1 run forward.

    Returns (estimate, weights, f_pos) where f_pos is the endpoint log ratio at
    the posterior sample (the T = 1 weight of slot 0).
    """
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    Z = np.asarray(zpos)[:, None]
    if K > 1:
        Z = _stack(Z, path.base.sample_k(x, K - 1, rng))
    s0 = initial_state(path, kernel, xb, Z)
    f_pos = s0.log_ratio[:, 0]
    ws = [diag.add(run_backward(path, kernel, xb, rng=rng, state=_slice(s0, 0, 1)))]
    if K > 1:
        ws.append(diag.add(run_forward(path, kernel, xb, rng=rng, state=_slice(s0, 1, None))))
    w = _stack(*ws)
    return logmeanexp(w, axis=1), w, f_pos


def ir_lower_logz(path, kernel, x, zpos, K, rng, posterior: Callable, diag=None):
    """1 forward chain, K - 1 backward chains from independent posterior samples."""
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    parts = [path.base.sample_k(x, 1, rng)]
    if K > 1:
        parts.append(np.asarray(zpos)[:, None])
    if K > 2:
        parts.append(posterior(x, K - 2, rng))
    s0 = initial_state(path, kernel, xb, _stack(*parts))
    ws = [diag.add(run_forward(path, kernel, xb, rng=rng, state=_slice(s0, 0, 1)))]
    if K > 1:
        ws.append(diag.add(run_backward(path, kernel, xb, rng=rng, state=_slice(s0, 1, None))))
    w = _stack(*ws)
    return -logmeanexp(-w, axis=1), w


def ir_upper_logz(path, kernel, x, zpos, K, rng, posterior: Callable, diag=None):
    """K backward chains from K independent posterior samples (slot 0 is ``zpos``)."""
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    parts = [np.asarray(zpos)[:, None]]
    if K > 1:
        parts.append(posterior(x, K - 1, rng))
    s0 = initial_state(path, kernel, xb, _stack(*parts))
    w = diag.add(run_backward(path, kernel, xb, rng=rng, state=s0))
    return -logmeanexp(-w, axis=1), w


def cr_lower_logz(path, kernel, x, K, rng, diag=None):
    """1 forward chain; K - 1 backward chains start from its endpoint."""
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    fwd = run_forward(path, kernel, xb, path.base.sample_k(x, 1, rng), rng)
    ws = [diag.add(fwd)]
    if K > 1:
        zT = np.repeat(fwd.final.z, K - 1, axis=1)
        ws.append(diag.add(run_backward(path, kernel, xb, zT, rng)))
    w = _stack(*ws)
    return -logmeanexp(-w, axis=1), w


def cr_upper_logz(path, kernel, x, zpos, K, rng, diag=None):
    """K backward chains sharing one posterior sample as their start."""
    diag = diag or _Diag()
    xb = np.asarray(x)[:, None]
    zT = np.repeat(np.asarray(zpos)[:, None], K, axis=1)
    w = diag.add(run_backward(path, kernel, xb, zT, rng))
    return -logmeanexp(-w, axis=1), w


# ---------------------------------------------------------------------------
# MI estimators
# ---------------------------------------------------------------------------

def default_path(model: JointModel, T: int, base=None, kind: str = "linear") -> AnnealedPath:
    return AnnealedPath.for_model(model, base if base is not None else PriorProposal(model), T, kind)


def _prepare(model, path, kernel, K, T):
    _check(K, T)
    if path is None:
        path = default_path(model, T)
    elif path.T != T:
        path = path.with_T(T)
    if kernel is None and T > 1:
        kernel = default_kernel(model)
    return path, kernel


def _posterior_sampler(model):
    def sample(x, k, rng):
        return model.sample_posterior(model.expand_x(x, k), rng)

    return sample


def _meta(name, model, path, kernel, K, T, n, seed, **kw):
    m = {"estimator": name, "model": model.metadata(), "K": int(K), "T": int(T), "n": int(n),
         "schedule": path.kind, "kernel": getattr(kernel, "kind", None),
         "seed": seed if isinstance(seed, (int, np.integer)) else None}
    m.update(kw)
    return m


def _direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    return direction in ("both", "lower_logz"), direction in ("both", "upper_logz")


def _sandwich(meta, diag, loglik, lower=None, upper=None, upper_mi_draws=None, lower_mi_draws=None):
    lo = hi = umi = lmi = None
    if lower is not None:
        lo = BoundEstimate.from_draws(lower, Direction.LOWER_LOGZ, meta)
        umi = BoundEstimate.from_draws(loglik - lower if upper_mi_draws is None else upper_mi_draws,
                                       Direction.UPPER_MI, meta)
    if upper is not None:
        hi = BoundEstimate.from_draws(upper, Direction.UPPER_LOGZ, meta)
        lmi = BoundEstimate.from_draws(loglik - upper if lower_mi_draws is None else lower_mi_draws,
                                       Direction.LOWER_MI, meta)
    d = diag.as_dict()
    for b in (lo, hi, umi, lmi):
        if b is not None:
            b.diagnostics.update(d)
    return SandwichBounds(lo, hi, umi, lmi, d)


def im_ais(model: JointModel, path: AnnealedPath | None, kernel, K: int, T: int, n: int, seed,
           direction: str = "both") -> SandwichBounds:
    """Independent multi-sample AIS.  Lower log Z -> upper MI, upper log Z -> lower MI.

    The lower-MI draw is written as [log pi_0(z|x) - log p(z)] + [f(z) - est]
    with f = log p(x, z) - log pi_0(z|x) at the posterior sample: equal to
    log p(x|z) - est, and at T = 1 bitwise equal to the IWAE decomposition.
    """
    want_lo, want_hi = _direction(direction)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD, what="im_ais")
    if want_hi:
        model.require(Capability.EXACT_POSTERIOR_SAMPLE, Capability.LOGP_PRIOR,
                      what="im_ais lower bound on MI")
    path, kernel = _prepare(model, path, kernel, K, T)
    rng = as_rng(seed)
    x, zpos = model.sample_joint(n, rng)
    loglik = model.log_likelihood(x, zpos)
    diag = _Diag()
    lower = upper = lmi = None
    if want_lo:
        lower, _ = im_lower_logz(path, kernel, x, K, rng, diag)
    if want_hi:
        upper, _, f_pos = im_upper_logz(path, kernel, x, zpos, K, rng, diag)
        ba = path.base.log_prob(x, zpos) - model.log_prior(zpos)
        lmi = ba + (f_pos - upper)
    meta = _meta("im_ais", model, path, kernel, K, T, n, seed)
    return _sandwich(meta, diag, loglik, lower, upper, lower_mi_draws=lmi)


def ir_ais(model: JointModel, path: AnnealedPath | None, kernel, K: int, T: int, n: int, seed,
           direction: str = "both") -> SandwichBounds:
    """Independent reverse multi-sample AIS (needs K posterior samples: impractical)."""
    want_lo, want_hi = _direction(direction)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD,
                  Capability.EXACT_POSTERIOR_SAMPLE, what="ir_ais (impractical: K posterior samples)")
    path, kernel = _prepare(model, path, kernel, K, T)
    rng = as_rng(seed)
    x, zpos = model.sample_joint(n, rng)
    loglik = model.log_likelihood(x, zpos)
    post = _posterior_sampler(model)
    diag = _Diag()
    lower = upper = None
    if want_lo:
        lower, _ = ir_lower_logz(path, kernel, x, zpos, K, rng, post, diag)
    if want_hi:
        upper, _ = ir_upper_logz(path, kernel, x, zpos, K, rng, post, diag)
    meta = _meta("ir_ais", model, path, kernel, K, T, n, seed, impractical=True)
    return _sandwich(meta, diag, loglik, lower, upper)


def cr_ais(model: JointModel, path: AnnealedPath | None, kernel, K: int, T: int, n: int, seed,
           direction: str = "both") -> SandwichBounds:
    """Coupled reverse multi-sample AIS; one posterior sample per outer draw."""
    want_lo, want_hi = _direction(direction)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD, what="cr_ais")
    if want_hi:
        model.require(Capability.EXACT_POSTERIOR_SAMPLE, what="cr_ais lower bound on MI")
    path, kernel = _prepare(model, path, kernel, K, T)
    rng = as_rng(seed)
    x, zpos = model.sample_joint(n, rng)
    loglik = model.log_likelihood(x, zpos)
    diag = _Diag()
    lower = upper = None
    if want_lo:
        lower, _ = cr_lower_logz(path, kernel, x, K, rng, diag)
    if want_hi:
        upper, _ = cr_upper_logz(path, kernel, x, zpos, K, rng, diag)
    meta = _meta("cr_ais", model, path, kernel, K, T, n, seed)
    return _sandwich(meta, diag, loglik, lower, upper)


def bdmc(model: JointModel, path: AnnealedPath | None, kernel, K: int, T: int, n: int, seed) -> SandwichBounds:
    """IM-AIS lower bound on log Z paired with the CR-AIS upper bound, same seed for both."""
    im = im_ais(model, path, kernel, K, T, n, seed, direction="lower_logz")
    cr = cr_ais(model, path, kernel, K, T, n, seed, direction="upper_logz")
    for b in (im.lower_logz, im.upper_mi, cr.upper_logz, cr.lower_mi):
        b.metadata = dict(b.metadata, estimator="bdmc")
    diag = {"im": im.diagnostics, "cr": cr.diagnostics}
    return SandwichBounds(im.lower_logz, cr.upper_logz, im.upper_mi, cr.lower_mi, diag)


def ais_bounds(model: JointModel, path: AnnealedPath | None, kernel, T: int, n: int, seed,
               direction: str = "both") -> SandwichBounds:
    """Single-sample AIS sandwich: the K = 1 case shared by all three variants."""
    out = im_ais(model, path, kernel, 1, T, n, seed, direction)
    for b in (out.lower_logz, out.upper_logz, out.upper_mi, out.lower_mi):
        if b is not None:
            b.metadata = dict(b.metadata, estimator="ais")
    return out


ESTIMATORS = {"im_ais": im_ais, "ir_ais": ir_ais, "cr_ais": cr_ais}

