"""Non-MCMC bounds: BA, IWAE, reverse IWAE, GIWAE, InfoNCE.

Every Monte Carlo estimator draws its outer (x, z) pairs from the joint first,
so estimators that coincide for special parameter values (K=1, constant
critic, ...) consume the same random stream and agree exactly on a shared
seed.  The positive sample of an outer draw is the z of that joint draw.
"""

from __future__ import annotations

import numpy as np

from ._numerics import as_rng, logmeanexp
from .models import Capability, JointModel
from .results import BoundEstimate, DecomposedBound, Direction, SandwichBounds
from .variational import PriorProposal

ESTIMATOR_IDS = (
    "ba_lower", "ba_upper", "iwae_lower", "iwae_upper", "giwae", "infonce", "s_infonce",
    "riwae", "im_ais", "ir_ais", "cr_ais", "bdmc", "mine_dv", "mine_f", "ibal",
)

GIWAE_UPPER_MESSAGE = (
    "a GIWAE upper bound on MI is not provided: with the critic restricted to the "
    "IWAE weights it gives no benefit over the IWAE upper bound (use iwae_upper)")


def _check_k(K: int) -> None:
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")


def sample_k(q, x, k: int, rng):
    """``k`` proposal draws per row of ``x``, shape (n, k, ...)."""
    return q.sample_k(x, k, rng)


def _meta(name, model, K=None, n=None, seed=None, **kw):
    m = {"estimator": name, "model": model.metadata(), "K": K, "n": n,
         "seed": seed if isinstance(seed, (int, np.integer)) else None}
    m.update(kw)
    return m


def _stack_slots(first, rest):
    first = first[:, None] if np.ndim(first) == np.ndim(rest) - 1 else first
    return np.concatenate([first, rest], axis=1)


# ---------------------------------------------------------------------------
# BA
# ---------------------------------------------------------------------------

def ba_lower(model: JointModel, q, n: int, seed) -> BoundEstimate:
    """E_p(x,z)[log q(z|x) - log p(z)]."""
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_PRIOR, what="ba_lower")
    rng = as_rng(seed)
    x, z = model.sample_joint(n, rng)
    draws = q.log_prob(x, z) - model.log_prior(z)
    return BoundEstimate.from_draws(draws, Direction.LOWER_MI, _meta("ba_lower", model, 1, n, seed))


def ba_upper(model: JointModel, q, n: int, seed) -> BoundEstimate:
    """E_p(x,z)[log p(x|z)] - E_p(x)q(z|x)[log p(x,z) - log q(z|x)]."""
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD, what="ba_upper")
    rng = as_rng(seed)
    x, z = model.sample_joint(n, rng)
    zq = q.sample(x, rng)
    draws = model.log_likelihood(x, z) - (model.log_joint(x, zq) - q.log_prob(x, zq))
    return BoundEstimate.from_draws(draws, Direction.UPPER_MI, _meta("ba_upper", model, 1, n, seed))


# ---------------------------------------------------------------------------
# IWAE family
# ---------------------------------------------------------------------------

def _log_weights(model, q, xb, Z):
    return model.log_joint(xb, Z) - q.log_prob(xb, Z)


def iwae_upper_mi(model: JointModel, q, K: int, n: int, seed) -> BoundEstimate:
    """Upper bound on MI from the IWAE lower bound on log p(x) (all K slots from q)."""
    _check_k(K)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD, what="iwae_upper")
    rng = as_rng(seed)
    x, z = model.sample_joint(n, rng)
    Z = sample_k(q, x, K, rng)
    logw = _log_weights(model, q, x[:, None], Z)
    draws = model.log_likelihood(x, z) - logmeanexp(logw, axis=1)
    return BoundEstimate.from_draws(draws, Direction.UPPER_MI, _meta("iwae_upper", model, K, n, seed))


def iwae_lower_mi(model: JointModel, q, K: int, n: int, seed):
    """Lower bound on MI from the IWAE upper bound on log p(x).

    Slot 0 holds the posterior sample, slots 1..K-1 are fresh draws from q.
    Returns the estimate and its split into a BA term and a contrastive term.
    """
    _check_k(K)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD, Capability.LOGP_PRIOR,
                  Capability.EXACT_POSTERIOR_SAMPLE, what="iwae_lower")
    rng = as_rng(seed)
    x, z1 = model.sample_joint(n, rng)
    ba = q.log_prob(x, z1) - model.log_prior(z1)
    if K > 1:
        Z = _stack_slots(z1, sample_k(q, x, K - 1, rng))
    else:
        Z = z1[:, None]
    logw = _log_weights(model, q, x[:, None], Z)
    contrastive = logw[:, 0] - logmeanexp(logw, axis=1)
    dec = DecomposedBound.from_draws(ba, contrastive, K)
    est = BoundEstimate.from_draws(ba + contrastive, Direction.LOWER_MI,
                                   _meta("iwae_lower", model, K, n, seed))
    return est, dec


def s_infonce(model: JointModel, K: int, n: int, seed):
    """Structured InfoNCE: the IWAE lower bound with q = p(z)."""
    est, dec = iwae_lower_mi(model, PriorProposal(model), K, n, seed)
    est.metadata["estimator"] = "s_infonce"
    return est, dec


def s_infonce_upper(model: JointModel, K: int, n: int, seed) -> BoundEstimate:
    est = iwae_upper_mi(model, PriorProposal(model), K, n, seed)
    est.metadata["estimator"] = "s_infonce_upper"
    return est


def giwae_lower(model: JointModel, q, critic, K: int, n: int, seed):
    """BA(q) plus the K-sample contrastive term built from critic SNIS weights."""
    _check_k(K)
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_PRIOR,
                  Capability.EXACT_POSTERIOR_SAMPLE, what="giwae")
    rng = as_rng(seed)
    x, z1 = model.sample_joint(n, rng)
    ba = q.log_prob(x, z1) - model.log_prior(z1)
    if K > 1:
        Z = _stack_slots(z1, sample_k(q, x, K - 1, rng))
    else:
        Z = z1[:, None]
    T = critic(x[:, None], Z)
    contrastive = T[:, 0] - logmeanexp(T, axis=1)
    dec = DecomposedBound.from_draws(ba, contrastive, K)
    est = BoundEstimate.from_draws(ba + contrastive, Direction.LOWER_MI,
                                   _meta("giwae", model, K, n, seed))
    return est, dec


def infonce(model: JointModel, critic, K: int, n: int, seed):
    """InfoNCE: GIWAE with q = p(z); its value can never exceed log K."""
    est, dec = giwae_lower(model, PriorProposal(model), critic, K, n, seed)
    est.metadata["estimator"] = "infonce"
    return est, dec


def giwae_upper(*_args, **_kwargs):
    raise NotImplementedError(GIWAE_UPPER_MESSAGE)


# ---------------------------------------------------------------------------
# reverse IWAE
# ---------------------------------------------------------------------------

def riwae_bounds(model: JointModel, q, K: int, n: int, seed, direction: str = "both") -> SandwichBounds:
    """Reverse importance weighting: -log mean_k q(z_k|x) / p(x, z_k).

    Lower bound on log p(x): slot 0 from q, K-1 posterior samples.
    Upper bound on log p(x): K posterior samples.  Needs K posterior samples
    per outer draw, so it is only available for models that sample the
    posterior exactly.
    """
    _check_k(K)
    if direction not in ("both", "lower_logz", "upper_logz"):
        raise ValueError("direction must be 'both', 'lower_logz' or 'upper_logz'")
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_LIKELIHOOD,
                  Capability.EXACT_POSTERIOR_SAMPLE, what="riwae (impractical: K posterior samples)")
    rng = as_rng(seed)
    x, zpos = model.sample_joint(n, rng)
    loglik = model.log_likelihood(x, zpos)
    lower = upper = lower_mi = upper_mi = None
    meta = _meta("riwae", model, K, n, seed, impractical=True)
    if direction in ("both", "lower_logz"):
        parts = [sample_k(q, x, 1, rng)]
        if K > 1:
            parts.append(zpos[:, None])
        if K > 2:
            parts.append(model.sample_posterior(model.expand_x(x, K - 2), rng))
        Z = np.concatenate(parts, axis=1)
        logw = _log_weights(model, q, x[:, None], Z)
        est = -logmeanexp(-logw, axis=1)
        lower = BoundEstimate.from_draws(est, Direction.LOWER_LOGZ, meta)
        upper_mi = BoundEstimate.from_draws(loglik - est, Direction.UPPER_MI, meta)
    if direction in ("both", "upper_logz"):
        parts = [zpos[:, None]]
        if K > 1:
            parts.append(model.sample_posterior(model.expand_x(x, K - 1), rng))
        Z = np.concatenate(parts, axis=1)
        logw = _log_weights(model, q, x[:, None], Z)
        est = -logmeanexp(-logw, axis=1)
        upper = BoundEstimate.from_draws(est, Direction.UPPER_LOGZ, meta)
        lower_mi = BoundEstimate.from_draws(loglik - est, Direction.LOWER_MI, meta)
    return SandwichBounds(lower, upper, upper_mi, lower_mi)


def elbo(model: JointModel, q, x, seed) -> np.ndarray:
    """Single-sample ELBO realization per row of ``x``."""
    z = q.sample(x, as_rng(seed))
    return model.log_joint(x, z) - q.log_prob(x, z)


def eubo(model: JointModel, q, x, seed) -> np.ndarray:
    """Single-sample EUBO realization per row of ``x`` (one posterior draw)."""
    model.require(Capability.EXACT_POSTERIOR_SAMPLE, what="eubo")
    z = model.sample_posterior(x, as_rng(seed))
    return model.log_joint(x, z) - q.log_prob(x, z)


def analytic_reference(model: JointModel) -> float | None:
    """Ground-truth MI when the model provides one, else None."""
    if model.has(Capability.ANALYTIC_MI) or model.has(Capability.ENUMERABLE):
        return model.analytic_mi()
    return None
