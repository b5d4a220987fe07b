"""Energy-based bounds (MINE-DV, MINE-F, IBAL), critic training, and AIS evaluation of the IBAL.

The energy posterior is pi(z|x) = q(z|x) e^{T(x,z)} / Z(x).  IBAL(q, T) is the
BA bound evaluated at pi:

    IBAL = E_p[log q(z|x) - log p(z)] + E_p[T(x, z)] - E_x log Z(x).

MINE-DV replaces E_x log Z(x) by log E_x Z(x) and MINE-F by E_x Z(x) / e, so
MINE-F <= MINE-DV <= IBAL for the same (q, T).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._numerics import as_rng, logmeanexp
from .ais_engine import (AnnealedPath, EnergyTarget, HMCKernel, KernelStats, PerfectKernel,
                         default_kernel, hmc_step, initial_state)
from .models import Capability, JointModel
from .multisample_ais import cr_upper_logz, im_lower_logz, _Diag
from .results import BoundEstimate, Direction
from .variational import (Adam, ConditionalGaussian, PriorProposal, TableCritic, load_checkpoint,
                          CHECKPOINT_FORMAT, CHECKPOINT_VERSION)

OBJECTIVES = ("giwae", "infonce", "mine_dv", "mine_f", "ba")
UPPER = "upper"
APPROX_LOWER = "approx_lower"


class DegenerateEstimateError(RuntimeError):
    """The Monte Carlo log-partition estimate is not finite."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# energy posterior
# ---------------------------------------------------------------------------

class EnergyPosterior:
    """pi(z|x) proportional to q(z|x) exp(T(x, z))."""

    def __init__(self, base, critic):
        self.base = base
        self.critic = critic
        self.discrete = getattr(base, "discrete", False)

    @property
    def target(self) -> EnergyTarget:
        return EnergyTarget(self.base, self.critic)

    def log_unnormalized(self, x, z):
        return self.base.log_prob(x, z) + self.critic(x, z)

    def path(self, T: int, kind: str = "linear") -> AnnealedPath:
        """Bridge q -> q e^{beta T}; the endpoint log ratio is the critic itself."""
        return AnnealedPath(self.base, self.target, T=T, kind=kind)

    @property
    def is_constant(self) -> bool:
        return bool(getattr(self.critic, "is_constant", False))


# ---------------------------------------------------------------------------
# MINE-DV / MINE-F
# ---------------------------------------------------------------------------

def _meta(name, model, n, seed, **kw):
    m = {"estimator": name, "model": model.metadata(), "n": int(n),
         "seed": seed if isinstance(seed, (int, np.integer)) else None}
    m.update(kw)
    return m


def _energy_draws(model, q, critic, n, seed):
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_PRIOR, what="energy bounds")
    rng = as_rng(seed)
    x, z = model.sample_joint(n, rng)
    zq = q.sample(x, rng)
    ba = q.log_prob(x, z) - model.log_prior(z)
    return ba, critic(x, z), critic(x, zq)


def mine_dv(model: JointModel, q, critic, n: int, seed) -> BoundEstimate:
    """BA(q) + E_p[T] - log E_{p(x) q(z|x)}[e^T], one base draw per outer draw.

    The reported draws are delta-method pseudo-values: their mean is the
    estimate and their spread gives the standard error.
    """
    ba, t_pos, t_neg = _energy_draws(model, q, critic, n, seed)
    log_part = logmeanexp(t_neg, axis=0)
    if not np.isfinite(log_part):
        raise DegenerateEstimateError("MINE-DV log-partition estimate is not finite")
    with np.errstate(over="ignore"):
        ratio = np.exp(t_neg - log_part)
    draws = ba + (t_pos - log_part) - (ratio - 1.0)
    return BoundEstimate.from_draws(draws, Direction.LOWER_MI, _meta("mine_dv", model, n, seed),
                                    diagnostics={"log_partition": float(log_part)})


def mine_f(model: JointModel, q, critic, n: int, seed) -> BoundEstimate:
    """BA(q) + E_p[T] - E_{p(x) q(z|x)}[e^{T - 1}]."""
    ba, t_pos, t_neg = _energy_draws(model, q, critic, n, seed)
    with np.errstate(over="ignore"):
        draws = ba + (t_pos - np.exp(t_neg - 1.0))
    if not np.all(np.isfinite(draws)):
        raise DegenerateEstimateError("MINE-F draws overflowed")
    return BoundEstimate.from_draws(draws, Direction.LOWER_MI, _meta("mine_f", model, n, seed))


def ibal_value_exact(model, q, critic) -> float:
    """Exact IBAL on an enumerable model."""
    from . import enumeration

    model.require(Capability.ENUMERABLE, what="ibal_value_exact")
    return enumeration.ibal(model, q, critic)


def _outer_draws(model, n, rng, data=None):
    """Joint draws, or a fixed data batch paired with exact posterior samples."""
    if data is None:
        return model.sample_joint(n, rng)
    x = np.asarray(data, dtype=int if model.discrete else float)
    model.require(Capability.EXACT_POSTERIOR_SAMPLE, what="fixed-batch draws")
    return x, model.sample_posterior(x, rng)


# ---------------------------------------------------------------------------
# AIS evaluation of the IBAL
# ---------------------------------------------------------------------------

def eval_ibal_ais(model: JointModel, energy: EnergyPosterior, T: int, K: int, n: int, seed,
                  mode: str = UPPER, kernel=None, schedule: str = "linear", data=None) -> BoundEstimate:
    """Multi-sample AIS estimate of the IBAL on the bridge q -> q e^T.

    UPPER plugs in the IM-AIS lower bound on log Z(x) (K forward chains) and
    is a stochastic upper bound on the IBAL.  APPROX_LOWER plugs in K backward
    chains started from the true posterior sample (CR-AIS wiring); it is exact
    when pi equals p(z|x) and approximate otherwise.  At T = 1 APPROX_LOWER
    equals the BA bound of q draw for draw.

    With ``data`` the outer draws are the rows of that fixed batch, each with
    one exact posterior sample, and ``n`` is ignored.
    """
    if mode not in (UPPER, APPROX_LOWER):
        raise ValueError(f"mode must be '{UPPER}' or '{APPROX_LOWER}'")
    if int(K) != K or K < 1 or int(T) != T or T < 1:
        raise ValueError("K and T must be positive integers")
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_PRIOR, what="eval_ibal_ais")
    if mode == APPROX_LOWER:
        model.require(Capability.EXACT_POSTERIOR_SAMPLE, what="eval_ibal_ais approx-lower")
    path = energy.path(T, schedule)
    if kernel is None and T > 1:
        kernel = default_kernel(energy)
    rng = as_rng(seed)
    x, zpos = _outer_draws(model, n, rng, data)
    n = len(x)
    q = energy.base
    ba = q.log_prob(x, zpos) - model.log_prior(zpos)
    f_pos = initial_state(path, kernel, np.asarray(x)[:, None], np.asarray(zpos)[:, None]).log_ratio[:, 0]
    diag = _Diag()
    if mode == UPPER:
        logz, _ = im_lower_logz(path, kernel, x, K, rng, diag)
        direction, approximate = Direction.UPPER_MI, False
    else:
        logz, _ = cr_upper_logz(path, kernel, x, zpos, K, rng, diag)
        direction, approximate = Direction.LOWER_MI, True
    draws = ba + (f_pos - logz)
    meta = _meta("ibal", model, n, seed, K=int(K), T=int(T), mode=mode, schedule=schedule,
                 kernel=getattr(kernel, "kind", None))
    return BoundEstimate.from_draws(draws, direction, meta, approximate=approximate,
                                    diagnostics=diag.as_dict())


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    objective: str
    critic_params: np.ndarray | None
    q_params: np.ndarray | None
    critic_opt: Adam | None
    q_opt: Adam | None
    step: int = 0
    losses: list = field(default_factory=list)
    mcmc: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in np.asarray(a).ravel()]

        return {"format": CHECKPOINT_FORMAT + "-train", "version": CHECKPOINT_VERSION,
                "objective": self.objective, "critic_params": arr(self.critic_params),
                "q_params": arr(self.q_params),
                "critic_opt": None if self.critic_opt is None else self.critic_opt.state(),
                "q_opt": None if self.q_opt is None else self.q_opt.state(),
                "step": self.step, "losses": [float(v) for v in self.losses], "mcmc": self.mcmc,
                "counters": self.counters, "config": self.config}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TrainState":
        d = json.loads(Path(path).read_text())
        if d.get("format") != CHECKPOINT_FORMAT + "-train" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} training checkpoint")

        def arr(a):
            return None if a is None else np.array(a, dtype=float)

        return cls(d["objective"], arr(d["critic_params"]), arr(d["q_params"]),
                   None if d["critic_opt"] is None else Adam.from_state(d["critic_opt"]),
                   None if d["q_opt"] is None else Adam.from_state(d["q_opt"]),
                   d["step"], d["losses"], d["mcmc"], d["counters"], d["config"])

    def smoothed_losses(self, window: int = 50) -> np.ndarray:
        a = np.asarray(self.losses, dtype=float)
        if a.size < window:
            return a
        c = np.cumsum(np.insert(a, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def _trainable_q(q) -> bool:
    return isinstance(q, ConditionalGaussian)


def _check_finite_loss(value, step, what):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} loss at step {step}: {value!r}")


# ---------------------------------------------------------------------------
# static-objective training
# ---------------------------------------------------------------------------

def _objective_fn(objective, model, q, critic, x, z1, Zneg, eps_neg, K, train_q: bool):
    """Build loss(critic_params, q_params) for one batch (the negated bound).

    With ``train_q`` the negatives are reparameterized from the noise
    ``eps_neg`` so the pathwise gradient in theta is kept.
    """

    def loss(pc, pq):
        if train_q:
            mean, log_std = q.mean_log_std_ad(x, pq)
            ba = q.log_prob_ad(x, z1, pq) - model.log_prior(z1)
        else:
            ba = q.log_prob(x, z1) - model.log_prior(z1)
        if objective == "ba":
            return -ad.mean(ba)
        if train_q:
            Zq = mean[:, None, :] + ad.exp(log_std)[:, None, :] * eps_neg
        else:
            Zq = Zneg
        t1 = critic.ad_call(x, z1, pc)
        if objective in ("giwae", "infonce"):
            allt = ad.reshape(t1, (-1, 1))
            if K > 1:
                allt = ad.concatenate([allt, critic.ad_call(x[:, None], Zq, pc)], axis=1)
            return -ad.mean(ba + (t1 - ad.logmeanexp(allt, axis=1)))
        tn = ad.reshape(critic.ad_call(x[:, None], Zq, pc), (-1,))
        if objective == "mine_dv":
            return -(ad.mean(ba) + ad.mean(t1) - ad.logmeanexp(tn, axis=0))
        if objective == "mine_f":
            return -(ad.mean(ba) + ad.mean(t1) - ad.mean(ad.exp(tn - 1.0)))
        raise ValueError(f"unknown objective {objective!r}")

    return loss


def train_bound(objective: str, model: JointModel, q, critic, K: int, steps: int, batch: int, seed,
                lr: float = 1e-4, q_lr: float | None = None, schedule: str = "joint",
                train_q: bool = True, q_steps: int | None = None,
                state: TrainState | None = None) -> TrainState:
    """Train a critic (and optionally q) by ascending a bound on fresh joint draws.

    ``schedule="joint"`` updates q and the critic together.  ``"staged"`` first
    fits q alone on the BA bound for ``q_steps`` steps, then freezes q and
    trains the critic.  InfoNCE always uses q = p(z) and never trains q.
    """
    objective = objective.replace("-", "_")
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if schedule not in ("joint", "staged"):
        raise ValueError("schedule must be 'joint' or 'staged'")
    if int(K) != K or K < 1:
        raise ValueError("K must be a positive integer")
    model.require(Capability.SAMPLE_JOINT, Capability.LOGP_PRIOR, what=f"train_bound({objective})")
    if objective == "infonce":
        q = PriorProposal(model)
    fit_q = train_q and _trainable_q(q)
    has_critic = critic is not None and objective != "ba"
    rng = as_rng(seed)
    if state is None:
        state = TrainState(objective, None if critic is None else critic.params.copy(),
                           q.params.copy() if fit_q else None,
                           Adam(critic.params.size, lr) if has_critic else None,
                           Adam(q.params.size, q_lr or lr) if fit_q else None,
                           config={"K": int(K), "batch": int(batch), "lr": lr, "q_lr": q_lr or lr,
                                   "schedule": schedule, "train_q": bool(fit_q)})
    q_phase = int(q_steps if q_steps is not None else (steps // 2 if schedule == "staged" else 0))
    for i in range(int(steps)):
        x, z1 = model.sample_joint(batch, rng)
        staged_q = schedule == "staged" and i < q_phase
        update_q = fit_q and (schedule == "joint" or staged_q)
        update_c = has_critic and not staged_q
        obj = "ba" if staged_q else objective
        eps_neg = Zneg = None
        if obj != "ba":
            m_neg = K - 1 if obj in ("giwae", "infonce") else 1
            if update_q:
                eps_neg = rng.standard_normal((batch, max(m_neg, 1), q.latent_dim))
            elif m_neg > 0:
                Zneg = q.sample_k(x, m_neg, rng)
        loss = _objective_fn(obj, model, q, critic, x, z1, Zneg, eps_neg, K, update_q)
        pc = critic.params if critic is not None else np.zeros(1)
        pq = q.params if fit_q else np.zeros(1)
        value, (gc, gq) = ad.value_and_grad(loss, pc, pq)
        _check_finite_loss(value, state.step, objective)
        if update_c:
            critic.params = state.critic_opt.step(critic.params, gc)
            state.critic_params = critic.params.copy()
        if update_q:
            q.params = state.q_opt.step(q.params, gq)
            state.q_params = q.params.copy()
        state.losses.append(value)
        state.step += 1
    return state


def critic_gradient(objective: str, model, q, critic, K: int, batch: int, seed) -> np.ndarray:
    """Gradient of the negated bound w.r.t. the critic on one batch (q frozen)."""
    rng = as_rng(seed)
    x, z1 = model.sample_joint(batch, rng)
    m_neg = K - 1 if objective in ("giwae", "infonce") else 1
    Zneg = q.sample_k(x, m_neg, rng) if m_neg > 0 else None
    loss = _objective_fn(objective, model, q, critic, x, z1, Zneg, None, K, False)
    _, (gc, _) = ad.value_and_grad(loss, critic.params, np.zeros(1))
    return gc


# ---------------------------------------------------------------------------
# MINE-AIS: contrastive-divergence-style IBAL training
# ---------------------------------------------------------------------------

def negative_samples(energy: EnergyPosterior, x, z_init, M: int, L: int, eps: float, rng,
                     stats: dict | None = None):
    """M Metropolis-corrected moves targeting pi(z|x), started at ``z_init``.

    Continuous latents use HMC with L leapfrog steps of size ``eps``; discrete
    latents draw exactly from the normalized table when ``M > 0`` (``L`` and
    ``eps`` unused).  Returns (z, mean acceptance).
    """
    if M == 0:
        return np.array(z_init, copy=True), 1.0
    path = AnnealedPath(energy.base, energy.target, betas=np.array([0.0, 1.0]))
    if energy.discrete:
        z = PerfectKernel().sample(path, 1.0, x, np.asarray(z_init), rng)
        return z, 1.0
    state = initial_state(path, HMCKernel(eps, L), x, z_init)
    ks = KernelStats()
    acc = []
    for _ in range(M):
        state, a = hmc_step(path, 1.0, eps, L, x, state, rng, ks, 0)
        acc.append(float(np.mean(a)))
    if stats is not None:
        stats["divergent_proposals"] = stats.get("divergent_proposals", 0) + ks.divergences
    return state.z, float(np.mean(acc))


def mine_ais_gradients(model, energy: EnergyPosterior, x, zpos, zneg, train_q: bool):
    """Surrogate gradients: E_pos[grad] - E_neg[grad] for T (and log q when training q)."""
    critic, q = energy.critic, energy.base

    def critic_loss(pc):
        return -(ad.mean(critic.ad_call(x, zpos, pc)) - ad.mean(critic.ad_call(x, zneg, pc)))

    gap, (gc,) = ad.value_and_grad(critic_loss, critic.params)
    gq = None
    if train_q and _trainable_q(q):
        def q_loss(pq):
            return -(ad.mean(q.log_prob_ad(x, zpos, pq)) - ad.mean(q.log_prob_ad(x, zneg, pq)))

        _, (gq,) = ad.value_and_grad(q_loss, q.params)
    return -gap, gc, gq


def train_mine_ais(model: JointModel, q, critic, steps: int, batch: int, mcmc: dict | None = None,
                   seed=0, lr: float = 1e-4, train_q: bool = False, q_lr: float | None = None,
                   adapt_eps: bool = True, target_accept: float = 0.65,
                   state: TrainState | None = None, data=None,
                   lr_final: float | None = None) -> TrainState:
    """Train the IBAL critic with posterior-initialized MCMC negatives.

    Each step draws (x, z) from the joint, runs M HMC moves (L leapfrog steps)
    targeting q e^T from z, and ascends mean T(x, z_pos) - mean T(x, z_neg).
    With ``adapt_eps`` the negative-sampling step size follows the acceptance
    rate toward ``target_accept``; those chains carry no importance weights,
    so adapting during training does not bias anything.

    With ``data`` each step takes ``batch`` rows of that fixed batch (without
    replacement when it is large enough) and pairs them with fresh posterior
    samples instead of drawing x from the model.

    ``lr_final`` decays the critic learning rate linearly from ``lr`` over the
    ``steps`` of this call.
    """
    model.require(Capability.SAMPLE_JOINT, Capability.EXACT_POSTERIOR_SAMPLE, what="train_mine_ais")
    mc = {"M": 10, "L": 20, "eps": 0.05}
    mc.update(mcmc or {})
    M, L, eps = int(mc["M"]), int(mc["L"]), float(mc["eps"])
    fit_q = train_q and _trainable_q(q)
    rng = as_rng(seed)
    energy = EnergyPosterior(q, critic)
    if state is None:
        state = TrainState("mine_ais", critic.params.copy(), q.params.copy() if fit_q else None,
                           Adam(critic.params.size, lr), Adam(q.params.size, q_lr or lr) if fit_q else None,
                           mcmc=dict(mc), counters={"skipped_batches": 0, "divergent_proposals": 0},
                           config={"batch": int(batch), "lr": lr, "train_q": bool(fit_q),
                                   "adapt_eps": bool(adapt_eps), "lr_final": lr_final})
    stats = {"divergent_proposals": 0}
    pool = None if data is None else np.asarray(data, dtype=int if model.discrete else float)
    for i in range(int(steps)):
        if lr_final is not None:
            state.critic_opt.lr = lr + (lr_final - lr) * i / max(int(steps) - 1, 1)
        if pool is None:
            x, zpos = model.sample_joint(batch, rng)
        else:
            rows = rng.choice(len(pool), size=batch, replace=batch > len(pool))
            x, zpos = _outer_draws(model, batch, rng, pool[rows])
        before = stats["divergent_proposals"]
        zneg, acc = negative_samples(energy, x, zpos, M, L, eps, rng, stats)
        if adapt_eps and M > 0 and not energy.discrete:
            eps = float(np.clip(eps * np.exp(0.5 * (acc - target_accept)), 1e-5, 10.0))
        if M > 0 and stats["divergent_proposals"] - before > 0.5 * M * batch:
            state.counters["skipped_batches"] = state.counters.get("skipped_batches", 0) + 1
            state.step += 1
            continue
        gap, gc, gq = mine_ais_gradients(model, energy, x, zpos, zneg, fit_q)
        _check_finite_loss(gap, state.step, "MINE-AIS")
        critic.params = state.critic_opt.step(critic.params, gc)
        state.critic_params = critic.params.copy()
        if fit_q and gq is not None:
            q.params = state.q_opt.step(q.params, gq)
            state.q_params = q.params.copy()
        state.losses.append(-gap)
        state.step += 1
    state.counters["divergent_proposals"] = (state.counters.get("divergent_proposals", 0)
                                             + stats["divergent_proposals"])
    state.mcmc["eps"] = eps
    return state


def mine_ais_gradient_mc(model, q, critic: TableCritic, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo IBAL gradient w.r.t. a critic table with exact negatives.

    Returns (mean, standard error) of the per-draw gradient estimates
    e_{x,z_pos} - e_{x,z_neg}, z_neg ~ pi(z|x) exactly.
    """
    rng = as_rng(seed)
    x, zpos = model.sample_joint(n, rng)
    energy = EnergyPosterior(q, critic)
    zneg, _ = negative_samples(energy, x, zpos, 1, 0, 0.0, rng)
    nx, nz = critic.nx, critic.nz
    g = np.zeros((n, nx * nz))
    rows = np.arange(n)
    np.add.at(g, (rows, x * nz + zpos), 1.0)
    np.add.at(g, (rows, x * nz + zneg), -1.0)
    mean = g.mean(axis=0)
    se = g.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, se


def load_critic(path):
    return load_checkpoint(path)
