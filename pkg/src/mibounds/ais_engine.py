"""Annealed importance sampling: geometric paths, transition kernels, chains.

Convention (weight, then move).  With schedule 0 = b_0 < b_1 < ... < b_T = 1
and f = log pi_T - log pi_0, a forward chain draws z_1 ~ pi_0 and for
t = 1..T adds (b_t - b_{t-1}) f(z_t) to its log weight, then (for t < T)
moves z_{t+1} ~ K_t(.|z_t) with K_t invariant for pi_{b_t}.  A backward chain
starts from z_T ~ pi_T, weights z_T with (b_T - b_{T-1}) f, moves with
K_{T-1}, weights again, and so on down to z_1.  T weighted states and T - 1
kernel moves per chain; for T = 1 both chains collapse to simple importance
sampling, which makes the T = 1 reductions exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._numerics import as_rng, categorical_from_uniform, mean_and_se, softmax
from .models import LOG_2PI, Capability, JointModel


class UnsupportedPathError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

LINEAR = "linear"
SIGMOID = "sigmoid"


def make_schedule(T: int, kind: str = LINEAR, sigmoid_delta: float = 4.0) -> np.ndarray:
    """beta_0..beta_T, strictly increasing from 0 to 1."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == LINEAR:
        b = np.linspace(0.0, 1.0, T + 1)
    elif kind == SIGMOID:
        if T == 1:
            b = np.array([0.0, 1.0])
        else:
            s = 1.0 / (1.0 + np.exp(-np.linspace(-sigmoid_delta, sigmoid_delta, T + 1)))
            b = (s - s[0]) / (s[-1] - s[0])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected 'linear' or 'sigmoid'")
    b[0], b[-1] = 0.0, 1.0
    return b


# ---------------------------------------------------------------------------
# endpoint densities
# ---------------------------------------------------------------------------

class JointTarget:
    """Unnormalized target p(x, z) as a function of z; its normalizer is p(x)."""

    def __init__(self, model: JointModel):
        self.model = model
        self.discrete = model.discrete

    def log_density(self, x, z):
        return self.model.log_joint(x, z)

    def log_density_and_grad(self, x, z):
        return self.model.log_joint_and_grad(x, z)

    def log_table(self, x):
        return self.model.log_joint_table(x)

    def gaussian_natural(self, x):
        if not hasattr(self.model, "gaussian_natural"):
            raise UnsupportedPathError("target is not Gaussian in z")
        return self.model.gaussian_natural(x)


class EnergyTarget:
    """Unnormalized q(z|x) exp(T(x, z)); its normalizer is Z(x) = E_q[e^T]."""

    def __init__(self, q, critic):
        self.q = q
        self.critic = critic
        self.discrete = getattr(q, "discrete", False)

    def log_density(self, x, z):
        return self.q.log_prob(x, z) + self.critic(x, z)

    def log_density_and_grad(self, x, z):
        lq, gq = self.q.log_prob_and_grad(x, z)
        t, gt = self.critic.value_and_grad_z(x, z)
        return lq + t, gq + gt

    def log_table(self, x):
        return self.q.log_prob_table(x) + self.critic.table_values(x)

    def gaussian_natural(self, x):
        raise UnsupportedPathError("energy targets are not Gaussian in general")


class FixedGaussian:
    """Diagonal Gaussian that ignores x; usable as a base or (scaled) as a target."""

    discrete = False

    def __init__(self, mean, std, log_scale: float = 0.0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.broadcast_to(np.atleast_1d(np.asarray(std, dtype=float)), self.mean.shape).copy()
        self.latent_dim = self.mean.size
        self.log_scale = float(log_scale)

    def log_prob(self, x, z):
        d = (np.asarray(z, dtype=float) - self.mean) / self.std
        return (np.sum(-0.5 * d * d - np.log(self.std), axis=-1)
                - 0.5 * self.latent_dim * LOG_2PI + self.log_scale)

    log_density = log_prob

    def log_prob_and_grad(self, x, z):
        z = np.asarray(z, dtype=float)
        return self.log_prob(x, z), -(z - self.mean) / self.std**2

    log_density_and_grad = log_prob_and_grad

    def _batch(self, x):
        return np.shape(x)[:-1]

    def sample(self, x, rng):
        eps = as_rng(rng).standard_normal(self._batch(x) + (self.latent_dim,))
        return self.mean + self.std * eps

    def sample_k(self, x, k, rng):
        eps = as_rng(rng).standard_normal(self._batch(x) + (k, self.latent_dim))
        return self.mean + self.std * eps

    def gaussian_natural(self, x):
        prec = np.diag(1.0 / self.std**2)
        h = np.broadcast_to(self.mean / self.std**2, self._batch(x) + (self.latent_dim,))
        return prec, h


def gaussian_kl(mean_a, cov_a, mean_b, cov_b) -> np.ndarray:
    """KL[N(a) || N(b)], batched over leading axes of the means."""
    d = np.shape(mean_a)[-1]
    inv_b = np.linalg.inv(cov_b)
    diff = np.asarray(mean_b) - np.asarray(mean_a)
    tr = np.trace(inv_b @ cov_a, axis1=-2, axis2=-1)
    quad = np.einsum("...i,...ij,...j->...", diff, inv_b, diff)
    ld = np.linalg.slogdet(cov_b)[1] - np.linalg.slogdet(cov_a)[1]
    return 0.5 * (tr + quad - d + ld)


# ---------------------------------------------------------------------------
# path
# ---------------------------------------------------------------------------

@dataclass
class ChainState:
    z: np.ndarray
    base_lp: np.ndarray
    target_lp: np.ndarray
    base_grad: np.ndarray | None = None
    target_grad: np.ndarray | None = None

    @property
    def log_ratio(self):
        return self.target_lp - self.base_lp


class AnnealedPath:
    """Geometric bridge log g_t = (1 - b_t) log pi_0 + b_t log pi_T."""

    def __init__(self, base, target, betas=None, T: int | None = None, kind: str = LINEAR,
                 sigmoid_delta: float = 4.0):
        if betas is None:
            if T is None:
                raise ValueError("give either betas or T")
            betas = make_schedule(T, kind, sigmoid_delta)
        betas = np.asarray(betas, dtype=float)
        if betas.ndim != 1 or betas.size < 2 or betas[0] != 0.0 or betas[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1")
        if np.any(np.diff(betas) <= 0):
            raise ValueError("schedule must be strictly increasing")
        self.base = base
        self.target = target
        self.betas = betas
        self.dbeta = np.diff(betas)
        self.kind = kind
        self.sigmoid_delta = sigmoid_delta
        self.discrete = getattr(base, "discrete", False)

    @property
    def T(self) -> int:
        return self.betas.size - 1

    def with_T(self, T: int) -> "AnnealedPath":
        return AnnealedPath(self.base, self.target, T=T, kind=self.kind,
                            sigmoid_delta=self.sigmoid_delta)

    @classmethod
    def for_model(cls, model: JointModel, base, T: int, kind: str = LINEAR, **kw) -> "AnnealedPath":
        return cls(base, JointTarget(model), T=T, kind=kind, **kw)

    # evaluation -----------------------------------------------------
    def evaluate(self, x, z, grad: bool = True) -> ChainState:
        if self.discrete or not grad:
            return ChainState(z, self.base.log_prob(x, z), self.target.log_density(x, z))
        blp, bg = self.base.log_prob_and_grad(x, z)
        tlp, tg = self.target.log_density_and_grad(x, z)
        return ChainState(z, blp, tlp, bg, tg)

    def log_ratio(self, x, z):
        return self.target.log_density(x, z) - self.base.log_prob(x, z)

    def log_gamma(self, t: int, x, z):
        b = self.betas[t]
        base = self.base.log_prob(x, z)
        return base + b * (self.target.log_density(x, z) - base)

    def log_gamma_table(self, beta: float, x):
        lb = self.base.log_prob_table(x)
        lt = self.target.log_table(x)
        with np.errstate(invalid="ignore"):
            return lb + beta * (lt - lb)

    def gaussian_natural(self, beta: float, x):
        try:
            pb, hb = self.base.gaussian_natural(x)
            pt, ht = self.target.gaussian_natural(x)
        except (AttributeError, NotImplementedError) as exc:
            raise UnsupportedPathError("perfect transitions need Gaussian endpoints") from exc
        return (1.0 - beta) * pb + beta * pt, (1.0 - beta) * hb + beta * ht


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass
class KernelStats:
    steps: int = 0
    accept_sum: float = 0.0
    divergences: int = 0
    per_t_accept: dict = field(default_factory=dict)

    def record(self, t, accept_prob: np.ndarray, divergent: int):
        a = float(np.mean(accept_prob))
        self.steps += 1
        self.accept_sum += a
        self.divergences += int(divergent)
        self.per_t_accept[t] = self.per_t_accept.get(t, 0.0) + a

    @property
    def mean_accept(self) -> float:
        return self.accept_sum / self.steps if self.steps else float("nan")


class HMCKernel:
    """Metropolis-corrected HMC with identity mass and L leapfrog steps.

    ``step_size`` is a scalar or an array indexed by t (the kernel used after
    weighting at b_t).  Divergent trajectories (non-finite energy) are
    rejected and counted.
    """

    kind = "hmc"

    def __init__(self, step_size=0.1, n_leapfrog: int = 20):
        self.step_size = step_size
        self.n_leapfrog = int(n_leapfrog)
        self.stats = KernelStats()

    def eps_at(self, t: int) -> float:
        s = self.step_size
        return float(s[t]) if np.ndim(s) else float(s)

    def with_step_size(self, step_size) -> "HMCKernel":
        return HMCKernel(step_size, self.n_leapfrog)

    def step(self, path: AnnealedPath, t: int, x, state: ChainState, rng, beta=None,
             eps=None) -> tuple[ChainState, np.ndarray]:
        beta = path.betas[t] if beta is None else beta
        eps = self.eps_at(t) if eps is None else eps
        return hmc_step(path, beta, eps, self.n_leapfrog, x, state, rng, self.stats, t)


def hmc_step(path, beta, eps, n_leapfrog, x, state: ChainState, rng, stats=None, t=None):
    rng = as_rng(rng)
    z0 = state.z
    p0 = rng.standard_normal(z0.shape)
    g = state.base_grad + beta * (state.target_grad - state.base_grad)
    lg0 = state.base_lp + beta * (state.target_lp - state.base_lp)
    with np.errstate(over="ignore", invalid="ignore"):
        p = p0 + 0.5 * eps * g
        z = z0
        new = state
        for i in range(n_leapfrog):
            z = z + eps * p
            new = path.evaluate(x, z)
            g = new.base_grad + beta * (new.target_grad - new.base_grad)
            if i < n_leapfrog - 1:
                p = p + eps * g
        p = p + 0.5 * eps * g
        lg1 = new.base_lp + beta * (new.target_lp - new.base_lp)
        log_acc = (lg1 - 0.5 * np.sum(p * p, axis=-1)) - (lg0 - 0.5 * np.sum(p0 * p0, axis=-1))
    u = rng.random(np.shape(log_acc))
    finite = np.isfinite(log_acc)
    accept = finite & (np.log(u) < np.where(finite, log_acc, -np.inf))
    acc_prob = np.where(finite, np.exp(np.minimum(np.where(finite, log_acc, 0.0), 0.0)), 0.0)
    if stats is not None:
        stats.record(t, acc_prob, int(np.sum(~finite)))
    m = accept[..., None]
    out = ChainState(
        np.where(m, new.z, z0),
        np.where(accept, new.base_lp, state.base_lp),
        np.where(accept, new.target_lp, state.target_lp),
        np.where(m, new.base_grad, state.base_grad),
        np.where(m, new.target_grad, state.target_grad),
    )
    return out, acc_prob


class PerfectKernel:
    """Exact draw from the intermediate distribution, independent of the current state.

    Continuous paths need Gaussian endpoints (every intermediate is then
    Gaussian); discrete paths sample the normalized intermediate table.
    """

    kind = "perfect"

    def __init__(self):
        self.stats = KernelStats()

    def sample(self, path: AnnealedPath, beta: float, x, shape_like, rng):
        rng = as_rng(rng)
        if path.discrete:
            probs = softmax(path.log_gamma_table(beta, x))
            probs = np.broadcast_to(probs, np.shape(shape_like) + probs.shape[-1:])
            return categorical_from_uniform(probs, rng.random(np.shape(shape_like)))
        prec, h = path.gaussian_natural(beta, x)
        zshape = np.shape(shape_like)
        h = np.broadcast_to(h, zshape)
        L = np.linalg.cholesky(prec)
        if L.ndim == 2:
            mean = np.linalg.solve(prec, h.reshape(-1, h.shape[-1]).T).T.reshape(zshape)
            eps = rng.standard_normal(zshape)
            noise = np.linalg.solve(L.T, eps.reshape(-1, zshape[-1]).T).T.reshape(zshape)
        else:
            L = np.broadcast_to(L, zshape[:-1] + L.shape[-2:])
            precb = np.broadcast_to(prec, zshape[:-1] + prec.shape[-2:])
            mean = np.linalg.solve(precb, h[..., None])[..., 0]
            eps = rng.standard_normal(zshape)
            noise = np.linalg.solve(np.swapaxes(L, -1, -2), eps[..., None])[..., 0]
        return mean + noise

    def step(self, path: AnnealedPath, t: int, x, state: ChainState, rng, beta=None, eps=None):
        beta = path.betas[t] if beta is None else beta
        z = self.sample(path, beta, x, state.z, rng)
        new = path.evaluate(x, z)
        acc = np.ones(np.shape(new.base_lp))
        self.stats.record(t, acc, 0)
        return new, acc

    def transition_matrix(self, path: AnnealedPath, t: int, x) -> np.ndarray:
        probs = softmax(path.log_gamma_table(path.betas[t], x))
        return np.broadcast_to(probs[..., None, :], probs.shape[:-1] + (probs.shape[-1],) * 2)


class DiscreteMetropolisKernel:
    """Metropolis kernel on a finite alphabet with a uniform proposal.

    Proposes z' uniformly (z' = z allowed) and accepts with probability
    min(1, g(z') / g(z)); reversible with respect to the intermediate g.
    """

    kind = "metropolis"

    def __init__(self):
        self.stats = KernelStats()

    def step(self, path: AnnealedPath, t: int, x, state: ChainState, rng, beta=None, eps=None):
        rng = as_rng(rng)
        beta = path.betas[t] if beta is None else beta
        z = np.asarray(state.z)
        table = path.log_gamma_table(beta, x)
        table = np.broadcast_to(table, z.shape + table.shape[-1:])
        nz = table.shape[-1]
        prop = np.minimum((rng.random(z.shape) * nz).astype(int), nz - 1)
        cur = np.take_along_axis(table, z[..., None], -1)[..., 0]
        new = np.take_along_axis(table, prop[..., None], -1)[..., 0]
        with np.errstate(invalid="ignore"):
            log_acc = new - cur
        u = rng.random(z.shape)
        accept = np.log(u) < log_acc
        acc_prob = np.exp(np.minimum(np.nan_to_num(log_acc, nan=-np.inf), 0.0))
        self.stats.record(t, acc_prob, 0)
        znew = np.where(accept, prop, z)
        return path.evaluate(x, znew), acc_prob

    def transition_matrix(self, path: AnnealedPath, t: int, x) -> np.ndarray:
        lg = path.log_gamma_table(path.betas[t], x)
        nz = lg.shape[-1]
        with np.errstate(invalid="ignore", over="ignore"):
            ratio = np.exp(np.minimum(lg[..., None, :] - lg[..., :, None], 0.0))
        M = ratio / nz
        idx = np.arange(nz)
        diag = 1.0 - (np.sum(M, axis=-1) - M[..., idx, idx])
        M[..., idx, idx] = diag
        return M


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

@dataclass
class ChainRecord:
    log_weight: np.ndarray
    increments: np.ndarray
    final: ChainState
    states: list | None = None
    accept: np.ndarray | None = None  # mean acceptance per kernel move
    divergences: int = 0

    @property
    def z_final(self):
        return self.final.z


def _uses_grad(kernel) -> bool:
    return kernel is not None and kernel.kind == "hmc"


def initial_state(path: AnnealedPath, kernel, x, z) -> ChainState:
    """Endpoint log-densities (and gradients when the kernel needs them) at z."""
    return path.evaluate(x, z, grad=_uses_grad(kernel))


def _check_kernel(path, kernel):
    if kernel is None and path.T > 1:
        raise ValueError("a transition kernel is required when T > 1")


def run_forward(path: AnnealedPath, kernel, x, z0=None, rng=None, record: bool = False,
                state: ChainState | None = None) -> ChainRecord:
    """Forward chains from initial states z0 ~ pi_0 (or a precomputed ``state``).

    Shapes of x and z0 broadcast, so (n, 1, ...) against (n, K, ...) runs K
    chains per x.
    """
    _check_kernel(path, kernel)
    rng = as_rng(rng)
    if state is None:
        state = initial_state(path, kernel, x, z0)
    logw = np.zeros(np.shape(state.base_lp))
    incs = np.empty((path.T,) + logw.shape)
    states = [state.z] if record else None
    acc = np.empty(max(path.T - 1, 0))
    div0 = kernel.stats.divergences if kernel is not None else 0
    for t in range(1, path.T + 1):
        inc = path.dbeta[t - 1] * state.log_ratio
        incs[t - 1] = inc
        logw = logw + inc
        if t < path.T:
            state, a = kernel.step(path, t, x, state, rng)
            acc[t - 1] = float(np.mean(a))
            if record:
                states.append(state.z)
    div = (kernel.stats.divergences - div0) if kernel is not None else 0
    return ChainRecord(logw, incs, state, states, acc, div)


def run_backward(path: AnnealedPath, kernel, x, z_T=None, rng=None, record: bool = False,
                 state: ChainState | None = None) -> ChainRecord:
    """Backward chains from states z_T drawn from the normalized target."""
    _check_kernel(path, kernel)
    rng = as_rng(rng)
    if state is None:
        state = initial_state(path, kernel, x, z_T)
    logw = np.zeros(np.shape(state.base_lp))
    incs = np.empty((path.T,) + logw.shape)
    states = [state.z] if record else None
    acc = np.empty(max(path.T - 1, 0))
    div0 = kernel.stats.divergences if kernel is not None else 0
    for t in range(path.T, 0, -1):
        inc = path.dbeta[t - 1] * state.log_ratio
        incs[t - 1] = inc
        logw = logw + inc
        if t > 1:
            state, a = kernel.step(path, t - 1, x, state, rng)
            acc[t - 2] = float(np.mean(a))
            if record:
                states.append(state.z)
    if record:
        states = states[::-1]  # states[t-1] is z_t
    div = (kernel.stats.divergences - div0) if kernel is not None else 0
    return ChainRecord(logw, incs, state, states, acc, div)


def _squeeze_chain_axis(rec: ChainRecord) -> ChainRecord:
    f = rec.final

    def sq(a):
        return None if a is None else np.asarray(a)[:, 0]

    final = ChainState(sq(f.z), sq(f.base_lp), sq(f.target_lp), sq(f.base_grad), sq(f.target_grad))
    states = None if rec.states is None else [sq(s) for s in rec.states]
    return ChainRecord(rec.log_weight[:, 0], rec.increments[:, :, 0], final, states, rec.accept,
                       rec.divergences)


def ais_forward(path: AnnealedPath, kernel, x, seed, record: bool = False) -> ChainRecord:
    """One forward chain per row of ``x``; E[log weight] <= log Z_T(x).

    Runs in the same (n, 1, ...) chain layout as the multi-chain estimators so
    that their K = 1 cases consume the random stream identically.
    """
    rng = as_rng(seed)
    x = np.asarray(x)
    z0 = path.base.sample_k(x, 1, rng)
    return _squeeze_chain_axis(run_forward(path, kernel, x[:, None], z0, rng, record))


def ais_backward(path: AnnealedPath, kernel, x, z_T, seed, record: bool = False) -> ChainRecord:
    """One backward chain per row of ``x`` from exact target draws ``z_T``; E[log weight] >= log Z_T(x)."""
    x = np.asarray(x)
    z_T = np.asarray(z_T)
    rec = run_backward(path, kernel, x[:, None], z_T[:, None], as_rng(seed), record)
    return _squeeze_chain_axis(rec)


def direct_log_weight(path: AnnealedPath, x, states) -> np.ndarray:
    """Log weight of a recorded trajectory z_1..z_T as a product of density ratios.

    log g_T(z_T) - log g_0(z_1) + sum_{t<T} [log g_t(z_t) - log g_t(z_{t+1})],
    with g_0 = pi_0 normalized.  Equal to the incremental sum by telescoping.
    """
    T = path.T
    out = path.log_gamma(T, x, states[T - 1]) - path.log_gamma(0, x, states[0])
    for t in range(1, T):
        out = out + path.log_gamma(t, x, states[t - 1]) - path.log_gamma(t, x, states[t])
    return out


# ---------------------------------------------------------------------------
# step-size adaptation
# ---------------------------------------------------------------------------

@dataclass
class AdaptationResult:
    kernel: HMCKernel
    step_sizes: np.ndarray
    accept_per_t: np.ndarray
    mean_accept: float
    in_band: bool


def adapt_step_size(kernel: HMCKernel, path: AnnealedPath, x, target_accept: float = 0.65,
                    warmup_iters: int = 3, seed=0, gain: float = 1.0, band=(0.55, 0.75),
                    max_step: float = 10.0) -> AdaptationResult:
    """Tune a per-t step-size schedule on warmup forward chains, then freeze it.

    Each warmup pass runs forward chains over the whole path; after the move at
    step t the step size for t is scaled by exp(gain * (accept - target)).  On
    the first pass the freshly tuned value is carried forward to t + 1.  A final
    pass with the frozen schedule measures the realized acceptance.
    """
    rng = as_rng(seed)
    T = path.T
    eps = np.full(T + 1, kernel.eps_at(1) if T > 1 else kernel.eps_at(0), dtype=float)
    if np.ndim(kernel.step_size):
        eps[:] = np.asarray(kernel.step_size, dtype=float)
    if T == 1:
        k = kernel.with_step_size(eps)
        return AdaptationResult(k, eps, np.array([]), float("nan"), True)
    lo = 1e-6
    for it in range(int(warmup_iters)):
        state = path.evaluate(x, path.base.sample(x, rng))
        for t in range(1, T):
            state, a = hmc_step(path, path.betas[t], eps[t], kernel.n_leapfrog, x, state, rng)
            eps[t] = float(np.clip(eps[t] * np.exp(gain * (float(np.mean(a)) - target_accept)), lo, max_step))
            if it == 0 and t + 1 < T:
                eps[t + 1] = eps[t]
    tuned = kernel.with_step_size(eps)
    state = path.evaluate(x, path.base.sample(x, rng))
    acc = np.empty(T - 1)
    for t in range(1, T):
        state, a = hmc_step(path, path.betas[t], eps[t], kernel.n_leapfrog, x, state, rng)
        acc[t - 1] = float(np.mean(a))
    mean_acc = float(np.mean(acc))
    if mean_acc < 0.01 or mean_acc > 0.999:
        warnings.warn(f"step-size tuning failed: post-warmup acceptance {mean_acc:.3f}",
                      RuntimeWarning, stacklevel=2)
    in_band = band[0] <= mean_acc <= band[1]
    return AdaptationResult(tuned, eps, acc, mean_acc, in_band)


# ---------------------------------------------------------------------------
# perfect transitions
# ---------------------------------------------------------------------------

@dataclass
class GapEstimate:
    gap: float
    std_error: float
    elbo: float
    eubo: float
    predicted: float | None
    sym_kl: float | None
    T: int
    n: int


def symmetrized_kl(path: AnnealedPath, x) -> np.ndarray:
    """KL[pi_T || pi_0] + KL[pi_0 || pi_T] per row of x, for Gaussian endpoints."""
    p0, h0 = path.gaussian_natural(0.0, x)
    p1, h1 = path.gaussian_natural(1.0, x)
    c0, c1 = np.linalg.inv(p0), np.linalg.inv(p1)
    m0 = np.einsum("...ij,...j->...i", c0, h0)
    m1 = np.einsum("...ij,...j->...i", c1, h1)
    return gaussian_kl(m1, c1, m0, c0) + gaussian_kl(m0, c0, m1, c1)


def perfect_transition_gap(path: AnnealedPath, x, n: int, seed) -> GapEstimate:
    """Measured E[EUBO_AIS] - E[ELBO_AIS] with exact intermediate draws.

    ``x`` is a single conditioning row of shape (obs_dim,); ``n`` independent forward and backward chains are run for it.
    Under a linear schedule the expected gap equals the symmetrized KL over T.
    """
    rng = as_rng(seed)
    kernel = PerfectKernel()
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x, (n,) + x.shape)
    path.gaussian_natural(0.0, xs[:1])  # raises UnsupportedPathError for non-Gaussian endpoints
    fwd = ais_forward(path, kernel, xs, rng)
    z_T = kernel.sample(path, 1.0, xs, fwd.final.z, rng)
    bwd = ais_backward(path, kernel, xs, z_T, rng)
    lo, lo_se = mean_and_se(fwd.log_weight)
    hi, hi_se = mean_and_se(bwd.log_weight)
    skl = float(np.mean(symmetrized_kl(path, xs[:1])))
    linear = np.allclose(np.diff(path.betas), 1.0 / path.T)
    return GapEstimate(hi - lo, float(np.hypot(lo_se, hi_se)), lo, hi,
                       skl / path.T if linear else None, skl, path.T, n)


def default_kernel(model_or_path, step_size=0.05, n_leapfrog: int = 20):
    """HMC for continuous latents, uniform-proposal Metropolis for discrete ones."""
    discrete = getattr(model_or_path, "discrete", False)
    if discrete:
        return DiscreteMetropolisKernel()
    return HMCKernel(step_size, n_leapfrog)


def kernel_from_name(name: str, discrete: bool, step_size=0.05, n_leapfrog: int = 20):
    name = name.lower()
    if name == "perfect":
        return PerfectKernel()
    if name == "hmc":
        if discrete:
            raise ValueError("HMC needs a continuous latent; use 'metropolis' or 'perfect'")
        return HMCKernel(step_size, n_leapfrog)
    if name == "metropolis":
        if not discrete:
            raise ValueError("the Metropolis kernel is for discrete latents")
        return DiscreteMetropolisKernel()
    raise ValueError(f"unknown kernel {name!r}; expected hmc, perfect or metropolis")


def require_posterior(model: JointModel, what: str) -> None:
    model.require(Capability.EXACT_POSTERIOR_SAMPLE, what=what)
