"""Joint distributions p(x, z) consumed by every estimator.

Continuous models take ``x`` with shape ``(..., obs_dim)`` and ``z`` with shape
``(..., latent_dim)``; leading axes broadcast.  ``DiscreteJoint`` uses integer
symbol arrays of any shape for both.
"""

from __future__ import annotations

import enum
from typing import Any

import numpy as np

from ._numerics import as_rng, categorical_from_uniform

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_ALPHABET = 64


class Capability(enum.Flag):
    NONE = 0
    SAMPLE_JOINT = enum.auto()
    LOGP_PRIOR = enum.auto()
    LOGP_LIKELIHOOD = enum.auto()
    EXACT_POSTERIOR_SAMPLE = enum.auto()
    ANALYTIC_MI = enum.auto()
    ENUMERABLE = enum.auto()


class UnsupportedCapabilityError(RuntimeError):
    """Raised when an estimator needs something the model cannot provide."""


class DomainError(ValueError):
    """Raised for non-finite or out-of-support inputs."""


class JointModel:
    """Base class: subclasses fill in densities and samplers."""

    latent_dim: int
    obs_dim: int
    capabilities: Capability = Capability.NONE
    discrete: bool = False

    def has(self, cap: Capability) -> bool:
        return bool(self.capabilities & cap)

    def require(self, *caps: Capability, what: str = "this operation") -> None:
        for cap in caps:
            if not self.has(cap):
                raise UnsupportedCapabilityError(
                    f"{type(self).__name__} lacks {cap.name}, required by {what}"
                )

    # densities -------------------------------------------------------
    def log_prior(self, z):
        raise NotImplementedError

    def log_likelihood(self, x, z):
        raise NotImplementedError

    def log_joint(self, x, z):
        # one code path: the chain rule is never re-derived elsewhere
        return self.log_prior(z) + self.log_likelihood(x, z)

    # samplers --------------------------------------------------------
    def sample_prior(self, shape, rng):
        raise NotImplementedError

    def sample_joint(self, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def sample_posterior(self, x, seed):
        """One exact posterior draw per entry of the batch ``x``."""
        raise NotImplementedError

    # analytic quantities ---------------------------------------------
    def analytic_mi(self) -> float:
        raise NotImplementedError

    def log_evidence(self, x):
        raise NotImplementedError

    def expand_x(self, x, k: int):
        """Insert a sample axis after the batch axis: (n, ...) -> (n, k, ...)."""
        x = np.asarray(x)
        if self.discrete:
            return np.broadcast_to(x[:, None], (x.shape[0], k))
        return np.broadcast_to(x[:, None, :], (x.shape[0], k, x.shape[-1]))

    def metadata(self) -> dict[str, Any]:
        return {"kind": type(self).__name__}


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise DomainError("non-finite input")


class LinearGaussianVAE(JointModel):
    """z ~ N(0, I), x | z ~ N(Wz + b, obs_std^2 I)."""

    discrete = False
    capabilities = (
        Capability.SAMPLE_JOINT
        | Capability.LOGP_PRIOR
        | Capability.LOGP_LIKELIHOOD
        | Capability.EXACT_POSTERIOR_SAMPLE
        | Capability.ANALYTIC_MI
    )

    def __init__(self, W, b=None, obs_std: float = 1.0, seed: int | None = None):
        W = np.array(W, dtype=float)
        if W.ndim != 2:
            raise ValueError("W must be obs_dim x latent_dim")
        if obs_std <= 0:
            raise ValueError("obs_std must be positive")
        self.W = W
        self.obs_dim, self.latent_dim = W.shape
        self.b = np.zeros(self.obs_dim) if b is None else np.array(b, dtype=float)
        self.obs_std = float(obs_std)
        self.seed = seed
        var = self.obs_std**2
        self._inv_var = 1.0 / var
        self._precision = np.eye(self.latent_dim) + W.T @ W / var
        self._post_cov = np.linalg.inv(self._precision)
        self._post_cov = 0.5 * (self._post_cov + self._post_cov.T)
        self._post_chol = np.linalg.cholesky(self._post_cov)
        self._logdet_precision = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(self._precision))))
        for a in (self.W, self.b, self._post_cov, self._post_chol, self._precision):
            a.setflags(write=False)

    @classmethod
    def random(cls, latent_dim: int, obs_dim: int, seed: int, obs_std: float = 1.0,
               weight_std: float = 1.0) -> "LinearGaussianVAE":
        rng = np.random.default_rng(seed)
        W = weight_std * rng.standard_normal((obs_dim, latent_dim))
        return cls(W, np.zeros(obs_dim), obs_std=obs_std, seed=seed)

    def log_prior(self, z):
        z = np.asarray(z, dtype=float)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.latent_dim * LOG_2PI

    def _residual(self, x, z):
        return np.asarray(x, dtype=float) - (np.asarray(z, dtype=float) @ self.W.T + self.b)

    def _log_likelihood_from_residual(self, r):
        return (-0.5 * self._inv_var * np.sum(r * r, axis=-1)
                - 0.5 * self.obs_dim * (LOG_2PI + np.log(self.obs_std**2)))

    def log_likelihood(self, x, z):
        return self._log_likelihood_from_residual(self._residual(x, z))

    def grad_z_log_prior(self, z):
        return -np.asarray(z, dtype=float)

    def grad_z_log_likelihood(self, x, z):
        return self._inv_var * (self._residual(x, z) @ self.W)

    def log_joint_and_grad(self, x, z):
        # same expressions as log_prior + log_likelihood, so values agree bitwise
        z = np.asarray(z, dtype=float)
        r = self._residual(x, z)
        lp = self.log_prior(z) + self._log_likelihood_from_residual(r)
        return lp, -z + self._inv_var * (r @ self.W)

    def sample_prior(self, shape, rng):
        return as_rng(rng).standard_normal(tuple(shape) + (self.latent_dim,))

    def sample_joint(self, n, seed):
        rng = as_rng(seed)
        z = rng.standard_normal((n, self.latent_dim))
        x = z @ self.W.T + self.b + self.obs_std * rng.standard_normal((n, self.obs_dim))
        return x, z

    def posterior_mean(self, x):
        return (self._inv_var * (np.asarray(x, dtype=float) - self.b) @ self.W) @ self._post_cov

    @property
    def posterior_cov(self) -> np.ndarray:
        return self._post_cov

    def sample_posterior(self, x, seed):
        rng = as_rng(seed)
        mean = self.posterior_mean(x)
        eps = rng.standard_normal(mean.shape)
        return mean + eps @ self._post_chol.T

    def gaussian_natural(self, x):
        """(precision, shift) of the unnormalized joint as a Gaussian in z."""
        h = self._inv_var * (np.asarray(x, dtype=float) - self.b) @ self.W
        return self._precision, h

    def log_evidence(self, x):
        r = np.asarray(x, dtype=float) - self.b
        u = self._inv_var * (r @ self.W)
        quad = self._inv_var * np.sum(r * r, axis=-1) - np.sum((u @ self._post_cov) * u, axis=-1)
        logdet = self.obs_dim * np.log(self.obs_std**2) + self._logdet_precision
        return -0.5 * (quad + logdet + self.obs_dim * LOG_2PI)

    def marginal_cov(self) -> np.ndarray:
        return self.obs_std**2 * np.eye(self.obs_dim) + self.W @ self.W.T

    def expected_log_likelihood(self) -> float:
        """E_{p(x,z)} log p(x|z), i.e. minus the conditional entropy H(x|z)."""
        return -0.5 * self.obs_dim * (LOG_2PI + np.log(self.obs_std**2) + 1.0)

    def analytic_mi(self) -> float:
        eig = np.linalg.eigvalsh(self.W.T @ self.W) / self.obs_std**2
        return float(0.5 * np.sum(np.log1p(np.maximum(eig, 0.0))))

    def metadata(self):
        return {"kind": "linear_gaussian", "latent_dim": self.latent_dim, "obs_dim": self.obs_dim,
                "obs_std": self.obs_std, "seed": self.seed}


class DiscreteJoint(JointModel):
    """Joint probability table over finite alphabets, rows indexed by x."""

    discrete = True
    capabilities = (
        Capability.SAMPLE_JOINT
        | Capability.LOGP_PRIOR
        | Capability.LOGP_LIKELIHOOD
        | Capability.EXACT_POSTERIOR_SAMPLE
        | Capability.ANALYTIC_MI
        | Capability.ENUMERABLE
    )

    def __init__(self, table):
        table = np.array(table, dtype=float)
        if table.ndim != 2:
            raise ValueError("table must be 2-D (x rows, z columns)")
        if np.any(table < 0) or not np.all(np.isfinite(table)):
            raise ValueError("table entries must be finite and non-negative")
        total = table.sum()
        if not np.isclose(total, 1.0, rtol=0, atol=1e-9):
            raise ValueError(f"table must sum to 1, got {total!r}")
        if max(table.shape) > MAX_ALPHABET:
            raise ValueError(f"alphabets are limited to {MAX_ALPHABET} symbols")
        self.table = table / total
        self.nx, self.nz = table.shape
        self.obs_dim = self.latent_dim = 1
        self.px = self.table.sum(axis=1)
        self.pz = self.table.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lik = np.where(self.pz > 0, self.table / self.pz, 1.0 / self.nx)
            post = np.where(self.px[:, None] > 0, self.table / self.px[:, None], 1.0 / self.nz)
            self.log_table = np.log(self.table)
            self.log_pz = np.log(self.pz)
            self.log_px = np.log(self.px)
            self.log_lik_table = np.log(lik)
        self.lik_table = lik
        self.post_table = post
        for a in (self.table, self.px, self.pz, self.lik_table, self.post_table,
                  self.log_table, self.log_pz, self.log_px, self.log_lik_table):
            a.setflags(write=False)

    @classmethod
    def random(cls, nx: int, nz: int, seed, concentration: float = 1.0) -> "DiscreteJoint":
        rng = as_rng(seed)
        t = rng.dirichlet(np.full(nx * nz, concentration)).reshape(nx, nz)
        t = np.maximum(t, 1e-12)
        return cls(t / t.sum())

    def log_prior(self, z):
        return self.log_pz[np.asarray(z)]

    def log_likelihood(self, x, z):
        return self.log_lik_table[np.asarray(x), np.asarray(z)]

    def sample_prior(self, shape, rng):
        return categorical_from_uniform(self.pz, as_rng(rng).random(tuple(shape)))

    def sample_joint(self, n, seed):
        rng = as_rng(seed)
        flat = categorical_from_uniform(self.table.ravel(), rng.random(n))
        return flat // self.nz, flat % self.nz

    def sample_posterior(self, x, seed):
        rng = as_rng(seed)
        x = np.asarray(x)
        return categorical_from_uniform(self.post_table[x], rng.random(x.shape))

    def log_evidence(self, x):
        return self.log_px[np.asarray(x)]

    def log_prior_table(self, x):
        """log p(z) for every symbol, broadcast over the batch of x."""
        x = np.asarray(x)
        return np.broadcast_to(self.log_pz, x.shape + (self.nz,))

    def log_joint_table(self, x):
        return self.log_table[np.asarray(x)]

    def expected_log_likelihood(self) -> float:
        mask = self.table > 0
        return float(np.sum(self.table[mask] * self.log_lik_table[mask]))

    def mutual_information(self) -> float:
        """Direct sum of p log p / (p(x) p(z))."""
        mask = self.table > 0
        ratio = self.table / np.outer(self.px, self.pz)
        return float(np.sum(self.table[mask] * np.log(ratio[mask])))

    def analytic_mi(self) -> float:
        def entropy(p):
            p = p[p > 0]
            return -float(np.sum(p * np.log(p)))

        return entropy(self.px) + entropy(self.pz) - entropy(self.table.ravel())

    def expand_x(self, x, k):
        x = np.asarray(x)
        return np.broadcast_to(x[:, None], (x.shape[0], k))

    def metadata(self):
        return {"kind": "discrete", "nx": self.nx, "nz": self.nz}


class GaussianMixturePosteriorModel(JointModel):
    """Mixture-of-Gaussians prior in a 1-D or 2-D latent with a linear Gaussian decoder.

    The posterior is again a Gaussian mixture, so it is sampled exactly, but it
    is multi-modal whenever the components are separated, which leaves a
    diagonal Gaussian q with a strictly positive BA gap.
    """

    discrete = False
    capabilities = (
        Capability.SAMPLE_JOINT
        | Capability.LOGP_PRIOR
        | Capability.LOGP_LIKELIHOOD
        | Capability.EXACT_POSTERIOR_SAMPLE
    )

    def __init__(self, weights, means, stds, A, b=None, obs_std: float = 1.0):
        self.weights = np.array(weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.means = np.atleast_2d(np.array(means, dtype=float))
        self.stds = np.atleast_2d(np.array(stds, dtype=float))
        self.A = np.atleast_2d(np.array(A, dtype=float))
        m, d = self.means.shape
        if d not in (1, 2):
            raise ValueError("latent dimension must be 1 or 2")
        if self.stds.shape != (m, d) or self.weights.shape != (m,):
            raise ValueError("weights/means/stds shapes disagree")
        if self.A.shape[1] != d:
            raise ValueError("A must be obs_dim x latent_dim")
        self.latent_dim = d
        self.obs_dim = self.A.shape[0]
        self.n_components = m
        self.b = np.zeros(self.obs_dim) if b is None else np.array(b, dtype=float)
        self.obs_std = float(obs_std)
        var = self.obs_std**2
        # per-component posterior precision, covariance and evidence covariance
        self._prec = np.stack([np.diag(1.0 / s**2) + self.A.T @ self.A / var for s in self.stds])
        self._cov = np.linalg.inv(self._prec)
        self._chol = np.linalg.cholesky(self._cov)
        ev = np.stack([var * np.eye(self.obs_dim) + self.A @ np.diag(s**2) @ self.A.T for s in self.stds])
        self._ev_inv = np.linalg.inv(ev)
        self._ev_logdet = np.linalg.slogdet(ev)[1]

    @classmethod
    def default(cls, separation: float = 2.0, obs_dim: int = 1) -> "GaussianMixturePosteriorModel":
        """Two 2-D components that a 1-D observation cannot tell apart."""
        means = [[separation, -separation], [-separation, separation]]
        stds = [[0.5, 0.5], [0.5, 0.5]]
        A = np.ones((obs_dim, 2))
        return cls([0.5, 0.5], means, stds, A, obs_std=0.5)

    def _component_logpdf(self, z):
        z = np.asarray(z, dtype=float)[..., None, :]
        d = (z - self.means) / self.stds
        return (-0.5 * np.sum(d * d, axis=-1) - np.sum(np.log(self.stds), axis=-1)
                - 0.5 * self.latent_dim * LOG_2PI)

    def log_prior(self, z):
        a = self._component_logpdf(z) + np.log(self.weights)
        m = np.max(a, axis=-1, keepdims=True)
        return np.log(np.sum(np.exp(a - m), axis=-1)) + m[..., 0]

    def grad_z_log_prior(self, z):
        z = np.asarray(z, dtype=float)
        a = self._component_logpdf(z) + np.log(self.weights)
        r = np.exp(a - np.max(a, axis=-1, keepdims=True))
        r = r / np.sum(r, axis=-1, keepdims=True)
        g = -(z[..., None, :] - self.means) / self.stds**2
        return np.sum(r[..., None] * g, axis=-2)

    def log_likelihood(self, x, z):
        r = np.asarray(x, dtype=float) - (np.asarray(z, dtype=float) @ self.A.T + self.b)
        return (-0.5 * np.sum(r * r, axis=-1) / self.obs_std**2
                - 0.5 * self.obs_dim * (LOG_2PI + np.log(self.obs_std**2)))

    def grad_z_log_likelihood(self, x, z):
        r = np.asarray(x, dtype=float) - (np.asarray(z, dtype=float) @ self.A.T + self.b)
        return (r @ self.A) / self.obs_std**2

    def log_joint_and_grad(self, x, z):
        return (self.log_prior(z) + self.log_likelihood(x, z),
                self.grad_z_log_prior(z) + self.grad_z_log_likelihood(x, z))

    def sample_prior(self, shape, rng):
        rng = as_rng(rng)
        shape = tuple(shape)
        comp = categorical_from_uniform(self.weights, rng.random(shape))
        eps = rng.standard_normal(shape + (self.latent_dim,))
        return self.means[comp] + self.stds[comp] * eps

    def sample_joint(self, n, seed):
        rng = as_rng(seed)
        z = self.sample_prior((n,), rng)
        x = z @ self.A.T + self.b + self.obs_std * rng.standard_normal((n, self.obs_dim))
        return x, z

    def _component_evidence(self, x):
        x = np.asarray(x, dtype=float)[..., None, :]
        r = x - (self.means @ self.A.T + self.b)
        quad = np.einsum("...mi,mij,...mj->...m", r, self._ev_inv, r)
        return -0.5 * (quad + self._ev_logdet + self.obs_dim * LOG_2PI)

    def posterior_responsibilities(self, x):
        a = self._component_evidence(x) + np.log(self.weights)
        a = a - np.max(a, axis=-1, keepdims=True)
        r = np.exp(a)
        return r / np.sum(r, axis=-1, keepdims=True)

    def log_evidence(self, x):
        a = self._component_evidence(x) + np.log(self.weights)
        m = np.max(a, axis=-1, keepdims=True)
        return np.log(np.sum(np.exp(a - m), axis=-1)) + m[..., 0]

    def sample_posterior(self, x, seed):
        rng = as_rng(seed)
        x = np.asarray(x, dtype=float)
        resp = self.posterior_responsibilities(x)
        comp = categorical_from_uniform(resp, rng.random(x.shape[:-1]))
        h = (x - self.b) @ self.A / self.obs_std**2  # (..., d)
        shift = h[..., None, :] + self.means / self.stds**2  # (..., m, d)
        mean_all = np.einsum("mij,...mj->...mi", self._cov, shift)
        mean = np.take_along_axis(mean_all, comp[..., None, None], axis=-2)[..., 0, :]
        eps = rng.standard_normal(mean.shape)
        return mean + np.einsum("...ij,...j->...i", self._chol[comp], eps)

    def expected_log_likelihood(self) -> float:
        return -0.5 * self.obs_dim * (LOG_2PI + np.log(self.obs_std**2) + 1.0)

    def metadata(self):
        return {"kind": "gaussian_mixture", "latent_dim": self.latent_dim,
                "obs_dim": self.obs_dim, "components": self.n_components}


# module-level operations ------------------------------------------------

def sample_joint(model: JointModel, n: int, seed):
    model.require(Capability.SAMPLE_JOINT, what="sample_joint")
    return model.sample_joint(n, seed)


def analytic_mi(model: JointModel) -> float:
    if not (model.has(Capability.ANALYTIC_MI) or model.has(Capability.ENUMERABLE)):
        raise UnsupportedCapabilityError(f"{type(model).__name__} has no analytic MI")
    return model.analytic_mi()


def log_prior(model: JointModel, z):
    model.require(Capability.LOGP_PRIOR, what="log_prior")
    if not model.discrete:
        _check_finite(z)
    return model.log_prior(z)


def log_likelihood(model: JointModel, x, z):
    model.require(Capability.LOGP_LIKELIHOOD, what="log_likelihood")
    if not model.discrete:
        _check_finite(x, z)
    return model.log_likelihood(x, z)


def sample_posterior(model: JointModel, x, n: int, seed):
    """``n`` exact posterior draws for each row of ``x``, shape (len(x), n, ...)."""
    model.require(Capability.EXACT_POSTERIOR_SAMPLE, what="sample_posterior")
    if not model.discrete:
        _check_finite(x)
    return model.sample_posterior(model.expand_x(x, n), seed)


MODEL_KINDS = ("linear_gaussian", "linear_vae", "discrete", "gaussian_mixture")


def model_from_config(cfg: dict) -> JointModel:
    """Build a model from a plain mapping (as loaded from a config file).

    ``disable: [exact_posterior_sample, ...]`` withholds capabilities from the
    instance, to exercise the paths taken for models that lack them.
    """
    model = _build_model(cfg)
    for name in cfg.get("disable", []) or []:
        try:
            cap = Capability[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown capability {name!r} in 'disable'") from None
        model.capabilities = model.capabilities & ~cap
    return model


def _build_model(cfg: dict) -> JointModel:
    kind = cfg.get("kind")
    if kind in ("linear_gaussian", "linear_vae"):
        return LinearGaussianVAE.random(
            int(cfg.get("latent_dim", 10)), int(cfg.get("obs_dim", 100)),
            seed=int(cfg.get("seed", 0)), obs_std=float(cfg.get("obs_std", 1.0)),
            weight_std=float(cfg.get("weight_std", 1.0)))
    if kind == "discrete":
        if "table" in cfg:
            rows = cfg["table"]
            return DiscreteJoint(np.array(rows, dtype=float))
        return DiscreteJoint.random(int(cfg["nx"]), int(cfg["nz"]), seed=int(cfg.get("seed", 0)),
                                    concentration=float(cfg.get("concentration", 1.0)))
    if kind == "gaussian_mixture":
        if "means" in cfg:
            return GaussianMixturePosteriorModel(cfg["weights"], cfg["means"], cfg["stds"],
                                                 cfg["A"], cfg.get("b"), float(cfg.get("obs_std", 1.0)))
        return GaussianMixturePosteriorModel.default(float(cfg.get("separation", 2.0)),
                                                     int(cfg.get("obs_dim", 1)))
    raise ValueError(
        f"unknown model kind {kind!r}; expected one of linear_gaussian, discrete, gaussian_mixture")
