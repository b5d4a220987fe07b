"""Variational proposals q(z|x), critics T(x, z), Adam, and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from ._numerics import as_rng, categorical_from_uniform
from .models import LOG_2PI, DiscreteJoint, JointModel

CHECKPOINT_FORMAT = "mibounds-params"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Input shapes disagree with the declared dimensions."""


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

class ConditionalGaussian:
    """Diagonal Gaussian q(z|x) with an affine or two-layer ReLU encoder.

    Parameters live in one flat vector ``params``; the encoder maps x to
    ``(mean, log_std)``.  With all parameters zero the affine encoder outputs
    (0, 0), which is the standard-normal prior.
    """

    discrete = False

    def __init__(self, obs_dim: int, latent_dim: int, encoder: str = "affine",
                 hidden: int = 64, params=None, seed: int | None = 0, init_scale: float = 1.0):
        if encoder not in ("affine", "mlp"):
            raise ValueError("encoder must be 'affine' or 'mlp'")
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.encoder = encoder
        self.hidden = int(hidden)
        self.seed = seed
        self._layout = self._make_layout()
        size = sum(int(np.prod(s)) for _, s in self._layout)
        if params is None:
            params = self._init(size, seed, init_scale)
        params = np.array(params, dtype=float)
        if params.shape != (size,):
            raise DimensionError(f"expected {size} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def standard(cls, obs_dim: int, latent_dim: int) -> "ConditionalGaussian":
        """q(z|x) = N(0, I) for every x."""
        q = cls(obs_dim, latent_dim, "affine", seed=None)
        q.params = np.zeros_like(q.params)
        return q

    def _make_layout(self):
        d, k = self.obs_dim, self.latent_dim
        if self.encoder == "affine":
            return [("W", (d, 2 * k)), ("b", (2 * k,))]
        h = self.hidden
        return [("W1", (d, h)), ("b1", (h,)), ("W2", (h, h)), ("b2", (h,)),
                ("W3", (h, 2 * k)), ("b3", (2 * k,))]

    def _init(self, size, seed, scale):
        if seed is None:
            return np.zeros(size)
        rng = np.random.default_rng(seed)
        chunks = []
        fan_in = self.obs_dim
        for name, shape in self._layout:
            if name.startswith("W"):
                fan_in = shape[0]
            bound = scale / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, int(np.prod(shape))))
        p = np.concatenate(chunks)
        if self.encoder == "affine":
            p[:] = 0.0  # start at the prior
        return p

    def unpack(self, params=None) -> dict[str, np.ndarray]:
        p = self.params if params is None else params
        out, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = p[i:i + n].reshape(shape)
            i += n
        return out

    def mean_log_std(self, x, params=None):
        w = self.unpack(params)
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.obs_dim:
            raise DimensionError(f"x has last dim {x.shape[-1]}, expected {self.obs_dim}")
        if self.encoder == "affine":
            out = x @ w["W"] + w["b"]
        else:
            h = np.maximum(x @ w["W1"] + w["b1"], 0.0)
            h = np.maximum(h @ w["W2"] + w["b2"], 0.0)
            out = h @ w["W3"] + w["b3"]
        k = self.latent_dim
        return out[..., :k], out[..., k:]

    def mean_log_std_ad(self, x, p):
        """Differentiable encoder output for a tape variable ``p``."""
        segs, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            segs[name] = ad.reshape(p[i:i + n], shape)
            i += n
        x = np.asarray(x, dtype=float)
        if self.encoder == "affine":
            out = ad.matmul(x, segs["W"]) + segs["b"]
        else:
            h = ad.relu(ad.matmul(x, segs["W1"]) + segs["b1"])
            h = ad.relu(ad.matmul(h, segs["W2"]) + segs["b2"])
            out = ad.matmul(h, segs["W3"]) + segs["b3"]
        k = self.latent_dim
        return out[..., :k], out[..., k:]

    def log_prob(self, x, z):
        mean, log_std = self.mean_log_std(x)
        z = np.asarray(z, dtype=float)
        d = (z - mean) * np.exp(-log_std)
        return np.sum(-0.5 * d * d - log_std, axis=-1) - 0.5 * self.latent_dim * LOG_2PI

    def log_prob_ad(self, x, z, p):
        """log q(z|x) with parameters ``p`` (tape var); ``z`` may also be a tape var."""
        mean, log_std = self.mean_log_std_ad(x, p)
        d = (z - mean) * ad.exp(-log_std)
        return ad.sum(-0.5 * ad.square(d) - log_std, axis=-1) - 0.5 * self.latent_dim * LOG_2PI

    def grad_z_log_prob(self, x, z):
        mean, log_std = self.mean_log_std(x)
        return -(np.asarray(z, dtype=float) - mean) * np.exp(-2.0 * log_std)

    def log_prob_and_grad(self, x, z):
        mean, log_std = self.mean_log_std(x)
        z = np.asarray(z, dtype=float)
        d = (z - mean) * np.exp(-log_std)  # as in log_prob, so values agree bitwise
        lp = np.sum(-0.5 * d * d - log_std, axis=-1) - 0.5 * self.latent_dim * LOG_2PI
        return lp, -(z - mean) * np.exp(-2.0 * log_std)

    def sample(self, x, rng):
        z, _ = self.sample_with_noise(x, rng)
        return z

    def sample_with_noise(self, x, rng):
        mean, log_std = self.mean_log_std(x)
        eps = as_rng(rng).standard_normal(mean.shape)
        return mean + np.exp(log_std) * eps, eps

    def sample_k(self, x, k: int, rng):
        """``k`` draws per row of ``x``; the encoder runs once per row."""
        mean, log_std = self.mean_log_std(x)
        eps = as_rng(rng).standard_normal(mean.shape[:-1] + (k, self.latent_dim))
        return mean[..., None, :] + np.exp(log_std)[..., None, :] * eps

    def gaussian_natural(self, x):
        mean, log_std = self.mean_log_std(x)
        inv_var = np.exp(-2.0 * log_std)
        prec = inv_var[..., :, None] * np.eye(self.latent_dim)
        return prec, mean * inv_var

    def arch(self) -> dict:
        return {"type": "ConditionalGaussian", "obs_dim": self.obs_dim,
                "latent_dim": self.latent_dim, "encoder": self.encoder, "hidden": self.hidden,
                "seed": self.seed}


class PriorProposal:
    """q(z|x) = p(z), taken from the model itself."""

    def __init__(self, model: JointModel):
        self.model = model
        self.discrete = model.discrete
        self.latent_dim = model.latent_dim

    def log_prob(self, x, z):
        return self.model.log_prior(z)

    def sample(self, x, rng):
        x = np.asarray(x)
        shape = x.shape if self.discrete else x.shape[:-1]
        return self.model.sample_prior(shape, rng)

    def sample_k(self, x, k: int, rng):
        x = np.asarray(x)
        shape = x.shape if self.discrete else x.shape[:-1]
        return self.model.sample_prior(tuple(shape) + (k,), rng)

    def log_prob_and_grad(self, x, z):
        return self.model.log_prior(z), self.model.grad_z_log_prior(z)

    def grad_z_log_prob(self, x, z):
        return self.model.grad_z_log_prior(z)

    def log_prob_table(self, x):
        return self.model.log_prior_table(x)

    def gaussian_natural(self, x):
        if not hasattr(self.model, "gaussian_natural"):
            raise NotImplementedError("prior is not Gaussian")
        x = np.asarray(x)
        d = self.latent_dim
        return np.eye(d), np.zeros(x.shape[:-1] + (d,))

    def arch(self):
        return {"type": "PriorProposal"}


class TableProposal:
    """q(z|x) given by a row-stochastic table over a discrete alphabet."""

    discrete = True

    def __init__(self, table):
        t = np.array(table, dtype=float)
        if t.ndim != 2 or np.any(t < 0):
            raise ValueError("q table must be a non-negative 2-D array")
        self.table = t / t.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            self.log_table = np.log(self.table)
        self.nx, self.nz = t.shape

    @classmethod
    def random(cls, nx: int, nz: int, seed, concentration: float = 1.0) -> "TableProposal":
        rng = as_rng(seed)
        return cls(rng.dirichlet(np.full(nz, concentration), size=nx))

    @classmethod
    def prior(cls, model: DiscreteJoint) -> "TableProposal":
        return cls(np.tile(model.pz, (model.nx, 1)))

    @classmethod
    def posterior(cls, model: DiscreteJoint) -> "TableProposal":
        return cls(model.post_table)

    def log_prob(self, x, z):
        return self.log_table[np.asarray(x), np.asarray(z)]

    def sample(self, x, rng):
        x = np.asarray(x)
        return categorical_from_uniform(self.table[x], as_rng(rng).random(x.shape))

    def sample_k(self, x, k: int, rng):
        x = np.asarray(x)
        return categorical_from_uniform(self.table[x][..., None, :], as_rng(rng).random(x.shape + (k,)))

    def log_prob_table(self, x):
        return self.log_table[np.asarray(x)]

    def arch(self):
        return {"type": "TableProposal", "nx": self.nx, "nz": self.nz}


# ---------------------------------------------------------------------------
# critics
# ---------------------------------------------------------------------------

class Critic:
    """ReLU MLP on the concatenation (x, z) returning a scalar per pair."""

    discrete = False

    def __init__(self, obs_dim: int, latent_dim: int, hidden=(256, 256), params=None,
                 seed: int | None = 0):
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = seed
        sizes = (self.obs_dim + self.latent_dim,) + self.hidden + (1,)
        self._layout = []
        for i in range(len(sizes) - 1):
            self._layout.append((f"W{i}", (sizes[i], sizes[i + 1])))
            self._layout.append((f"b{i}", (sizes[i + 1],)))
        size = sum(int(np.prod(s)) for _, s in self._layout)
        if params is None:
            params = self._init(seed)
        params = np.array(params, dtype=float)
        if params.shape != (size,):
            raise DimensionError(f"expected {size} critic parameters, got {params.shape}")
        self.params = params

    def _init(self, seed):
        # scaled-uniform fan-in initialization
        rng = np.random.default_rng(seed)
        chunks = []
        fan_in = None
        for name, shape in self._layout:
            if name.startswith("W"):
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, int(np.prod(shape))))
        return np.concatenate(chunks)

    @classmethod
    def constant(cls, obs_dim: int, latent_dim: int, c: float = 0.0, hidden=(256, 256),
                 seed: int | None = 0) -> "Critic":
        """Critic whose last layer is zeroed so T(x, z) = c everywhere."""
        crit = cls(obs_dim, latent_dim, hidden, seed=seed)
        w = crit.unpack()
        last = len(crit.hidden)
        w[f"W{last}"][...] = 0.0
        w[f"b{last}"][...] = c
        return crit

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.unpack()[f"W{len(self.hidden)}"] == 0.0))

    def unpack(self, params=None):
        p = self.params if params is None else params
        out, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = p[i:i + n].reshape(shape)
            i += n
        return out

    def _check(self, x, z):
        if np.shape(x)[-1] != self.obs_dim or np.shape(z)[-1] != self.latent_dim:
            raise DimensionError(
                f"critic expects x[..., {self.obs_dim}] and z[..., {self.latent_dim}], "
                f"got {np.shape(x)} and {np.shape(z)}")

    def __call__(self, x, z, params=None):
        self._check(x, z)
        w = self.unpack(params)
        W0 = w["W0"]
        h = (np.asarray(x, dtype=float) @ W0[: self.obs_dim]
             + np.asarray(z, dtype=float) @ W0[self.obs_dim:] + w["b0"])
        for i in range(1, len(self.hidden) + 1):
            h = np.maximum(h, 0.0) @ w[f"W{i}"] + w[f"b{i}"]
        return h[..., 0]

    def value_and_grad_z(self, x, z):
        """T(x, z) and dT/dz by an explicit backward pass through the MLP."""
        self._check(x, z)
        w = self.unpack()
        W0 = w["W0"]
        pre = [np.asarray(x, dtype=float) @ W0[: self.obs_dim]
               + np.asarray(z, dtype=float) @ W0[self.obs_dim:] + w["b0"]]
        n_hidden = len(self.hidden)
        for i in range(1, n_hidden + 1):
            pre.append(np.maximum(pre[-1], 0.0) @ w[f"W{i}"] + w[f"b{i}"])
        value = pre[-1][..., 0]
        g = np.broadcast_to(w[f"W{n_hidden}"][:, 0], pre[n_hidden - 1].shape) * (pre[n_hidden - 1] > 0)
        for i in range(n_hidden - 1, 0, -1):
            g = (g @ w[f"W{i}"].T) * (pre[i - 1] > 0)
        return value, g @ W0[self.obs_dim:].T

    def ad_call(self, x, z, p):
        """Differentiable T(x, z) with parameters ``p`` (tape var)."""
        self._check(x, z)
        segs, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            segs[name] = ad.reshape(p[i:i + n], shape)
            i += n
        W0 = segs["W0"]
        h = (ad.matmul(np.asarray(x, dtype=float), W0[: self.obs_dim])
             + ad.matmul(z, W0[self.obs_dim:]) + segs["b0"])
        for j in range(1, len(self.hidden) + 1):
            h = ad.matmul(ad.relu(h), segs[f"W{j}"]) + segs[f"b{j}"]
        return h[..., 0]

    def arch(self) -> dict:
        return {"type": "Critic", "obs_dim": self.obs_dim, "latent_dim": self.latent_dim,
                "hidden": list(self.hidden), "seed": self.seed}


class TableCritic:
    """T(x, z) = table[x, z] on discrete alphabets; the table is the parameter vector."""

    discrete = True

    def __init__(self, table):
        self.table = np.array(table, dtype=float)
        if self.table.ndim != 2:
            raise ValueError("critic table must be 2-D")
        self.nx, self.nz = self.table.shape

    @property
    def params(self):
        return self.table.ravel()

    @params.setter
    def params(self, value):
        self.table = np.array(value, dtype=float).reshape(self.nx, self.nz)

    @classmethod
    def constant(cls, nx: int, nz: int, c: float = 0.0) -> "TableCritic":
        return cls(np.full((nx, nz), float(c)))

    @classmethod
    def random(cls, nx: int, nz: int, seed, scale: float = 1.0) -> "TableCritic":
        return cls(scale * as_rng(seed).standard_normal((nx, nz)))

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.table == self.table.flat[0]))

    def __call__(self, x, z, params=None):
        t = self.table if params is None else np.asarray(params).reshape(self.nx, self.nz)
        return t[np.asarray(x), np.asarray(z)]

    def table_values(self, x):
        return self.table[np.asarray(x)]

    def ad_call(self, x, z, p):
        flat = np.asarray(x) * self.nz + np.asarray(z)
        return p[flat]

    def arch(self):
        return {"type": "TableCritic", "nx": self.nx, "nz": self.nz}


class FunctionCritic:
    """Wraps a plain function of (x, z); used for closed-form optimal critics."""

    def __init__(self, fn: Callable, grad_z: Callable | None = None, discrete: bool = False,
                 constant_value: float | None = None):
        self.fn = fn
        self.grad_z = grad_z
        self.discrete = discrete
        self.constant_value = constant_value

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    def __call__(self, x, z, params=None):
        return np.asarray(self.fn(x, z), dtype=float)

    def value_and_grad_z(self, x, z):
        if self.grad_z is None:
            raise NotImplementedError("no z-gradient supplied")
        return self(x, z), self.grad_z(x, z)


def constant_critic(c: float = 0.0, discrete: bool = False) -> FunctionCritic:
    def fn(x, z):
        shape = np.shape(z) if discrete else np.shape(z)[:-1]
        xs = np.shape(x) if discrete else np.shape(x)[:-1]
        return np.full(np.broadcast_shapes(shape, xs), float(c))

    def grad(x, z):
        return np.zeros(np.broadcast_shapes(np.shape(z), np.shape(x)[:-1] + np.shape(z)[-1:]))

    return FunctionCritic(fn, grad, discrete=discrete, constant_value=float(c))


def optimal_critic(model: JointModel, q, per_x_shift: Callable | None = None):
    """T*(x, z) = log p(x, z) - log q(z|x) (+ c(x)), the critic that turns GIWAE into IWAE."""

    def fn(x, z):
        v = model.log_joint(x, z) - q.log_prob(x, z)
        if per_x_shift is not None:
            v = v + per_x_shift(x)
        return v

    grad = None
    if not model.discrete:
        def grad(x, z):
            _, gj = model.log_joint_and_grad(x, z)
            _, gq = q.log_prob_and_grad(x, z)
            return gj - gq

    return FunctionCritic(fn, grad, discrete=model.discrete)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, size: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), float(beta1), float(beta2), float(eps)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grads):
        """Return updated parameters for ascent-free minimization of the loss."""
        g = np.asarray(grads, dtype=float)
        if g.shape != self.m.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.m.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return np.asarray(params, dtype=float) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_state(cls, s: dict) -> "Adam":
        opt = cls(len(s["m"]), s["lr"], s["beta1"], s["beta2"], s["eps"])
        opt.t = int(s["t"])
        opt.m = np.array(s["m"], dtype=float)
        opt.v = np.array(s["v"], dtype=float)
        return opt


def q_log_density(q, x, z):
    return q.log_prob(x, z)


def q_sample(q, x, n: int, seed):
    """``n`` reparameterized draws per row of ``x``: shape (len(x), n, latent_dim)."""
    x = np.asarray(x, dtype=float)
    xk = np.broadcast_to(x[:, None, :], (x.shape[0], n, x.shape[-1]))
    return q.sample(xk, as_rng(seed))


def critic_eval(critic, x, z):
    return critic(x, z)


def optimizer_step(opt: Adam, params, grads):
    return opt.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, obj, extra: dict | None = None) -> None:
    """Write parameters and architecture metadata as versioned JSON.

    Floats are written with ``repr`` precision, so a reload is bit-exact.
    """
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "arch": obj.arch(), "params": [float(v) for v in np.asarray(obj.params).ravel()]}
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arch = payload["arch"]
    params = np.array(payload["params"], dtype=float)
    kind = arch["type"]
    if kind == "Critic":
        return Critic(arch["obs_dim"], arch["latent_dim"], tuple(arch["hidden"]), params=params,
                      seed=arch.get("seed"))
    if kind == "ConditionalGaussian":
        return ConditionalGaussian(arch["obs_dim"], arch["latent_dim"], arch["encoder"],
                                   arch["hidden"], params=params, seed=arch.get("seed"))
    if kind == "TableCritic":
        return TableCritic(params.reshape(arch["nx"], arch["nz"]))
    raise ValueError(f"unknown architecture {kind!r}")
