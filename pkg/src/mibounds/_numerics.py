"""Small numerical helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_rng(seed) -> np.random.Generator:
    """Return a Generator for an int seed, pass a Generator through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


def logmeanexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """log(mean(exp(a))) with max subtraction.

    Written as ``m + log(mean(exp(a - m)))`` so that K identical entries
    return exactly that entry; several reductions rely on this.
    """
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.mean(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


def categorical_from_uniform(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Invert the cumulative sum of ``probs`` (last axis) at uniforms ``u``.

    The chosen index is the first i with cumsum[i] > u, so exact ties in the
    cumulative sum resolve toward the lower index and zero-mass categories are
    never selected.
    """
    probs = np.asarray(probs, dtype=float)
    c = np.cumsum(probs, axis=-1)
    c = c / c[..., -1:]
    idx = np.sum(c <= np.asarray(u)[..., None], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator, shape=None) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if shape is None:
        shape = probs.shape[:-1]
    u = rng.random(shape)
    return categorical_from_uniform(np.broadcast_to(probs, tuple(shape) + probs.shape[-1:]), u)


def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def mean_and_se(draws: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error (sample std over sqrt(n))."""
    draws = np.asarray(draws, dtype=float).ravel()
    n = draws.size
    if n == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(draws))
    se = float(np.std(draws, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se
