"""Small dense numerical helpers shared by the rest of the package.

Everything works in float64. Random draws go through ``numpy.random.Generator``
backed by PCG64, so a seed fixes the whole stream of draws.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.linalg import lapack


class DimensionError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator. Accepts an int seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def _householder(A: np.ndarray, overwrite: bool = False):
    """LAPACK Householder QR: returns (Q, diag-sign vector, packed factor).

    With ``overwrite`` both A and the packed factor are reused as scratch and
    only Q and the signs are meaningful.
    """
    packed, tau, _, info = lapack.dgeqrf(A, overwrite_a=overwrite)
    if info:
        raise np.linalg.LinAlgError(f"dgeqrf failed with info={info}")
    n = min(A.shape)
    signs = np.copysign(1.0, packed.diagonal()[:n])
    Q, _, info = lapack.dorgqr(packed[:, :n], tau, overwrite_a=overwrite)
    if info:
        raise np.linalg.LinAlgError(f"dorgqr failed with info={info}")
    Q *= signs
    return Q, signs, packed


def qr_positive(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced Householder QR with the sign convention diag(R) >= 0."""
    A = np.asarray(A, dtype=np.float64)
    Q, signs, packed = _householder(A)
    R = np.triu(packed[: len(signs)]) * signs[:, None]
    return Q, R


def orthonormal_basis(d: int, K: int, rng) -> np.ndarray:
    """Random d x K matrix with orthonormal columns, determined by ``rng``."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if d < K:
        raise DimensionError(f"need d >= K for an orthonormal basis, got d={d}, K={K}")
    # drawn transposed so the d x K matrix is Fortran-ordered and LAPACK can work in place
    return _householder(make_rng(rng).standard_normal((K, d)).T, overwrite=True)[0]


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    return z - np.expand_dims(logsumexp(z, axis=axis), axis)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats; 0 log 0 is taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(terms, axis=axis)


def l2_normalize_rows(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (E / ||E||, ||E||) row-wise. Raises on zero rows."""
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        raise ZeroDivisionError("cannot normalize a zero-length row")
    return E / norms[:, None], norms


def l2_normalize_backward(E_hat: np.ndarray, norms: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows."""
    radial = np.sum(E_hat * grad_hat, axis=1, keepdims=True)
    return (grad_hat - E_hat * radial) / norms[:, None]


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def grad_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` at ``x``.

    Error per coordinate is |a - n| / max(1, |a|, |n|).
    """
    num = numerical_grad(f, x, h)
    a = np.asarray(analytic, dtype=np.float64).reshape(num.shape)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - num) / denom))
