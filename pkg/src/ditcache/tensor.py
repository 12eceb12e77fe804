"""Minimal dense float64 kernel used by every other module.

All arrays are numpy float64. The operations here are deterministic by
construction: same input bytes give bitwise-identical output bytes, on any
run, because no reduction order is ever left to a BLAS implementation.
`matmul` accumulates strictly left-to-right over the inner dimension, which
is what makes whole denoising runs reproducible at the bit level.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_f64",
    "check_finite",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "top_eigvecs",
]


def as_f64(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 array without copying when possible."""
    return np.ascontiguousarray(a, dtype=np.float64)


def check_finite(a: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise ValueError(f"{context}: non-finite values present")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order over k.

    Equivalent to the scalar triple loop `acc += a[i, k] * b[k, j]` for
    k = 0..K-1 with one rounding per multiply and one per add, so results
    are bit-reproducible and independent of any BLAS blocking strategy.
    """
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    m, ka = a.shape
    kb, n = b.shape
    if ka != kb:
        raise ValueError(f"matmul inner extents differ: {ka} vs {kb}")
    out = np.zeros((m, n))
    for k in range(ka):
        out += a[:, k, None] * b[k, None, :]
    return out


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for stability.

    Every output row sums to 1 within 1e-12 for finite input.
    """
    a = as_f64(a)
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D array, got {a.ndim}-D")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Population variance; `eps` is added to the variance before the square
    root, so constant inputs map to `beta` instead of dividing by zero.
    """
    x = as_f64(x)
    gamma = as_f64(gamma)
    beta = as_f64(beta)
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError("layer_norm parameter length must match the last extent")
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return gamma * ((x - mu) / np.sqrt(var + eps)) + beta


def _start_vector(dim: int, component: int) -> np.ndarray:
    # Deterministic pseudo-random start; a fixed vector like all-ones could be
    # exactly orthogonal to the dominant eigenvector of adversarial inputs.
    rng = np.random.default_rng([0x51AC, dim, component])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def top_eigvecs(cov, k: int, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """Leading k eigenvectors of a symmetric matrix via deflated power iteration.

    Returns a (C, k) array of orthonormal columns ordered by decreasing
    eigenvalue magnitude (equal to decreasing eigenvalue for the positive
    semi-definite covariances this is meant for). Sign convention: the
    largest-magnitude component of each vector is positive. With repeated
    eigenvalues any orthonormal basis of the eigenspace may come back;
    that is documented behaviour, not an error.
    """
    cov = as_f64(cov)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"top_eigvecs expects a square matrix, got shape {cov.shape}")
    c = cov.shape[0]
    if not 0 < k <= c:
        raise ValueError(f"need 0 < k <= {c}, got k={k}")
    if np.max(np.abs(cov - cov.T)) > 1e-9:
        raise ValueError("top_eigvecs: input not symmetric within 1e-9")

    work = (cov + cov.T) / 2.0
    vecs: list[np.ndarray] = []
    for j in range(k):
        v = _start_vector(c, j)
        for u in vecs:
            v -= (v @ u) * u
        norm = np.linalg.norm(v)
        if norm < 1e-12:  # start collapsed onto span of found vectors
            v = _start_vector(c, k + j)
            for u in vecs:
                v -= (v @ u) * u
            norm = np.linalg.norm(v)
        v /= norm

        for _ in range(max_iter):
            w = work @ v
            for u in vecs:
                w -= (w @ u) * u
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                # (numerically) zero eigenvalue: v is already an eigenvector
                break
            w /= norm
            if w @ v < 0.0:
                w = -w
            delta = np.linalg.norm(w - v)
            v = w
            if delta < tol:
                break

        lam = v @ (work @ v)
        i = int(np.argmax(np.abs(v)))
        if v[i] < 0.0:
            v = -v
        vecs.append(v)
        work = work - lam * np.outer(v, v)

    return np.stack(vecs, axis=1)
