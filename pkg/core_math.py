"""
Deterministic numerical kernels shared by every other module.

Vectors are numpy float64 arrays. A "unit vector" is a 1-D array with L2 norm 1,
a "probability distribution" is a non-negative 1-D array summing to 1, and a
similarity matrix is a B x B array whose rows index text items and whose
columns index audio items.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from errors import (
    DimensionMismatch,
    EmptyBatch,
    InvalidStep,
    NonFiniteEvaluation,
    NonFiniteInput,
    NonPositiveTemperature,
    SupportViolation,
    ZeroNorm,
)

ZERO_NORM_EPS = 1e-12
UNIT_NORM_TOL = 1e-6
PROB_SUM_TOL = 1e-9
FD_STEP_RANGE = (1e-7, 1e-3)


def as_vector(v: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


def as_matrix(rows: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


# ─── Normalisation / similarity ─────────────────────────────────────


def l2_normalize(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return v / ||v||_2; raises ZeroNorm when the norm is at most 1e-12."""
    vec = as_vector(v)
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm <= ZERO_NORM_EPS:
        raise ZeroNorm(f"cannot normalise vector with norm {norm:.3e}")
    return vec / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    mat = as_matrix(m)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM_EPS):
        bad = int(np.argmin(norms[:, 0]))
        raise ZeroNorm(f"row {bad} has norm {float(norms[bad, 0]):.3e}")
    return mat / norms


def is_unit(v: np.ndarray, tol: float = UNIT_NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    a, b = as_vector(u), as_vector(v)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def pairwise_sim(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Entry (i, j) = U[i] . V[j]."""
    left, right = as_matrix(U), as_matrix(V)
    if left.shape[0] == 0 or right.shape[0] == 0:
        raise EmptyBatch("pairwise_sim needs at least one vector per side")
    if left.shape[0] != right.shape[0]:
        raise DimensionMismatch(f"batch sizes differ: {left.shape[0]} vs {right.shape[0]}")
    if left.shape[1] != right.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {left.shape[1]} vs {right.shape[1]}")
    return left @ right.T


# ─── Distributions ──────────────────────────────────────────────────


def softmax(x: Sequence[float] | np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    logits = as_vector(x)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInput("softmax input contains non-finite values")
    z = logits / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax_rows(X: np.ndarray) -> np.ndarray:
    return X - logsumexp(X, axis=1, keepdims=True)


def is_prob_dist(p: np.ndarray, tol: float = PROB_SUM_TOL) -> bool:
    arr = as_vector(p)
    return bool(np.all(arr >= 0.0) and abs(float(arr.sum()) - 1.0) <= tol)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats with 0 ln 0 = 0; q-zeros under p-mass are hard errors."""
    pv, qv = as_vector(p), as_vector(q)
    if pv.shape != qv.shape:
        raise DimensionMismatch(f"lengths differ: {pv.shape[0]} vs {qv.shape[0]}")
    support = pv > 0
    if np.any(qv[support] <= 0):
        raise SupportViolation("q assigns zero mass where p is positive")
    ps, qs = pv[support], qv[support]
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(qs)))))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    pv, qv = as_vector(p), as_vector(q)
    if pv.shape != qv.shape:
        raise DimensionMismatch(f"lengths differ: {pv.shape[0]} vs {qv.shape[0]}")
    return 0.5 * float(np.abs(pv - qv).sum())


# ─── Finite differences ─────────────────────────────────────────────


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; x may have any shape."""
    lo, hi = FD_STEP_RANGE
    if not lo <= h <= hi:
        raise InvalidStep(f"step must lie in [{lo}, {hi}], got {h}")
    point = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(point)
    for i in range(point.size):
        original = point.flat[i]
        point.flat[i] = original + h
        f_plus = float(f(point))
        point.flat[i] = original - h
        f_minus = float(f(point))
        point.flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteEvaluation(f"f is not finite around coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error between two gradient arrays."""
    diff = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return diff / scale


# ─── Random streams ─────────────────────────────────────────────────


def derive_seed(seed: int, stream: str) -> int:
    """Stable integer seed for a named sub-stream of a root seed."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream))
