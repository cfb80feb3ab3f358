"""
Entropic optimal transport over a batch similarity matrix and the
similarity realignment built from the resulting plan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.special import logsumexp

from core_math import as_matrix
from errors import BetaOutOfRange, NonFiniteInput, NonPositiveEpsilon, ShapeMismatch

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.05
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class TransportPlan:
    Q: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    dual_trace: Tuple[float, ...] = field(default=())

    @property
    def size(self) -> int:
        return int(self.Q.shape[0])

    def marginal_violation(self) -> float:
        target = 1.0 / self.size
        rows = np.abs(self.Q.sum(axis=1) - target).max()
        cols = np.abs(self.Q.sum(axis=0) - target).max()
        return float(max(rows, cols))


def regularized_objective(Q: np.ndarray, S: np.ndarray, epsilon: float) -> float:
    """<Q, S> + eps * H(Q) with H(Q) = -sum Q (log Q - 1)."""
    positive = Q[Q > 0]
    entropy = -float(np.sum(positive * (np.log(positive) - 1.0)))
    return float(np.sum(Q * S)) + epsilon * entropy


def _dual_value(log_kernel: np.ndarray, alpha: np.ndarray, beta: np.ndarray, mass: float, epsilon: float) -> float:
    # dual of min <-S, Q> - eps H(Q); exact block ascent keeps it non-decreasing
    total = float(np.exp(log_kernel + alpha[:, None] + beta[None, :]).sum())
    return epsilon * (mass * float(alpha.sum()) + mass * float(beta.sum()) - total)


def sinkhorn(
    S: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    track_objective: bool = False,
) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp with uniform marginals 1/B.

    Maximises <Q, S> + eps H(Q). Not converging within ``max_iters`` is reported
    through ``converged=False`` rather than raised; callers aggregate the count.
    """
    if epsilon <= 0:
        raise NonPositiveEpsilon(f"epsilon must be > 0, got {epsilon}")
    sim = as_matrix(S)
    if sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise ShapeMismatch(f"expected a non-empty square matrix, got {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise NonFiniteInput("similarity matrix contains non-finite values")

    B = sim.shape[0]
    if B == 1:
        return TransportPlan(Q=np.ones((1, 1)), epsilon=epsilon, iterations_used=0, converged=True)

    log_kernel = sim / epsilon
    log_mass = -np.log(B)
    alpha = np.zeros(B)
    beta = np.zeros(B)
    trace = []
    converged = False
    iterations = 0
    violation = np.inf
    for iterations in range(1, max_iters + 1):
        alpha = log_mass - logsumexp(log_kernel + beta[None, :], axis=1)
        beta = log_mass - logsumexp(log_kernel + alpha[:, None], axis=0)
        Q = np.exp(log_kernel + alpha[:, None] + beta[None, :])
        # columns are exact after the column update; rows carry the residual
        violation = float(np.abs(Q.sum(axis=1) - 1.0 / B).max())
        if track_objective:
            trace.append(_dual_value(log_kernel, alpha, beta, 1.0 / B, epsilon))
        logger.debug("sinkhorn iter %d: row violation %.3e", iterations, violation)
        if violation < tol:
            converged = True
            break

    if not converged:
        logger.debug(
            "Sinkhorn did not converge in %d iterations (B=%d, eps=%.3g, violation=%.3e)",
            max_iters, B, epsilon, violation,
        )
    Q = np.exp(log_kernel + alpha[:, None] + beta[None, :])
    return TransportPlan(
        Q=Q,
        epsilon=epsilon,
        iterations_used=iterations,
        converged=converged,
        dual_trace=tuple(trace),
    )


def mixing_matrix(plan: TransportPlan, beta: float, rescale: bool = True) -> np.ndarray:
    """(1 - beta) I + beta * B * Q (row-stochastic form) or the literal beta * Q."""
    if not 0.0 <= beta <= 1.0:
        raise BetaOutOfRange(f"beta must lie in [0, 1], got {beta}")
    B = plan.size
    coupling = plan.Q * B if rescale else plan.Q
    return (1.0 - beta) * np.eye(B) + beta * coupling


def realign(S: np.ndarray, plan: TransportPlan, beta: float, rescale: bool = True) -> np.ndarray:
    sim = as_matrix(S)
    if sim.shape != plan.Q.shape:
        raise ShapeMismatch(f"similarity {sim.shape} vs plan {plan.Q.shape}")
    return mixing_matrix(plan, beta, rescale) @ sim
