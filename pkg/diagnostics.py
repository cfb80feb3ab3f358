"""
Representation-drift diagnostics: neighbourhood distributions, the
Representation-Drift Mismatch (RDM), the knowledge-error bound check, drift
simulation and raw drift-trace export.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import expm
from scipy.stats import spearmanr

from artifacts import atomic_write_csv
from core_math import as_matrix, as_vector, derive_rng, kl_divergence, l2_normalize_rows, softmax
from errors import EmptyKB, IndexMisalignment, InvalidCounts, InvalidDriftSettings, LengthMismatch
from knowledge_base import corpus_arrays

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9


class RDMReport(BaseModel):
    per_sample_kl: List[float]
    mean: float = Field(ge=0)
    model_epoch: int = 0
    kb_epoch: int = 0

    @model_validator(mode="after")
    def _epochs_ordered(self) -> "RDMReport":
        if self.model_epoch < self.kb_epoch:
            raise ValueError(f"model epoch {self.model_epoch} precedes kb epoch {self.kb_epoch}")
        return self


class BoundCheck(BaseModel):
    delta_k_norm: float = Field(ge=0)
    rdm: float = Field(ge=0)
    C: float = Field(gt=0)
    bound: float = Field(ge=0)
    satisfied: bool


class DriftStep(BaseModel):
    step: int
    report: RDMReport
    delta_k_mean: float = Field(ge=0)
    bound_mean: float = Field(ge=0)

    @property
    def rdm_mean(self) -> float:
        return self.report.mean

    def summary(self) -> dict:
        return {
            "step": self.step,
            "rdm_mean": self.report.mean,
            "delta_k_mean": self.delta_k_mean,
            "bound_mean": self.bound_mean,
        }


# ─── Neighbourhood distributions ────────────────────────────────────


def neighborhood_dist(query: np.ndarray, kb_vectors: Sequence[np.ndarray] | np.ndarray, temperature: float = 1.0) -> np.ndarray:
    vectors = np.asarray(kb_vectors, dtype=np.float64)
    if vectors.size == 0:
        raise EmptyKB("knowledge base has no vectors")
    vectors = as_matrix(vectors)
    return softmax(vectors @ as_vector(query), temperature)


def _neighborhood_rows(queries: np.ndarray, kb_vectors: np.ndarray, temperature: float) -> np.ndarray:
    return np.vstack([neighborhood_dist(q, kb_vectors, temperature) for q in queries])


def rdm(
    samples: np.ndarray,
    kb_current: np.ndarray,
    kb_stale: np.ndarray,
    temperature: float = 1.0,
    model_epoch: int = 0,
    kb_epoch: int = 0,
) -> RDMReport:
    """Per-sample KL(P_ideal || P_actual); P_ideal ranks against the re-encoded base."""
    current, stale = as_matrix(kb_current), as_matrix(kb_stale)
    if current.shape != stale.shape:
        raise IndexMisalignment(f"current base {current.shape} vs stale base {stale.shape}")
    queries = as_matrix(samples)
    ideal = _neighborhood_rows(queries, current, temperature)
    actual = _neighborhood_rows(queries, stale, temperature)
    per_sample = [kl_divergence(p, q) for p, q in zip(ideal, actual)]
    return RDMReport(
        per_sample_kl=per_sample,
        mean=float(np.mean(per_sample)) if per_sample else 0.0,
        model_epoch=model_epoch,
        kb_epoch=kb_epoch,
    )


# ─── Knowledge-error bound ──────────────────────────────────────────


def delta_k(P_ideal: np.ndarray, P_actual: np.ndarray, kb_vectors: np.ndarray) -> np.ndarray:
    ideal, actual = as_vector(P_ideal), as_vector(P_actual)
    Z = as_matrix(kb_vectors)
    if not (ideal.shape[0] == actual.shape[0] == Z.shape[0]):
        raise LengthMismatch(f"lengths differ: {ideal.shape[0]}, {actual.shape[0]}, {Z.shape[0]}")
    return (actual - ideal) @ Z


def pinsker_bound_check(P_ideal: np.ndarray, P_actual: np.ndarray, kb_vectors: np.ndarray) -> BoundCheck:
    """||delta K||_2 <= C sqrt(2 KL(P_ideal || P_actual)) with C = max_j ||z_j||_2."""
    delta = delta_k(P_ideal, P_actual, kb_vectors)
    divergence = kl_divergence(P_ideal, P_actual)
    C = float(np.linalg.norm(as_matrix(kb_vectors), axis=1).max())
    bound = C * float(np.sqrt(2.0 * divergence))
    norm = float(np.linalg.norm(delta))
    return BoundCheck(delta_k_norm=norm, rdm=divergence, C=C, bound=bound, satisfied=norm <= bound + BOUND_SLACK)


def random_bound_trials(trials: int, n_entries: int, dim: int, seed: int) -> Tuple[int, int]:
    """Bound checks on seeded random (P, Q, unit z) triples; returns (satisfied, total)."""
    rng = derive_rng(seed, "bound")
    satisfied = 0
    for _ in range(trials):
        p = rng.dirichlet(np.ones(n_entries))
        q = rng.dirichlet(np.ones(n_entries))
        z = l2_normalize_rows(rng.standard_normal((n_entries, dim)))
        if pinsker_bound_check(p, q, z).satisfied:
            satisfied += 1
    if satisfied < trials:
        logger.warning("Knowledge-error bound violated in %d of %d trials", trials - satisfied, trials)
    return satisfied, trials


# ─── Drift simulation ───────────────────────────────────────────────


def _drift_weights(W0: np.ndarray, drift_model: str, steps: int, magnitude: float, seed: int) -> List[np.ndarray]:
    rng = derive_rng(seed, f"drift:{drift_model}")
    weights = []
    W = W0.copy()
    if drift_model == "gaussian_walk":
        scale = magnitude * float(np.linalg.norm(W0)) / np.sqrt(W0.size)
        for _ in range(steps):
            W = W + scale * rng.standard_normal(W0.shape)
            weights.append(W)
    elif drift_model == "rotation_flow":
        G = rng.standard_normal((W0.shape[0], W0.shape[0]))
        rotation = expm(magnitude * (G - G.T) / 2.0)
        for _ in range(steps):
            W = rotation @ W
            weights.append(W)
    else:
        raise InvalidDriftSettings(f"unknown drift model {drift_model!r}")
    return weights


def drift_encoders(initial_encoder: Any, drift_model: str, steps: int, magnitude: float, seed: int = 0) -> List[Any]:
    """Encoders for drift steps 1..steps (step 0 is ``initial_encoder``)."""
    if steps < 1:
        raise InvalidDriftSettings(f"steps must be >= 1, got {steps}")
    if magnitude < 0:
        raise InvalidDriftSettings(f"magnitude must be >= 0, got {magnitude}")
    W0 = np.asarray(initial_encoder.W, dtype=np.float64)
    return [initial_encoder.with_weights(W) for W in _drift_weights(W0, drift_model, steps, magnitude, seed)]


def drift_simulation(
    initial_encoder: Any,
    drift_model: str,
    steps: int,
    magnitude: float,
    corpus: Any,
    temperature: float = 1.0,
    seed: int = 0,
) -> List[DriftStep]:
    """Drift an encoder and measure RDM of every step against the step-0 base.

    ``initial_encoder`` maps (n, d_in) audio features to unit rows and exposes
    ``W`` and ``with_weights(W)``.
    """
    encoders = drift_encoders(initial_encoder, drift_model, steps, magnitude, seed)
    features, _ = corpus_arrays(corpus)
    stale = initial_encoder(features)
    trace: List[DriftStep] = []
    for step, encoder in enumerate(encoders, start=1):
        current = encoder(features)
        report = rdm(current, current, stale, temperature, model_epoch=step, kb_epoch=0)
        deltas, bounds = [], []
        for query in current:
            ideal = neighborhood_dist(query, current, temperature)
            actual = neighborhood_dist(query, stale, temperature)
            check = pinsker_bound_check(ideal, actual, current)
            deltas.append(check.delta_k_norm)
            bounds.append(check.bound)
        trace.append(
            DriftStep(step=step, report=report, delta_k_mean=float(np.mean(deltas)), bound_mean=float(np.mean(bounds)))
        )
        logger.debug("drift step %d: rdm %.6f", step, report.mean)
    return trace


def drift_trend(trace: Sequence[DriftStep]) -> float:
    """Spearman rank correlation between step index and mean RDM."""
    steps = [item.step for item in trace]
    means = [item.report.mean for item in trace]
    if len(set(means)) < 2:
        return 0.0
    statistic, _ = spearmanr(steps, means)
    return float(statistic)


# ─── Drift-trace export ─────────────────────────────────────────────


def drift_trace_export(
    encoder_snapshots: Sequence[Tuple[int, Any]],
    sample_set: Any,
    path: str | os.PathLike,
    sample_ids: Optional[Sequence[int]] = None,
) -> Path:
    """CSV of raw embedding coordinates per (snapshot epoch, sample) for external plotting."""
    if len(encoder_snapshots) < 2:
        raise InvalidCounts(f"need at least 2 encoder snapshots, got {len(encoder_snapshots)}")
    features, _ = corpus_arrays(sample_set)
    ids = list(range(features.shape[0])) if sample_ids is None else [int(i) for i in sample_ids]
    if len(ids) != features.shape[0]:
        raise LengthMismatch(f"{len(ids)} sample ids for {features.shape[0]} samples")

    rows = []
    dim = None
    for epoch, encoder in encoder_snapshots:
        embeddings = encoder(features)
        dim = embeddings.shape[1]
        for sample_id, vector in zip(ids, embeddings):
            rows.append([int(epoch), sample_id, *(repr(float(x)) for x in vector)])
    header = ["snapshot_epoch", "sample_id", *(f"dim_{j}" for j in range(dim))]
    return atomic_write_csv(path, header, rows)
