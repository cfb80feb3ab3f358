"""
Cross-modal reliability weighting.

For a pair (u_i, v_i) the neighbours retrieved through the *other* modality
are scored by how well they agree with the neighbours retrieved through this
modality; the softmax of those scores weights an exponential similarity
potential Psi between the anchor and the partners.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core_math import as_matrix, as_vector, softmax
from errors import LengthMismatch, NonFiniteInput
from injection import BatchRetrieval, retrieve_batch
from knowledge_base import CoarseKB, FineKB


@dataclass(frozen=True)
class PotentialSet:
    psi_f_t2a: float
    psi_f_a2t: float
    psi_c_t2a: float
    psi_c_a2t: float
    sample_index: int


@dataclass(frozen=True)
class PotentialTrace:
    """Batched potentials for one direction and granularity, kept for the backward pass."""

    psi: np.ndarray
    weights: np.ndarray
    partners: np.ndarray
    exp_sims: np.ndarray

    def grad_anchor(self) -> np.ndarray:
        """d psi_i / d anchor_i = sum_j w_j exp(anchor_i . p_j) p_j."""
        return np.einsum("bk,bkd->bd", self.weights * self.exp_sims, self.partners)


# ─── Per-sample operations ──────────────────────────────────────────


def consistency_scores(partner_audios: Sequence[np.ndarray], retrieved_audios: Sequence[np.ndarray]) -> np.ndarray:
    partners, retrieved = as_matrix(partner_audios), as_matrix(retrieved_audios)
    if partners.shape[0] != retrieved.shape[0] or partners.shape[0] == 0:
        raise LengthMismatch(f"{partners.shape[0]} partners vs {retrieved.shape[0]} retrieved vectors")
    return (partners @ retrieved.T).mean(axis=1)


def reliability_weights(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    values = as_vector(scores)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("consistency scores must be finite")
    return softmax(values, temperature=1.0)


def knowledge_potential(anchor: np.ndarray, partners: Sequence[np.ndarray], weights: np.ndarray) -> float:
    p, w = as_matrix(partners), as_vector(weights)
    if p.shape[0] != w.shape[0]:
        raise LengthMismatch(f"{p.shape[0]} partners vs {w.shape[0]} weights")
    return float(np.sum(w * np.exp(p @ as_vector(anchor))))


# ─── Batched potentials ─────────────────────────────────────────────


def directional_potentials(
    anchors: np.ndarray,
    partner_vectors: np.ndarray,
    partner_idx: np.ndarray,
    retrieved_vectors: np.ndarray,
    retrieved_idx: np.ndarray,
) -> PotentialTrace:
    """Vectorised scores, weights and potentials for a whole batch."""
    if partner_idx.shape != retrieved_idx.shape:
        raise LengthMismatch(f"partner sets {partner_idx.shape} vs retrieved sets {retrieved_idx.shape}")
    partners = partner_vectors[partner_idx]
    retrieved_mean = retrieved_vectors[retrieved_idx].mean(axis=1)
    scores = np.einsum("bkd,bd->bk", partners, retrieved_mean)
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    exp_sims = np.exp(np.einsum("bkd,bd->bk", partners, anchors))
    psi = np.sum(weights * exp_sims, axis=1)
    return PotentialTrace(psi=psi, weights=weights, partners=partners, exp_sims=exp_sims)


def potential_traces(
    audio: np.ndarray,
    text: np.ndarray,
    fine: FineKB,
    coarse: CoarseKB,
    retrieval: BatchRetrieval,
) -> dict:
    """All four potential traces keyed by (granularity, direction)."""
    U, V = as_matrix(audio), as_matrix(text)
    return {
        ("fine", "t2a"): directional_potentials(U, fine.audio, retrieval.fine_text, fine.audio, retrieval.fine_audio),
        ("fine", "a2t"): directional_potentials(V, fine.text, retrieval.fine_audio, fine.text, retrieval.fine_text),
        ("coarse", "t2a"): directional_potentials(
            U, coarse.audio, retrieval.coarse_text, coarse.audio, retrieval.coarse_audio
        ),
        ("coarse", "a2t"): directional_potentials(
            V, coarse.text, retrieval.coarse_audio, coarse.text, retrieval.coarse_text
        ),
    }


def batch_potentials(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    fine: FineKB,
    coarse: CoarseKB,
    K: int,
    self_ids: Optional[Sequence[int]] = None,
    retrieval: Optional[BatchRetrieval] = None,
) -> List[PotentialSet]:
    pairs = list(batch)
    U = as_matrix([as_vector(u) for u, _ in pairs])
    V = as_matrix([as_vector(v) for _, v in pairs])
    if retrieval is None:
        retrieval = retrieve_batch(U, V, fine, coarse, K, self_ids)
    traces = potential_traces(U, V, fine, coarse, retrieval)
    return [
        PotentialSet(
            psi_f_t2a=float(traces[("fine", "t2a")].psi[i]),
            psi_f_a2t=float(traces[("fine", "a2t")].psi[i]),
            psi_c_t2a=float(traces[("coarse", "t2a")].psi[i]),
            psi_c_a2t=float(traces[("coarse", "a2t")].psi[i]),
            sample_index=i,
        )
        for i in range(U.shape[0])
    ]
