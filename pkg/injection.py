"""
Knowledge injection: average the retrieved neighbours into a knowledge vector
and interpolate it into the sample embedding, for both modalities and both
granularities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core_math import as_matrix, as_vector, l2_normalize
from errors import DimensionMismatch, EmptyBatch, IndexOutOfRange, RhoOutOfRange, ZeroNorm
from knowledge_base import CoarseKB, FineKB, KnowledgeBase, Neighborhood, top_k


@dataclass(frozen=True)
class EnhancedPair:
    u_fine: np.ndarray
    v_fine: np.ndarray
    u_coarse: np.ndarray
    v_coarse: np.ndarray
    source_index: int


@dataclass(frozen=True)
class BatchRetrieval:
    """Top-K index sets for every batch item, shape (B, K) each."""

    fine_audio: np.ndarray
    fine_text: np.ndarray
    coarse_audio: np.ndarray
    coarse_text: np.ndarray


def knowledge_vector(nb: Neighborhood, kb: KnowledgeBase) -> np.ndarray:
    vectors = kb.side(nb.side)
    if nb.indices.size == 0 or nb.indices.min() < 0 or nb.indices.max() >= vectors.shape[0]:
        raise IndexOutOfRange(f"neighbourhood indices outside [0, {vectors.shape[0]})")
    return vectors[nb.indices].mean(axis=0)


def inject(original: np.ndarray, kvec: np.ndarray, rho: float, renormalize: bool = True) -> np.ndarray:
    if not 0.0 <= rho <= 1.0:
        raise RhoOutOfRange(f"rho must lie in [0, 1], got {rho}")
    u, k = as_vector(original), as_vector(kvec)
    if u.shape != k.shape:
        raise DimensionMismatch(f"dimensions differ: {u.shape[0]} vs {k.shape[0]}")
    blended = rho * u + (1.0 - rho) * k
    return l2_normalize(blended) if renormalize else blended


def _exclusion(self_ids: Optional[Sequence[int]], i: int) -> Optional[int]:
    return None if self_ids is None else int(self_ids[i])


def retrieve_batch(
    audio: np.ndarray,
    text: np.ndarray,
    fine: FineKB,
    coarse: CoarseKB,
    K: int,
    self_ids: Optional[Sequence[int]] = None,
) -> BatchRetrieval:
    """Same-side retrieval from both bases for every pair in the batch."""
    U, V = as_matrix(audio), as_matrix(text)
    if U.shape[0] == 0:
        raise EmptyBatch("batch is empty")
    rows = {"fine_audio": [], "fine_text": [], "coarse_audio": [], "coarse_text": []}
    for i in range(U.shape[0]):
        exclude = _exclusion(self_ids, i)
        rows["fine_audio"].append(top_k(U[i], fine, "audio", K, exclude).indices)
        rows["fine_text"].append(top_k(V[i], fine, "text", K, exclude).indices)
        rows["coarse_audio"].append(top_k(U[i], coarse, "audio", K).indices)
        rows["coarse_text"].append(top_k(V[i], coarse, "text", K).indices)
    return BatchRetrieval(**{key: np.vstack(value) for key, value in rows.items()})


def enhance_batch(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    fine: FineKB,
    coarse: CoarseKB,
    K: int,
    rho: float,
    self_ids: Optional[Sequence[int]] = None,
    renormalize: bool = True,
) -> List[EnhancedPair]:
    pairs = list(batch)
    if not pairs:
        raise EmptyBatch("batch is empty")
    U = as_matrix([as_vector(u) for u, _ in pairs])
    V = as_matrix([as_vector(v) for _, v in pairs])
    retrieval = retrieve_batch(U, V, fine, coarse, K, self_ids)

    enhanced: List[EnhancedPair] = []
    for i in range(U.shape[0]):
        kvecs = (
            fine.audio[retrieval.fine_audio[i]].mean(axis=0),
            fine.text[retrieval.fine_text[i]].mean(axis=0),
            coarse.audio[retrieval.coarse_audio[i]].mean(axis=0),
            coarse.text[retrieval.coarse_text[i]].mean(axis=0),
        )
        enhanced.append(
            EnhancedPair(
                u_fine=inject(U[i], kvecs[0], rho, renormalize),
                v_fine=inject(V[i], kvecs[1], rho, renormalize),
                u_coarse=inject(U[i], kvecs[2], rho, renormalize),
                v_coarse=inject(V[i], kvecs[3], rho, renormalize),
                source_index=i,
            )
        )
    return enhanced


def inject_rows(
    originals: np.ndarray,
    kb_vectors: np.ndarray,
    indices: np.ndarray,
    rho: float,
    renormalize: bool,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised injection for a whole batch.

    Returns (enhanced, pre-normalisation blend, blend norms); the latter two
    feed the backward pass.
    """
    if not 0.0 <= rho <= 1.0:
        raise RhoOutOfRange(f"rho must lie in [0, 1], got {rho}")
    kvec = kb_vectors[indices].mean(axis=1)
    blended = rho * originals + (1.0 - rho) * kvec
    norms = np.linalg.norm(blended, axis=1, keepdims=True)
    if not renormalize:
        return blended, blended, norms
    if np.any(norms <= 1e-12):
        raise ZeroNorm("injected embedding cancelled to zero")
    return blended / norms, blended, norms


def inject_rows_backward(
    grad_enhanced: np.ndarray,
    enhanced: np.ndarray,
    norms: np.ndarray,
    indices: np.ndarray,
    n_entries: int,
    rho: float,
    renormalize: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Chain rule through ``inject_rows``: returns (grad originals, grad KB vectors)."""
    if renormalize:
        radial = np.einsum("bd,bd->b", grad_enhanced, enhanced)[:, None]
        grad_blend = (grad_enhanced - radial * enhanced) / norms
    else:
        grad_blend = grad_enhanced
    grad_originals = rho * grad_blend
    K = indices.shape[1]
    grad_kb = np.zeros((n_entries, grad_blend.shape[1]))
    per_neighbor = np.repeat(((1.0 - rho) / K) * grad_blend, K, axis=0)
    np.add.at(grad_kb, indices.reshape(-1), per_neighbor)
    return grad_originals, grad_kb
