"""
Fine- and coarse-grained knowledge bases.

The fine base stores one L2-normalised (audio, text) embedding pair per source
item. The coarse base clusters the fine audio embeddings with k-means and
max-pools each cluster's audio and text members into a prototype pair. Both
bases are immutable snapshots; ``refresh`` returns new ones.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from artifacts import atomic_write_bytes
from core_math import as_matrix, as_vector, l2_normalize_rows
from errors import (
    EmptyCorpus,
    EncoderDimensionMismatch,
    IndexMisalignment,
    KTooLarge,
    NonPositivePeriod,
    SnapshotFormatError,
    TooManyClusters,
)

logger = logging.getLogger(__name__)

Encoder = Callable[[np.ndarray], np.ndarray]

SIDES = ("audio", "text")
GRANULARITIES = ("fine", "coarse")
DEFAULT_NUM_PROTOTYPES = 512
DEFAULT_KMEANS_ITERS = 100

SNAPSHOT_MAGIC = b"ASKB"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIQQQ")


# ─── Types ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class KBEntry:
    id: int
    audio: np.ndarray
    text: np.ndarray


@dataclass(frozen=True)
class FineKB:
    audio: np.ndarray
    text: np.ndarray
    ids: np.ndarray
    built_at_epoch: int

    def __len__(self) -> int:
        return int(self.audio.shape[0])

    @property
    def dim(self) -> int:
        return int(self.audio.shape[1])

    @property
    def entries(self) -> List[KBEntry]:
        return [KBEntry(int(i), a, t) for i, a, t in zip(self.ids, self.audio, self.text)]

    def side(self, side: str) -> np.ndarray:
        return _pick_side(self.audio, self.text, side)

    def position_of(self, entry_id: int) -> Optional[int]:
        hits = np.flatnonzero(self.ids == entry_id)
        return int(hits[0]) if hits.size else None


@dataclass(frozen=True)
class CoarseKB:
    audio: np.ndarray
    text: np.ndarray
    built_at_epoch: int
    assignments: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.audio.shape[0])

    @property
    def prototypes(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.audio, self.text))

    def side(self, side: str) -> np.ndarray:
        return _pick_side(self.audio, self.text, side)


KnowledgeBase = Union[FineKB, CoarseKB]


@dataclass(frozen=True)
class Neighborhood:
    query_id: Optional[int]
    indices: np.ndarray
    sims: np.ndarray
    side: str
    granularity: str

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    iterations: int


def _pick_side(audio: np.ndarray, text: np.ndarray, side: str) -> np.ndarray:
    if side == "audio":
        return audio
    if side == "text":
        return text
    raise ValueError(f"side must be one of {SIDES}, got {side!r}")


# ─── Fine-grained base ──────────────────────────────────────────────


def corpus_arrays(corpus: Any) -> Tuple[np.ndarray, np.ndarray]:
    """Accept either an object exposing ``audio``/``text`` arrays or a list of pairs."""
    if hasattr(corpus, "audio") and hasattr(corpus, "text"):
        audio, text = np.asarray(corpus.audio, dtype=np.float64), np.asarray(corpus.text, dtype=np.float64)
    else:
        pairs = list(corpus)
        if not pairs:
            raise EmptyCorpus("corpus has no pairs")
        audio = as_matrix([as_vector(a) for a, _ in pairs])
        text = as_matrix([as_vector(t) for _, t in pairs])
    if audio.ndim != 2 or audio.shape[0] == 0:
        raise EmptyCorpus("corpus has no pairs")
    if audio.shape[0] != text.shape[0]:
        raise IndexMisalignment(f"{audio.shape[0]} audio rows vs {text.shape[0]} text rows")
    return audio, text


def build_fine_kb(corpus: Any, audio_encoder: Encoder, text_encoder: Encoder, epoch: int) -> FineKB:
    audio_raw, text_raw = corpus_arrays(corpus)
    audio = np.asarray(audio_encoder(audio_raw), dtype=np.float64)
    text = np.asarray(text_encoder(text_raw), dtype=np.float64)
    if audio.ndim != 2 or text.ndim != 2 or audio.shape != text.shape or audio.shape[0] != audio_raw.shape[0]:
        raise EncoderDimensionMismatch(
            f"encoders returned shapes {audio.shape} and {text.shape} for {audio_raw.shape[0]} pairs"
        )
    return FineKB(
        audio=l2_normalize_rows(audio),
        text=l2_normalize_rows(text),
        ids=np.arange(audio.shape[0], dtype=np.int64),
        built_at_epoch=int(epoch),
    )


# ─── K-means ────────────────────────────────────────────────────────


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_plusplus(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, n_clusters):
        total = float(closest.sum())
        if total <= 0.0:
            # every remaining point coincides with a chosen centre
            remaining = np.setdiff1d(np.arange(n), np.asarray(chosen))
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _reseed_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    labels = labels.copy()
    for cluster in range(n_clusters):
        if np.any(labels == cluster):
            continue
        counts = np.bincount(labels, minlength=n_clusters)
        own = np.einsum("nd,nd->n", points - centroids[labels], points - centroids[labels])
        own[counts[labels] <= 1] = -np.inf
        far = int(np.argmax(own))
        labels[far] = cluster
        centroids[cluster] = points[far]
    return labels


def kmeans(points: np.ndarray, N_c: int, seed: int, max_iters: int = DEFAULT_KMEANS_ITERS) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until the assignment is a fixpoint."""
    data = as_matrix(points)
    n = data.shape[0]
    if N_c < 1 or N_c > n:
        raise TooManyClusters(f"cannot form {N_c} clusters from {n} points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(data, N_c, rng)
    labels = np.argmin(_sq_dists(data, centroids), axis=1)
    labels = _reseed_empty(data, centroids, labels, N_c)

    iterations = 0
    for iterations in range(1, max_iters + 1):
        for cluster in range(N_c):
            centroids[cluster] = data[labels == cluster].mean(axis=0)
        new_labels = np.argmin(_sq_dists(data, centroids), axis=1)
        new_labels = _reseed_empty(data, centroids, new_labels, N_c)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    for cluster in range(N_c):
        centroids[cluster] = data[labels == cluster].mean(axis=0)
    return KMeansResult(assignments=labels.astype(np.int64), centroids=centroids, iterations=iterations)


# ─── Coarse-grained base ────────────────────────────────────────────


def resolve_num_prototypes(requested: int, corpus_size: int) -> Tuple[int, Optional[str]]:
    """Clamp N_c to the corpus size; returns (N_c, warning or None)."""
    if requested <= corpus_size:
        return requested, None
    message = f"N_c={requested} exceeds corpus size {corpus_size}; clamped to {corpus_size}"
    logger.warning(message)
    return corpus_size, message


def build_coarse_kb(fine: FineKB, N_c: int, seed: int) -> CoarseKB:
    if N_c > len(fine):
        raise TooManyClusters(f"N_c={N_c} exceeds fine base size {len(fine)}")
    clusters = kmeans(fine.audio, N_c, seed)
    audio_protos = np.empty((N_c, fine.dim))
    text_protos = np.empty((N_c, fine.dim))
    for m in range(N_c):
        members = clusters.assignments == m
        audio_protos[m] = fine.audio[members].max(axis=0)
        text_protos[m] = fine.text[members].max(axis=0)
    return CoarseKB(
        audio=audio_protos,
        text=text_protos,
        built_at_epoch=fine.built_at_epoch,
        assignments=clusters.assignments,
    )


# ─── Retrieval ──────────────────────────────────────────────────────


def top_k(
    query: np.ndarray,
    kb: KnowledgeBase,
    side: str,
    K: int,
    exclude_id: Optional[int] = None,
) -> Neighborhood:
    """Exact top-K by dot product; ties go to the lower index.

    ``exclude_id`` applies to fine bases only (prototypes have no item ids).
    """
    vectors = kb.side(side)
    granularity = "fine" if isinstance(kb, FineKB) else "coarse"
    sims = vectors @ as_vector(query)

    usable = np.ones(sims.shape[0], dtype=bool)
    if exclude_id is not None and isinstance(kb, FineKB):
        pos = kb.position_of(exclude_id)
        if pos is not None:
            usable[pos] = False
    n_usable = int(usable.sum())
    if K < 1 or K > n_usable:
        raise KTooLarge(f"K={K} but only {n_usable} usable {granularity} entries")

    candidates = np.flatnonzero(usable)
    order = np.argsort(-sims[candidates], kind="stable")[:K]
    indices = candidates[order]
    return Neighborhood(
        query_id=exclude_id,
        indices=indices.astype(np.int64),
        sims=sims[indices],
        side=side,
        granularity=granularity,
    )


# ─── Dynamic refinement ─────────────────────────────────────────────


def should_refresh(epoch: int, period: int) -> bool:
    if period < 1:
        raise NonPositivePeriod(f"refresh period must be >= 1, got {period}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return epoch > 0 and epoch % period == 0


def refresh(
    fine: FineKB,
    coarse: CoarseKB,
    corpus: Any,
    audio_encoder: Encoder,
    text_encoder: Encoder,
    epoch: int,
    N_c: int,
    seed: int,
) -> Tuple[FineKB, CoarseKB]:
    new_fine = build_fine_kb(corpus, audio_encoder, text_encoder, epoch)
    if len(new_fine) != len(fine):
        raise IndexMisalignment(f"refresh corpus has {len(new_fine)} pairs, base had {len(fine)}")
    new_fine = FineKB(audio=new_fine.audio, text=new_fine.text, ids=fine.ids.copy(), built_at_epoch=int(epoch))
    new_coarse = build_coarse_kb(new_fine, N_c, seed)
    logger.info(
        "Knowledge bases refreshed at epoch %d (N_k=%d, N_c=%d, previous build epoch %d/%d)",
        epoch, len(new_fine), len(new_coarse), fine.built_at_epoch, coarse.built_at_epoch,
    )
    return new_fine, new_coarse


# ─── Snapshot export / import ───────────────────────────────────────


def _f32(block: np.ndarray) -> bytes:
    return np.ascontiguousarray(block, dtype="<f4").tobytes()


def snapshot_bytes(fine: FineKB, coarse: CoarseKB) -> bytes:
    if coarse.audio.shape[1] != fine.dim:
        raise EncoderDimensionMismatch("fine and coarse bases disagree on dimension")
    header = _SNAPSHOT_HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION, fine.dim, len(fine), len(coarse), fine.built_at_epoch
    )
    return header + _f32(fine.audio) + _f32(fine.text) + _f32(coarse.audio) + _f32(coarse.text)


def export_snapshot(fine: FineKB, coarse: CoarseKB, path: str | Path) -> Path:
    return atomic_write_bytes(path, snapshot_bytes(fine, coarse))


def parse_snapshot(payload: bytes) -> Tuple[FineKB, CoarseKB]:
    if len(payload) < _SNAPSHOT_HEADER.size:
        raise SnapshotFormatError("snapshot shorter than its header")
    magic, version, d, n_k, n_c, built_at = _SNAPSHOT_HEADER.unpack_from(payload, 0)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    expected = _SNAPSHOT_HEADER.size + 4 * d * (2 * n_k + 2 * n_c)
    if len(payload) != expected:
        raise SnapshotFormatError(f"snapshot has {len(payload)} bytes, expected {expected}")

    floats = np.frombuffer(payload, dtype="<f4", offset=_SNAPSHOT_HEADER.size).astype(np.float64)
    sizes = [n_k * d, n_k * d, n_c * d, n_c * d]
    blocks = np.split(floats, np.cumsum(sizes)[:-1])
    fine = FineKB(
        audio=blocks[0].reshape(n_k, d),
        text=blocks[1].reshape(n_k, d),
        ids=np.arange(n_k, dtype=np.int64),
        built_at_epoch=int(built_at),
    )
    coarse = CoarseKB(audio=blocks[2].reshape(n_c, d), text=blocks[3].reshape(n_c, d), built_at_epoch=int(built_at))
    return fine, coarse


def load_snapshot(path: str | Path) -> Tuple[FineKB, CoarseKB]:
    return parse_snapshot(Path(path).read_bytes())
