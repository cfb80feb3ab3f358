"""
Desk-scale ASK training: toy linear dual encoders, seeded long-tail paired
corpora, the training loop with periodic knowledge-base refresh, and
cross-modal retrieval evaluation.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from artifacts import atomic_write_bytes
from core_math import as_matrix, as_vector, derive_rng, derive_seed, l2_normalize, l2_normalize_rows
from diagnostics import RDMReport, rdm
from errors import (
    CorpusFormatError,
    DimensionMismatch,
    EmptyCorpus,
    InvalidCounts,
    KExceedsPoolSize,
    KTooLarge,
    LengthMismatch,
    SnapshotFormatError,
)
from knowledge_base import (
    CoarseKB,
    FineKB,
    build_coarse_kb,
    build_fine_kb,
    corpus_arrays,
    refresh,
    resolve_num_prototypes,
    should_refresh,
)
from objective import evaluate, obi_from_gradients, out_of_batch_positions, resolve_mechanisms

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"ASKW"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<4sIII")

METRIC_COLUMNS = ("epoch", "loss_total", "loss_t2a", "loss_a2t", "obi", "rdm", "refreshed")
DEFAULT_RECALL_KS = (1, 5, 10)


# ─── Encoders ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class ToyEncoder:
    """Linear map followed by L2 normalisation."""

    W: np.ndarray
    kind: str = "audio"

    @classmethod
    def initialize(cls, kind: str, d: int, d_in: int, seed: int) -> "ToyEncoder":
        rng = derive_rng(seed, f"init:{kind}")
        return cls(W=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d, d_in)), kind=kind)

    @property
    def d(self) -> int:
        return int(self.W.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.W.shape[1])

    def with_weights(self, W: np.ndarray) -> "ToyEncoder":
        return ToyEncoder(W=np.asarray(W, dtype=np.float64), kind=self.kind)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        features = as_matrix(X)
        if features.shape[1] != self.d_in:
            raise DimensionMismatch(f"{self.kind} encoder expects d_in={self.d_in}, got {features.shape[1]}")
        return l2_normalize_rows(features @ self.W.T)


def encoder_forward(enc: ToyEncoder, x: np.ndarray) -> np.ndarray:
    vec = as_vector(x)
    if vec.shape[0] != enc.d_in:
        raise DimensionMismatch(f"{enc.kind} encoder expects d_in={enc.d_in}, got {vec.shape[0]}")
    return l2_normalize(enc.W @ vec)


def encoder_backward(enc: ToyEncoder, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """dL/dW given dL/du for u = Wx / ||Wx||."""
    vec = as_vector(x)
    y = enc.W @ vec
    norm = float(np.linalg.norm(y))
    u = y / norm
    g = as_vector(grad_out)
    tangent = (g - u * float(u @ g)) / norm
    return np.outer(tangent, vec)


def encoder_backward_batch(enc: ToyEncoder, X: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    features = as_matrix(X)
    Y = features @ enc.W.T
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    U = Y / norms
    G = as_matrix(grad_out)
    tangent = (G - U * np.einsum("bd,bd->b", U, G)[:, None]) / norms
    return tangent.T @ features


# ─── Corpora ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CorpusSplit:
    audio: np.ndarray
    text: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return int(self.audio.shape[0])


@dataclass(frozen=True)
class SyntheticCorpus:
    """Paired features with a shared latent per item; ground truth is index identity."""

    audio: np.ndarray
    text: np.ndarray
    ids: np.ndarray
    cluster_ids: Optional[np.ndarray]
    tail_clusters: Tuple[int, ...]
    train_idx: np.ndarray
    eval_idx: np.ndarray

    def __len__(self) -> int:
        return int(self.audio.shape[0])

    @property
    def pairs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.audio, self.text))

    def split(self, name: str) -> CorpusSplit:
        if name == "train":
            idx = self.train_idx
        elif name == "eval":
            idx = self.eval_idx
        elif name == "all":
            idx = np.arange(len(self))
        else:
            raise ValueError(f"unknown split {name!r}")
        if idx.size == 0:
            raise EmptyCorpus(f"split {name!r} is empty")
        return CorpusSplit(audio=self.audio[idx], text=self.text[idx], ids=self.ids[idx])


def _split_indices(n: int, eval_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = derive_rng(seed, "split").permutation(n)
    n_eval = int(round(n * eval_fraction))
    if n_eval >= n:
        raise InvalidCounts(f"eval_fraction {eval_fraction} leaves no training pairs out of {n}")
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def gen_synthetic_corpus(
    n_clusters: int,
    head_size: int,
    tail_size: int,
    n_tail: int,
    d_in: int,
    noise_sigma: float,
    seed: int,
    d_latent: int = 8,
    item_spread: float = 0.5,
    eval_fraction: float = 0.2,
) -> SyntheticCorpus:
    if min(n_clusters, head_size, tail_size, n_tail, d_in, d_latent) < 1:
        raise InvalidCounts("all counts must be >= 1")
    if tail_size >= head_size:
        raise InvalidCounts(f"tail_size {tail_size} must be smaller than head_size {head_size}")
    if n_tail >= n_clusters:
        raise InvalidCounts(f"n_tail {n_tail} must be smaller than n_clusters {n_clusters}")
    if noise_sigma < 0:
        raise InvalidCounts(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = derive_rng(seed, "corpus")
    centers = rng.standard_normal((n_clusters, d_latent))
    mix_audio = rng.standard_normal((d_in, d_latent)) / np.sqrt(d_latent)
    mix_text = rng.standard_normal((d_in, d_latent)) / np.sqrt(d_latent)

    n_head = n_clusters - n_tail
    sizes = [head_size] * n_head + [tail_size] * n_tail
    cluster_ids = np.repeat(np.arange(n_clusters), sizes)
    n = cluster_ids.shape[0]
    latent = centers[cluster_ids] + item_spread * rng.standard_normal((n, d_latent))
    audio = latent @ mix_audio.T + noise_sigma * rng.standard_normal((n, d_in))
    text = latent @ mix_text.T + noise_sigma * rng.standard_normal((n, d_in))

    train_idx, eval_idx = _split_indices(n, eval_fraction, seed)
    logger.info(
        "Generated synthetic corpus: %d pairs, %d head clusters x %d, %d tail clusters x %d",
        n, n_head, head_size, n_tail, tail_size,
    )
    return SyntheticCorpus(
        audio=audio,
        text=text,
        ids=np.arange(n, dtype=np.int64),
        cluster_ids=cluster_ids,
        tail_clusters=tuple(range(n_head, n_clusters)),
        train_idx=train_idx,
        eval_idx=eval_idx,
    )


def load_corpus_jsonl(path: str | os.PathLike, eval_fraction: float = 0.2, seed: int = 0) -> SyntheticCorpus:
    """One JSON object per line: {"id": int, "audio": [floats], "text": [floats]}."""
    ids: List[int] = []
    audio: List[List[float]] = []
    text: List[List[float]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ids.append(int(record["id"]))
                audio.append([float(x) for x in record["audio"]])
                text.append([float(x) for x in record["text"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
            if len(audio[-1]) != len(audio[0]) or len(text[-1]) != len(audio[0]):
                raise DimensionMismatch(f"{path}:{lineno}: feature length differs from line 1")
    if not ids:
        raise EmptyCorpus(f"{path} has no pairs")

    n = len(ids)
    train_idx, eval_idx = _split_indices(n, eval_fraction, seed)
    return SyntheticCorpus(
        audio=np.asarray(audio, dtype=np.float64),
        text=np.asarray(text, dtype=np.float64),
        ids=np.asarray(ids, dtype=np.int64),
        cluster_ids=None,
        tail_clusters=(),
        train_idx=train_idx,
        eval_idx=eval_idx,
    )


# ─── Retrieval evaluation ───────────────────────────────────────────


def _ranks(scores: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry in each row; ties go to the lower column index."""
    n = scores.shape[0]
    positive = np.diag(scores)[:, None]
    greater = (scores > positive).sum(axis=1)
    earlier = np.arange(n)[None, :] < np.arange(n)[:, None]
    tied_before = ((scores == positive) & earlier).sum(axis=1)
    return greater + tied_before


def recall_at_k(audio_embs: np.ndarray, text_embs: np.ndarray, ks: Sequence[int]) -> Dict[str, float]:
    """R@k percentages keyed ``T2A_R@k`` and ``A2T_R@k``."""
    A, T = as_matrix(audio_embs), as_matrix(text_embs)
    if A.shape[0] != T.shape[0]:
        raise LengthMismatch(f"{A.shape[0]} audio vs {T.shape[0]} text embeddings")
    n = A.shape[0]
    for k in ks:
        if k < 1 or k > n:
            raise KExceedsPoolSize(f"k={k} outside [1, {n}]")
    scores = T @ A.T
    ranks = {"T2A": _ranks(scores), "A2T": _ranks(scores.T)}
    table: Dict[str, float] = {}
    for direction in ("T2A", "A2T"):
        for k in ks:
            table[f"{direction}_R@{k}"] = 100.0 * float(np.mean(ranks[direction] < k))
    return table


def capped_ks(ks: Sequence[int], pool_size: int) -> Tuple[List[int], List[str]]:
    used, warnings = [], []
    for k in ks:
        if k > pool_size:
            message = f"recall k={k} exceeds pool size {pool_size}; capped"
            logger.warning(message)
            warnings.append(message)
            k = pool_size
        used.append(int(k))
    return used, warnings


# ─── Reports ────────────────────────────────────────────────────────


class EpochMetrics(BaseModel):
    epoch: int = Field(ge=0)
    learning_rate: float
    loss_total: float
    loss_t2a: float
    loss_a2t: float
    obi: float = Field(ge=0)
    rdm: float = Field(ge=0)
    refreshed: bool = False
    post_refresh_rdm: Optional[float] = None
    kb_epoch: int = 0
    unconverged_plans: int = Field(default=0, ge=0)

    def csv_row(self) -> List[Any]:
        return [
            self.epoch,
            repr(self.loss_total),
            repr(self.loss_t2a),
            repr(self.loss_a2t),
            repr(self.obi),
            repr(self.rdm),
            int(self.refreshed),
        ]


class TrainReport(BaseModel):
    loss_variant: str
    seed: int
    n_train: int
    n_eval: int
    num_prototypes: int
    epochs: List[EpochMetrics]
    refresh_epochs: List[int]
    recall: Dict[str, float]
    eval_split: str = "eval"
    warnings: List[str] = Field(default_factory=list)

    def csv_rows(self) -> List[List[Any]]:
        return [item.csv_row() for item in self.epochs]


@dataclass
class TrainingRun:
    report: TrainReport
    audio_encoder: ToyEncoder
    text_encoder: ToyEncoder
    fine: FineKB
    coarse: CoarseKB
    snapshots: List[Tuple[int, ToyEncoder]] = field(default_factory=list)


# ─── Training loop ──────────────────────────────────────────────────


def measure_rdm(audio_encoder: ToyEncoder, kb_source: Any, fine: FineKB, epoch: int, temperature: float = 1.0) -> RDMReport:
    """RDM of the current audio encoder against the base in use."""
    raw_audio, _ = corpus_arrays(kb_source)
    current = audio_encoder(raw_audio)
    return rdm(current, current, fine.audio, temperature, model_epoch=epoch, kb_epoch=fine.built_at_epoch)


def _check_retrieval_budget(config: Any, n_entries: int, n_prototypes: int, exclude: bool) -> None:
    mech = resolve_mechanisms(config)
    if not mech.needs_retrieval:
        return
    usable = n_entries - (1 if exclude else 0)
    if config.K > usable:
        raise KTooLarge(f"K={config.K} but only {usable} usable knowledge entries")
    if mech.use_coarse and config.K > n_prototypes:
        raise KTooLarge(f"K={config.K} exceeds {n_prototypes} prototypes")


def run_training(config: Any, corpus: SyntheticCorpus, kb_corpus: Any = None) -> TrainingRun:
    seed = int(config.seed)
    train_split = corpus.split("train")
    n_train = len(train_split)
    if n_train < config.batch_size:
        raise InvalidCounts(f"train split has {n_train} pairs, fewer than batch_size {config.batch_size}")

    kb_source = train_split if kb_corpus is None else kb_corpus
    exclude = kb_corpus is None and bool(config.self_exclude)
    n_entries = corpus_arrays(kb_source)[0].shape[0]
    num_prototypes, warning = resolve_num_prototypes(int(config.N_c), n_entries)
    warnings = [warning] if warning else []
    if warning:
        logger.warning(warning)
    _check_retrieval_budget(config, n_entries, num_prototypes, exclude)

    audio_enc = ToyEncoder.initialize("audio", config.d, config.d_in, seed)
    text_enc = ToyEncoder.initialize("text", config.d, config.d_in, seed)
    kmeans_seed = derive_seed(seed, "kmeans")
    fine = build_fine_kb(kb_source, audio_enc, text_enc, epoch=0)
    coarse = build_coarse_kb(fine, num_prototypes, kmeans_seed)
    logger.info("Built knowledge bases at epoch 0 (N_k=%d, N_c=%d)", len(fine), len(coarse))

    variant = config.loss_variant
    epochs: List[EpochMetrics] = []
    refresh_epochs: List[int] = []
    snapshots: List[Tuple[int, ToyEncoder]] = [(0, audio_enc)]
    for epoch in range(config.epochs):
        refreshed = False
        post_refresh = None
        drift = measure_rdm(audio_enc, kb_source, fine, epoch)
        if config.refresh_period is not None and should_refresh(epoch, config.refresh_period):
            fine, coarse = refresh(fine, coarse, kb_source, audio_enc, text_enc, epoch, num_prototypes, kmeans_seed)
            post_refresh = measure_rdm(audio_enc, kb_source, fine, epoch).mean
            refreshed = True
            refresh_epochs.append(epoch)

        lr = config.learning_rate_at(epoch)
        order = derive_rng(seed, f"shuffle:{epoch}").permutation(n_train)
        totals = {"total": 0.0, "t2a": 0.0, "a2t": 0.0}
        obi_values: List[float] = []
        n_batches = 0
        n_plans = 0
        unconverged = 0
        for start in range(0, n_train, config.batch_size):
            positions = order[start:start + config.batch_size]
            Xa, Xt = train_split.audio[positions], train_split.text[positions]
            U, V = audio_enc(Xa), text_enc(Xt)
            batch_ids = positions if exclude else None
            result = evaluate(U, V, fine, coarse, config, batch_ids)
            grads = result.gradients
            n_plans += len(result.plans)
            unconverged += sum(1 for plan in result.plans.values() if not plan.converged)

            out_of_batch = out_of_batch_positions(fine, batch_ids)
            if out_of_batch:
                obi_values.append(obi_from_gradients(grads, fine, out_of_batch, variant).mean)

            audio_enc = audio_enc.with_weights(audio_enc.W - lr * encoder_backward_batch(audio_enc, Xa, grads.audio))
            text_enc = text_enc.with_weights(text_enc.W - lr * encoder_backward_batch(text_enc, Xt, grads.text))

            totals["total"] += result.breakdown.total
            totals["t2a"] += result.breakdown.l_star_t2a
            totals["a2t"] += result.breakdown.l_star_a2t
            n_batches += 1

        metrics = EpochMetrics(
            epoch=epoch,
            learning_rate=lr,
            loss_total=totals["total"] / n_batches,
            loss_t2a=totals["t2a"] / n_batches,
            loss_a2t=totals["a2t"] / n_batches,
            obi=float(np.mean(obi_values)) if obi_values else 0.0,
            rdm=drift.mean,
            refreshed=refreshed,
            post_refresh_rdm=post_refresh,
            kb_epoch=fine.built_at_epoch,
            unconverged_plans=unconverged,
        )
        epochs.append(metrics)
        if unconverged:
            logger.warning(
                "epoch %d: Sinkhorn hit max_iters=%d on %d of %d plans",
                epoch, config.sinkhorn_max_iters, unconverged, n_plans,
            )
        snapshots.append((epoch + 1, audio_enc))
        logger.info(
            "epoch %d: loss %.6f (t2a %.6f, a2t %.6f) obi %.3e rdm %.3e%s",
            epoch, metrics.loss_total, metrics.loss_t2a, metrics.loss_a2t, metrics.obi, metrics.rdm,
            " [refreshed]" if refreshed else "",
        )

    eval_name = getattr(config, "eval_split", "eval")
    eval_split = corpus.split(eval_name)
    ks, cap_warnings = capped_ks(getattr(config, "recall_ks", DEFAULT_RECALL_KS), len(eval_split))
    recall = recall_at_k(audio_enc(eval_split.audio), text_enc(eval_split.text), ks)

    report = TrainReport(
        loss_variant=variant,
        seed=seed,
        n_train=n_train,
        n_eval=len(eval_split),
        num_prototypes=num_prototypes,
        epochs=epochs,
        refresh_epochs=refresh_epochs,
        recall={key: round(value, 2) for key, value in recall.items()},
        eval_split=eval_name,
        warnings=warnings + cap_warnings,
    )
    return TrainingRun(
        report=report, audio_encoder=audio_enc, text_encoder=text_enc, fine=fine, coarse=coarse, snapshots=snapshots
    )


def train(config: Any, corpus: SyntheticCorpus, kb_corpus: Any = None) -> TrainReport:
    return run_training(config, corpus, kb_corpus).report


# ─── Encoder weight files ───────────────────────────────────────────


def weights_bytes(audio_encoder: ToyEncoder, text_encoder: ToyEncoder) -> bytes:
    if audio_encoder.W.shape != text_encoder.W.shape:
        raise DimensionMismatch(f"audio W {audio_encoder.W.shape} vs text W {text_encoder.W.shape}")
    d, d_in = audio_encoder.W.shape
    header = _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, d, d_in)
    body = b"".join(np.ascontiguousarray(enc.W, dtype="<f4").tobytes() for enc in (audio_encoder, text_encoder))
    return header + body


def export_weights(audio_encoder: ToyEncoder, text_encoder: ToyEncoder, path: str | os.PathLike) -> Path:
    return atomic_write_bytes(path, weights_bytes(audio_encoder, text_encoder))


def parse_weights(payload: bytes) -> Tuple[ToyEncoder, ToyEncoder]:
    if len(payload) < _WEIGHTS_HEADER.size:
        raise SnapshotFormatError("weights file shorter than its header")
    magic, version, d, d_in = _WEIGHTS_HEADER.unpack_from(payload)
    if magic != WEIGHTS_MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise SnapshotFormatError(f"unsupported weights version {version}")
    block = d * d_in * 4
    if len(payload) != _WEIGHTS_HEADER.size + 2 * block:
        raise SnapshotFormatError(f"expected {2 * block} weight bytes, got {len(payload) - _WEIGHTS_HEADER.size}")
    offset = _WEIGHTS_HEADER.size
    audio = np.frombuffer(payload, dtype="<f4", count=d * d_in, offset=offset).reshape(d, d_in)
    text = np.frombuffer(payload, dtype="<f4", count=d * d_in, offset=offset + block).reshape(d, d_in)
    return (
        ToyEncoder(W=audio.astype(np.float64), kind="audio"),
        ToyEncoder(W=text.astype(np.float64), kind="text"),
    )


def load_weights(path: str | os.PathLike) -> Tuple[ToyEncoder, ToyEncoder]:
    return parse_weights(Path(path).read_bytes())
