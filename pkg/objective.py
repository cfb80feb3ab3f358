"""
The ASK training objective.

Forward: inject retrieved knowledge into the batch embeddings, build
text-by-audio similarity matrices per granularity, realign them with a
Sinkhorn plan, score them with NT-Xent in both directions, and modulate each
direction by its reliability terms. Backward: analytic reverse-mode gradients
with retrieval indices, transport plans, reliability weights and the
knowledge-side vectors inside the potentials held constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core_math import as_matrix, as_vector, derive_seed, log_softmax_rows
from errors import EmptyBatch, EmptyOutOfBatchSet, NonPositivePotential, NonPositiveTau, ShapeMismatch
from injection import BatchRetrieval, inject_rows, inject_rows_backward, retrieve_batch
from knowledge_base import CoarseKB, FineKB, build_coarse_kb, resolve_num_prototypes
from ot_align import TransportPlan, mixing_matrix, sinkhorn
from reliability import potential_traces

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("baseline", "ask")
DIRECTIONS = ("t2a", "a2t")

PlanKey = Tuple[str, str]


class LossBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    l_t2a: float
    l_a2t: float
    f_f_t2a: float = 0.0
    f_c_t2a: float = 0.0
    f_f_a2t: float = 0.0
    f_c_a2t: float = 0.0
    l_star_t2a: float
    l_star_a2t: float
    total: float
    tau: float = Field(gt=0)
    lambda_f: float = Field(ge=0)
    lambda_c: float = Field(ge=0)


class OBIReport(BaseModel):
    loss_variant: str
    entry_ids: List[int]
    per_entry_grad_norms: List[float]
    mean: float = Field(ge=0)


@dataclass(frozen=True)
class EmbeddingGradients:
    audio: np.ndarray
    text: np.ndarray
    fine_audio: np.ndarray
    fine_text: np.ndarray
    coarse_audio: np.ndarray
    coarse_text: np.ndarray


@dataclass(frozen=True)
class Mechanisms:
    """Effective loss settings after ablation switches and the loss variant are applied."""

    rho: float
    beta: float
    lambda_f: float
    lambda_c: float
    use_fine: bool
    use_coarse: bool
    tau: float
    epsilon: float
    max_iters: int
    tol: float
    renormalize: bool
    plan_rescale: bool

    @property
    def granularities(self) -> Tuple[str, ...]:
        return tuple(g for g, on in (("fine", self.use_fine), ("coarse", self.use_coarse)) if on)

    @property
    def needs_retrieval(self) -> bool:
        return self.rho < 1.0 or self.lambda_f > 0 or self.lambda_c > 0


@dataclass(frozen=True)
class Evaluation:
    breakdown: LossBreakdown
    gradients: Optional[EmbeddingGradients]
    retrieval: Optional[BatchRetrieval]
    plans: Dict[PlanKey, TransportPlan]


def resolve_mechanisms(config: Any, variant: Optional[str] = None) -> Mechanisms:
    variant = variant or getattr(config, "loss_variant", "ask")
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    common = dict(
        tau=float(config.tau),
        epsilon=float(config.epsilon),
        max_iters=int(getattr(config, "sinkhorn_max_iters", 200)),
        tol=float(getattr(config, "sinkhorn_tol", 1e-6)),
        renormalize=bool(getattr(config, "renormalize_enhanced", True)),
        plan_rescale=bool(getattr(config, "plan_rescale", True)),
    )
    if variant == "baseline":
        return Mechanisms(rho=1.0, beta=0.0, lambda_f=0.0, lambda_c=0.0, use_fine=True, use_coarse=True, **common)
    use_fine = bool(getattr(config, "use_fine", True))
    use_coarse = bool(getattr(config, "use_coarse", True))
    reliable = bool(getattr(config, "use_reliability", True))
    return Mechanisms(
        rho=float(config.rho) if getattr(config, "use_injection", True) else 1.0,
        beta=float(config.beta) if getattr(config, "use_ot", True) else 0.0,
        lambda_f=float(config.lambda_f) if reliable and use_fine else 0.0,
        lambda_c=float(config.lambda_c) if reliable and use_coarse else 0.0,
        use_fine=use_fine,
        use_coarse=use_coarse,
        **common,
    )


# ─── Loss components ────────────────────────────────────────────────


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise NonPositiveTau(f"tau must be > 0, got {tau}")


def ntxent(S: np.ndarray, tau: float) -> float:
    """One-direction NT-Xent: rows are anchors, the diagonal holds the positives."""
    _check_tau(tau)
    sim = as_matrix(S)
    if sim.shape[0] != sim.shape[1]:
        raise ShapeMismatch(f"expected a square similarity matrix, got {sim.shape}")
    if sim.shape[0] == 0:
        raise EmptyBatch("similarity matrix is empty")
    log_probs = log_softmax_rows(sim / tau)
    return max(0.0, -float(np.mean(np.diag(log_probs))))


def ntxent_grad(S: np.ndarray, tau: float) -> np.ndarray:
    _check_tau(tau)
    sim = as_matrix(S)
    B = sim.shape[0]
    probs = np.exp(log_softmax_rows(sim / tau))
    return (probs - np.eye(B)) / (B * tau)


def directional_loss(S_star_f: np.ndarray, S_star_c: np.ndarray, tau: float) -> float:
    fine, coarse = as_matrix(S_star_f), as_matrix(S_star_c)
    if fine.shape != coarse.shape:
        raise ShapeMismatch(f"fine {fine.shape} vs coarse {coarse.shape}")
    return ntxent(fine, tau) + ntxent(coarse, tau)


def reliability_term(potentials: Sequence[float] | np.ndarray) -> float:
    psi = as_vector(potentials)
    if psi.size == 0:
        raise EmptyBatch("no potentials given")
    if not np.all(np.isfinite(psi)) or np.any(psi <= 0):
        raise NonPositivePotential("every potential must be finite and > 0")
    return float(np.mean(-np.log(psi)))


def modulated_loss(base: float, f_fine: float, f_coarse: float, lambda_f: float, lambda_c: float) -> float:
    return (1.0 + lambda_f * f_fine + lambda_c * f_coarse) * base


def baseline_loss(audio: np.ndarray, text: np.ndarray, tau: float) -> float:
    """Symmetric NT-Xent on raw embeddings: ntxent(S) + ntxent(S^T) with S = V U^T."""
    S = as_matrix(text) @ as_matrix(audio).T
    return ntxent(S, tau) + ntxent(S.T, tau)


# ─── Forward / backward ─────────────────────────────────────────────


def batch_arrays(batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    pairs = list(batch)
    if not pairs:
        raise EmptyBatch("batch is empty")
    U = as_matrix([as_vector(u) for u, _ in pairs])
    V = as_matrix([as_vector(v) for _, v in pairs])
    return U, V


def _solve_plan(S: np.ndarray, mech: Mechanisms) -> TransportPlan:
    return sinkhorn(S, epsilon=mech.epsilon, max_iters=mech.max_iters, tol=mech.tol)


def evaluate(
    audio: np.ndarray,
    text: np.ndarray,
    fine: FineKB,
    coarse: CoarseKB,
    config: Any,
    self_ids: Optional[Sequence[int]] = None,
    *,
    variant: Optional[str] = None,
    retrieval: Optional[BatchRetrieval] = None,
    plans: Optional[Mapping[PlanKey, TransportPlan]] = None,
    injection_kb: Optional[Mapping[str, np.ndarray]] = None,
    with_grad: bool = True,
) -> Evaluation:
    """Loss and (optionally) gradients for one batch of embeddings.

    ``retrieval`` and ``plans`` pin the stop-gradient constants of a step.
    ``injection_kb`` overrides the knowledge vectors on the injection path only
    (keys ``fine_audio``, ``fine_text``, ``coarse_audio``, ``coarse_text``).
    """
    mech = resolve_mechanisms(config, variant)
    U, V = as_matrix(audio), as_matrix(text)
    if U.shape != V.shape or U.shape[0] == 0:
        raise ShapeMismatch(f"audio {U.shape} vs text {V.shape}")
    B = U.shape[0]
    K = int(config.K)

    if retrieval is None and mech.needs_retrieval:
        retrieval = retrieve_batch(U, V, fine, coarse, K, self_ids)
    kb_vectors = {
        "fine_audio": fine.audio,
        "fine_text": fine.text,
        "coarse_audio": coarse.audio,
        "coarse_text": coarse.text,
    }
    kb_vectors.update(injection_kb or {})
    solved: Dict[PlanKey, TransportPlan] = dict(plans or {})

    # forward per granularity
    cache: Dict[str, dict] = {}
    losses = {"t2a": 0.0, "a2t": 0.0}
    for g in mech.granularities:
        entry: dict = {}
        if mech.rho < 1.0:
            a_idx = getattr(retrieval, f"{g}_audio")
            t_idx = getattr(retrieval, f"{g}_text")
            Ue, _, u_norms = inject_rows(U, kb_vectors[f"{g}_audio"], a_idx, mech.rho, mech.renormalize)
            Ve, _, v_norms = inject_rows(V, kb_vectors[f"{g}_text"], t_idx, mech.rho, mech.renormalize)
            entry.update(u_norms=u_norms, v_norms=v_norms, a_idx=a_idx, t_idx=t_idx)
        else:
            Ue, Ve = U, V
        S = Ve @ Ue.T
        entry.update(Ue=Ue, Ve=Ve)
        for direction, sim in (("t2a", S), ("a2t", S.T)):
            if mech.beta > 0:
                key = (g, direction)
                if key not in solved:
                    solved[key] = _solve_plan(sim, mech)
                M = mixing_matrix(solved[key], mech.beta, mech.plan_rescale)
            else:
                M = None
            S_star = sim if M is None else M @ sim
            losses[direction] += ntxent(S_star, mech.tau)
            entry[direction] = (M, S_star)
        cache[g] = entry

    traces = {}
    f_terms = {(g, d): 0.0 for g in ("fine", "coarse") for d in DIRECTIONS}
    if mech.lambda_f > 0 or mech.lambda_c > 0:
        traces = potential_traces(U, V, fine, coarse, retrieval)
        for g in mech.granularities:
            for d in DIRECTIONS:
                f_terms[(g, d)] = reliability_term(traces[(g, d)].psi)

    weights = {"fine": mech.lambda_f, "coarse": mech.lambda_c}
    factors = {
        d: 1.0 + mech.lambda_f * f_terms[("fine", d)] + mech.lambda_c * f_terms[("coarse", d)]
        for d in DIRECTIONS
    }
    l_star = {d: modulated_loss(losses[d], f_terms[("fine", d)], f_terms[("coarse", d)], mech.lambda_f, mech.lambda_c)
              for d in DIRECTIONS}
    breakdown = LossBreakdown(
        l_t2a=losses["t2a"],
        l_a2t=losses["a2t"],
        f_f_t2a=f_terms[("fine", "t2a")],
        f_c_t2a=f_terms[("coarse", "t2a")],
        f_f_a2t=f_terms[("fine", "a2t")],
        f_c_a2t=f_terms[("coarse", "a2t")],
        l_star_t2a=l_star["t2a"],
        l_star_a2t=l_star["a2t"],
        total=0.5 * (l_star["t2a"] + l_star["a2t"]),
        tau=mech.tau,
        lambda_f=mech.lambda_f,
        lambda_c=mech.lambda_c,
    )
    if not with_grad:
        return Evaluation(breakdown=breakdown, gradients=None, retrieval=retrieval, plans=solved)

    # backward
    dU = np.zeros_like(U)
    dV = np.zeros_like(V)
    kb_grads = {name: np.zeros_like(vectors) for name, vectors in kb_vectors.items()}
    for g, entry in cache.items():
        dS = np.zeros((B, B))
        for direction in DIRECTIONS:
            M, S_star = entry[direction]
            upstream = 0.5 * factors[direction] * ntxent_grad(S_star, mech.tau)
            d_sim = upstream if M is None else M.T @ upstream
            dS += d_sim if direction == "t2a" else d_sim.T
        dVe = dS @ entry["Ue"]
        dUe = dS.T @ entry["Ve"]
        if mech.rho < 1.0:
            du, dka = inject_rows_backward(
                dUe, entry["Ue"], entry["u_norms"], entry["a_idx"],
                kb_vectors[f"{g}_audio"].shape[0], mech.rho, mech.renormalize,
            )
            dv, dkt = inject_rows_backward(
                dVe, entry["Ve"], entry["v_norms"], entry["t_idx"],
                kb_vectors[f"{g}_text"].shape[0], mech.rho, mech.renormalize,
            )
            dU += du
            dV += dv
            kb_grads[f"{g}_audio"] += dka
            kb_grads[f"{g}_text"] += dkt
        else:
            dU += dUe
            dV += dVe

    for (g, direction), trace in traces.items():
        if g not in mech.granularities or weights[g] == 0:
            continue
        # d f / d psi_i = -1 / (B psi_i)
        scale = 0.5 * weights[g] * losses[direction] * (-1.0 / (B * trace.psi))
        grad = scale[:, None] * trace.grad_anchor()
        if direction == "t2a":
            dU += grad
        else:
            dV += grad

    gradients = EmbeddingGradients(
        audio=dU,
        text=dV,
        fine_audio=kb_grads["fine_audio"],
        fine_text=kb_grads["fine_text"],
        coarse_audio=kb_grads["coarse_audio"],
        coarse_text=kb_grads["coarse_text"],
    )
    return Evaluation(breakdown=breakdown, gradients=gradients, retrieval=retrieval, plans=solved)


def ask_loss(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    fine: FineKB,
    coarse: CoarseKB,
    config: Any,
    self_ids: Optional[Sequence[int]] = None,
) -> LossBreakdown:
    U, V = batch_arrays(batch)
    return evaluate(U, V, fine, coarse, config, self_ids, with_grad=False).breakdown


def grad_embeddings(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    fine: FineKB,
    coarse: CoarseKB,
    config: Any,
    self_ids: Optional[Sequence[int]] = None,
) -> EmbeddingGradients:
    U, V = batch_arrays(batch)
    return evaluate(U, V, fine, coarse, config, self_ids).gradients


# ─── Out-of-batch influence ─────────────────────────────────────────


def obi(
    batch: Sequence[Tuple[np.ndarray, np.ndarray]],
    kb: FineKB,
    config: Any,
    loss_variant: str,
    coarse: Optional[CoarseKB] = None,
    batch_ids: Optional[Sequence[int]] = None,
) -> OBIReport:
    """Mean of ||dL/du_k|| + ||dL/dv_k|| over fine entries whose ids are not in the batch."""
    positions = out_of_batch_positions(kb, batch_ids)
    if not positions:
        raise EmptyOutOfBatchSet("every knowledge-base entry belongs to the batch")
    if coarse is None:
        n_c, warning = resolve_num_prototypes(int(config.N_c), len(kb))
        if warning:
            logger.warning(warning)
        coarse = build_coarse_kb(kb, n_c, derive_seed(int(config.seed), "kmeans"))

    self_ids = batch_ids if getattr(config, "self_exclude", True) else None
    U, V = batch_arrays(batch)
    grads = evaluate(U, V, kb, coarse, config, self_ids, variant=loss_variant).gradients
    return obi_from_gradients(grads, kb, positions, loss_variant)


def obi_from_gradients(
    grads: EmbeddingGradients,
    kb: FineKB,
    positions: Sequence[int],
    loss_variant: str,
) -> OBIReport:
    idx = np.asarray(positions, dtype=np.int64)
    norms = np.linalg.norm(grads.fine_audio[idx], axis=1) + np.linalg.norm(grads.fine_text[idx], axis=1)
    return OBIReport(
        loss_variant=loss_variant,
        entry_ids=[int(kb.ids[p]) for p in idx],
        per_entry_grad_norms=[float(n) for n in norms],
        mean=float(norms.mean()),
    )


def out_of_batch_positions(kb: FineKB, batch_ids: Optional[Sequence[int]]) -> List[int]:
    in_batch = set() if batch_ids is None else {int(i) for i in batch_ids}
    return [pos for pos, entry_id in enumerate(kb.ids) if int(entry_id) not in in_batch]
