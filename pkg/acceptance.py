"""
Fast executable acceptance checks, run by ``cli selftest``.

Each check returns a CheckResult; none of them raise on failure. The long
statistical sweeps live in scripts/run_acceptance_matrix.py.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel

from core_math import derive_rng, fd_gradient, l2_normalize_rows, relative_error
from diagnostics import random_bound_trials, rdm
from experiment_schema import TrainConfig
from injection import inject_rows_backward
from knowledge_base import CoarseKB, FineKB, build_coarse_kb
from objective import baseline_loss, evaluate, obi
from ot_align import sinkhorn
from trainer import gen_synthetic_corpus, train

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
REDUCTION_TOLERANCE = 1e-10


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class SelftestReport(BaseModel):
    seed: int
    checks: List[CheckResult]
    passed: bool


@dataclass(frozen=True)
class Fixture:
    audio: np.ndarray
    text: np.ndarray
    fine: FineKB
    coarse: CoarseKB
    batch_ids: np.ndarray


def make_fixture(seed: int, batch_size: int = 4, n_entries: int = 12, d: int = 4, n_prototypes: int = 4) -> Fixture:
    """Random unit embeddings where the batch is the first ``batch_size`` KB entries."""
    rng = derive_rng(seed, "fixture")
    kb_audio = l2_normalize_rows(rng.standard_normal((n_entries, d)))
    kb_text = l2_normalize_rows(kb_audio + 0.5 * rng.standard_normal((n_entries, d)))
    fine = FineKB(audio=kb_audio, text=kb_text, ids=np.arange(n_entries, dtype=np.int64), built_at_epoch=0)
    coarse = build_coarse_kb(fine, n_prototypes, seed)
    batch_ids = np.arange(batch_size, dtype=np.int64)
    return Fixture(
        audio=kb_audio[:batch_size].copy(),
        text=kb_text[:batch_size].copy(),
        fine=fine,
        coarse=coarse,
        batch_ids=batch_ids,
    )


def fixture_config(**overrides) -> TrainConfig:
    values = dict(d_in=4, d=4, K=3, N_c=4, tau=0.5, epsilon=0.5, sinkhorn_tol=1e-12, sinkhorn_max_iters=2000)
    values.update(overrides)
    return TrainConfig(**values)


KB_BLOCKS = ("fine_audio", "fine_text", "coarse_audio", "coarse_text")


def gradient_errors(fixture: Fixture, config: TrainConfig, h: float = 1e-5) -> Dict[str, float]:
    """Relative errors of analytic against central-difference gradients, per embedding and KB block."""
    base = evaluate(fixture.audio, fixture.text, fixture.fine, fixture.coarse, config, fixture.batch_ids)
    frozen = dict(retrieval=base.retrieval, plans=base.plans, with_grad=False)

    def loss_of_audio(U: np.ndarray) -> float:
        return evaluate(U, fixture.text, fixture.fine, fixture.coarse, config, fixture.batch_ids, **frozen).breakdown.total

    def loss_of_text(V: np.ndarray) -> float:
        return evaluate(fixture.audio, V, fixture.fine, fixture.coarse, config, fixture.batch_ids, **frozen).breakdown.total

    def loss_of_block(name: str) -> Callable[[np.ndarray], float]:
        def loss(vectors: np.ndarray) -> float:
            return evaluate(
                fixture.audio, fixture.text, fixture.fine, fixture.coarse, config, fixture.batch_ids,
                injection_kb={name: vectors}, **frozen,
            ).breakdown.total
        return loss

    grads = base.gradients
    errors = {
        "audio": relative_error(grads.audio, fd_gradient(loss_of_audio, fixture.audio, h)),
        "text": relative_error(grads.text, fd_gradient(loss_of_text, fixture.text, h)),
    }
    for name in KB_BLOCKS:
        granularity, side = name.split("_")
        kb = fixture.fine if granularity == "fine" else fixture.coarse
        errors[name] = relative_error(getattr(grads, name), fd_gradient(loss_of_block(name), kb.side(side), h))
    return errors


def random_gradient_case(seed: int) -> Tuple[Fixture, TrainConfig]:
    """A fixture of random size (B<=8, d<=16, K<=5) with every other setting at its default."""
    rng = derive_rng(seed, "gradient-case")
    K = int(rng.integers(1, 6))
    batch_size = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    n_entries = batch_size + int(rng.integers(K, K + 6))
    n_prototypes = int(rng.integers(K, min(n_entries, K + 3) + 1))
    fixture = make_fixture(seed, batch_size=batch_size, n_entries=n_entries, d=d, n_prototypes=n_prototypes)
    return fixture, TrainConfig(d_in=d, d=d, K=K, N_c=n_prototypes)


# ─── Checks ─────────────────────────────────────────────────────────


def check_baseline_obi_zero(seed: int) -> CheckResult:
    fixture = make_fixture(seed)
    batch = list(zip(fixture.audio, fixture.text))
    report = obi(batch, fixture.fine, fixture_config(), "baseline", coarse=fixture.coarse, batch_ids=fixture.batch_ids)
    return CheckResult(name="baseline_obi_zero", passed=report.mean == 0.0, detail=f"mean={report.mean!r}")


def check_ask_obi_positive(seed: int) -> CheckResult:
    fixture = make_fixture(seed)
    batch = list(zip(fixture.audio, fixture.text))
    report = obi(batch, fixture.fine, fixture_config(rho=0.2), "ask", coarse=fixture.coarse, batch_ids=fixture.batch_ids)
    return CheckResult(name="ask_obi_positive", passed=report.mean > 0.0, detail=f"mean={report.mean:.6e}")


def check_injection_jacobian(seed: int) -> CheckResult:
    rho, K = 0.2, 3
    rng = derive_rng(seed, "jacobian")
    upstream = rng.standard_normal((1, 4))
    indices = np.array([[0, 1, 2]])
    _, grad_kb = inject_rows_backward(upstream, upstream, np.ones((1, 1)), indices, 5, rho, renormalize=False)
    expected = (1.0 - rho) / K * upstream[0]
    ok = all(np.allclose(grad_kb[k], expected, atol=1e-15) for k in range(3)) and not grad_kb[3:].any()
    return CheckResult(name="injection_jacobian", passed=bool(ok), detail=f"(1-rho)/K={(1.0 - rho) / K:.6f}")


def check_rdm_reset(seed: int) -> CheckResult:
    vectors = l2_normalize_rows(derive_rng(seed, "rdm").standard_normal((10, 4)))
    report = rdm(vectors, vectors, vectors)
    return CheckResult(name="rdm_reset", passed=report.mean <= 1e-9, detail=f"mean={report.mean:.3e}")


def check_pinsker(seed: int, trials: int = 200) -> CheckResult:
    satisfied, total = random_bound_trials(trials, n_entries=8, dim=4, seed=seed)
    return CheckResult(name="pinsker_bound", passed=satisfied == total, detail=f"{satisfied}/{total}")


def check_sinkhorn(seed: int) -> CheckResult:
    S = derive_rng(seed, "sinkhorn").uniform(-1.0, 1.0, size=(8, 8))
    plan = sinkhorn(S, epsilon=0.5, max_iters=1000, tol=1e-9, track_objective=True)
    steps = np.diff(np.asarray(plan.dual_trace))
    monotone = bool(np.all(steps >= -1e-10))
    feasible = plan.converged and plan.marginal_violation() < 1e-6
    return CheckResult(
        name="sinkhorn_feasibility",
        passed=feasible and monotone,
        detail=f"violation={plan.marginal_violation():.3e} iterations={plan.iterations_used}",
    )


def check_gradients(seed: int, trials: int = 3) -> CheckResult:
    worst = 0.0
    for trial in range(trials):
        fixture, config = random_gradient_case(seed + trial)
        worst = max(worst, *gradient_errors(fixture, config).values())
    return CheckResult(name="gradient_fidelity", passed=worst <= GRADIENT_TOLERANCE, detail=f"max_rel_err={worst:.3e}")


def check_baseline_reduction(seed: int) -> CheckResult:
    fixture = make_fixture(seed)
    config = fixture_config(rho=1.0, beta=0.0, lambda_f=0.0, lambda_c=0.0)
    total = evaluate(fixture.audio, fixture.text, fixture.fine, fixture.coarse, config, with_grad=False).breakdown.total
    reference = baseline_loss(fixture.audio, fixture.text, config.tau)
    gap = abs(total - reference)
    return CheckResult(name="baseline_reduction", passed=gap <= REDUCTION_TOLERANCE, detail=f"gap={gap:.3e}")


def check_determinism(seed: int) -> CheckResult:
    corpus = gen_synthetic_corpus(4, 6, 2, 1, d_in=8, noise_sigma=0.1, seed=seed)
    config = TrainConfig(d_in=8, d=4, K=3, N_c=4, batch_size=8, epochs=2, refresh_period=1, seed=seed)
    first = train(config, corpus).model_dump()
    second = train(config, corpus).model_dump()
    return CheckResult(name="determinism", passed=first == second)


FAST_CHECKS: Tuple[Callable[[int], CheckResult], ...] = (
    check_baseline_obi_zero,
    check_ask_obi_positive,
    check_injection_jacobian,
    check_rdm_reset,
    check_pinsker,
    check_sinkhorn,
    check_gradients,
    check_baseline_reduction,
    check_determinism,
)


def run_fast_checks(seed: int = 0) -> SelftestReport:
    results: List[CheckResult] = []
    for check in FAST_CHECKS:
        try:
            result = check(seed)
        except Exception as exc:
            result = CheckResult(name=check.__name__.removeprefix("check_"), passed=False, detail=f"error: {exc}")
        logger.info("selftest %s: %s %s", result.name, "pass" if result.passed else "FAIL", result.detail)
        results.append(result)
    return SelftestReport(seed=seed, checks=results, passed=all(r.passed for r in results))
