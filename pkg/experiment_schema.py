"""
Configuration models and validation for ASK experiments.

Values resolve in the order: CLI flags > JSON config file > environment
(.env: ASK_OUTPUT_DIR, ASK_SEED) > model defaults. Validation follows the
(valid, errors) convention with errors as [{"path", "message"}].
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError

LOSS_VARIANTS = ("baseline", "ask")
LR_SCHEDULES = ("constant", "step")
DRIFT_MODELS = ("gaussian_walk", "rotation_flow")
SPLITS = ("train", "eval")
DIAGNOSE_MODES = ("rdm", "obi", "bound")

ENV_KEYS = {"ASK_OUTPUT_DIR": "output_dir", "ASK_SEED": "seed"}


class SyntheticCorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_clusters: int = Field(default=10, ge=2)
    head_size: int = Field(default=50, ge=1)
    tail_size: int = Field(default=5, ge=1)
    n_tail: int = Field(default=5, ge=1)
    d_latent: int = Field(default=8, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    item_spread: float = Field(default=0.5, ge=0)


class DriftConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Literal["gaussian_walk", "rotation_flow"] = "gaussian_walk"
    steps: int = Field(default=20, ge=1)
    magnitude: float = Field(default=0.05, ge=0)
    temperature: float = Field(default=1.0, gt=0)
    n_samples: int = Field(default=64, ge=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_in: int = Field(default=32, ge=1)
    d: int = Field(default=16, ge=2)
    K: int = Field(default=10, ge=1)
    N_c: int = Field(default=512, ge=1)
    rho: float = Field(default=0.2, ge=0, le=1)
    beta: float = Field(default=0.2, ge=0, le=1)
    lambda_f: float = Field(default=0.2, ge=0)
    lambda_c: float = Field(default=0.3, ge=0)
    refresh_period: Optional[int] = Field(default=15, ge=1)
    tau: float = Field(default=0.07, gt=0)
    epsilon: float = Field(default=0.05, gt=0)
    sinkhorn_max_iters: int = Field(default=200, ge=1)
    sinkhorn_tol: float = Field(default=1e-6, gt=0)
    learning_rate: float = Field(default=0.5, gt=0)
    lr_schedule: Literal["constant", "step"] = "constant"
    step_size: int = Field(default=20, ge=1)
    step_gamma: float = Field(default=0.1, gt=0, le=1)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0)
    renormalize_enhanced: bool = True
    self_exclude: bool = True
    plan_rescale: bool = True
    loss_variant: Literal["baseline", "ask"] = "ask"
    use_fine: bool = True
    use_coarse: bool = True
    use_injection: bool = True
    use_ot: bool = True
    use_reliability: bool = True

    def learning_rate_at(self, epoch: int) -> float:
        if self.lr_schedule == "step":
            return self.learning_rate * self.step_gamma ** (epoch // self.step_size)
        return self.learning_rate


class ExperimentConfig(TrainConfig):
    corpus_path: Optional[str] = None
    kb_corpus_path: Optional[str] = None
    synthetic: SyntheticCorpusConfig = Field(default_factory=SyntheticCorpusConfig)
    output_dir: str = "runs"
    eval_split: Literal["train", "eval"] = "eval"
    eval_fraction: float = Field(default=0.2, ge=0, lt=1)
    recall_ks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    drift: DriftConfig = Field(default_factory=DriftConfig)
    bound_trials: int = Field(default=1000, ge=1)
    obi_batch_size: int = Field(default=32, ge=1)


# ─── Validation ─────────────────────────────────────────────────────


def _add_error(errors: List[Dict[str, str]], path: str, message: str) -> None:
    errors.append({"path": path, "message": message})


def _pydantic_errors(exc: ValidationError) -> List[Dict[str, str]]:
    return [
        {"path": ".".join(str(part) for part in item["loc"]) or "root", "message": item["msg"]}
        for item in exc.errors()
    ]


def _validate_cross_fields(config: ExperimentConfig, errors: List[Dict[str, str]]) -> None:
    if not (config.use_fine or config.use_coarse):
        _add_error(errors, "use_fine", "at least one of use_fine / use_coarse must be enabled")

    synthetic = config.synthetic
    if synthetic.tail_size >= synthetic.head_size:
        _add_error(errors, "synthetic.tail_size", "must be smaller than synthetic.head_size")
    if synthetic.n_tail >= synthetic.n_clusters:
        _add_error(errors, "synthetic.n_tail", "must be smaller than synthetic.n_clusters")

    if not config.recall_ks:
        _add_error(errors, "recall_ks", "must be a non-empty list")
    for idx, k in enumerate(config.recall_ks):
        if k < 1:
            _add_error(errors, f"recall_ks[{idx}]", "must be a positive integer")

    if config.kb_corpus_path is not None and config.corpus_path is None:
        _add_error(errors, "kb_corpus_path", "requires corpus_path")


def validate_experiment_config(raw: Any) -> Tuple[bool, List[Dict[str, str]]]:
    if not isinstance(raw, dict):
        return False, [{"path": "root", "message": "config must be an object"}]
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        return False, _pydantic_errors(exc)

    errors: List[Dict[str, str]] = []
    _validate_cross_fields(config, errors)
    return len(errors) == 0, errors


def assert_valid_experiment_config(raw: Dict[str, Any]) -> ExperimentConfig:
    valid, errors = validate_experiment_config(raw)
    if not valid:
        detail = "; ".join([f"{item['path']}: {item['message']}" for item in errors])
        raise ConfigError(f"Invalid experiment config: {detail}")
    return ExperimentConfig.model_validate(raw)


# ─── Layered resolution ─────────────────────────────────────────────


def load_config_file(path: str | os.PathLike) -> Dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return payload


def env_defaults(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Process-level defaults from ASK_* variables (after load_dotenv)."""
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    for name, key in ENV_KEYS.items():
        raw = environ.get(name)
        if raw is None or raw == "":
            continue
        if key == "seed":
            try:
                values[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"{name} must be an integer, got {raw!r}") from exc
        else:
            values[key] = raw
    return values


def resolve_experiment_config(
    config_path: Optional[str | os.PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    raw: Dict[str, Any] = env_defaults(environ)
    if config_path is not None:
        raw.update(load_config_file(config_path))
    raw.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return assert_valid_experiment_config(raw)


def dump_config(config: BaseModel) -> Dict[str, Any]:
    return config.model_dump(mode="json")
