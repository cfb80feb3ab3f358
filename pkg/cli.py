"""
Command-line entry point for ASK experiments.

Subcommands:
- build-kb  - encode the knowledge corpus and write a binary KB snapshot + sidecar
- train     - run the training loop; write report JSON, metrics CSV, encoder weights
- eval      - recall table for saved encoder weights on a corpus split
- diagnose  - RDM drift sweep, OBI per loss variant, or knowledge-error bound trials
- selftest  - fast acceptance checks (exit 3 on failure)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from acceptance import run_fast_checks
from artifacts import atomic_write_bytes, atomic_write_csv, atomic_write_json
from core_math import derive_seed
from diagnostics import drift_encoders, drift_simulation, drift_trace_export, random_bound_trials
from errors import AskError, ConfigError
from experiment_schema import DIAGNOSE_MODES, LOSS_VARIANTS, SPLITS, ExperimentConfig, dump_config, resolve_experiment_config
from knowledge_base import build_coarse_kb, build_fine_kb, resolve_num_prototypes, snapshot_bytes
from objective import obi
from trainer import (
    METRIC_COLUMNS,
    CorpusSplit,
    SyntheticCorpus,
    ToyEncoder,
    capped_ks,
    export_weights,
    gen_synthetic_corpus,
    load_corpus_jsonl,
    load_weights,
    recall_at_k,
    run_training,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3

BOUND_ENTRIES = 16

# ============================================================================
# CONFIGURATION
# ============================================================================


def configure_logging(flag_level: Optional[str]) -> None:
    level_name = (flag_level or os.getenv("ASK_LOG_LEVEL") or "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "output_dir": args.out,
        "loss_variant": getattr(args, "variant", None),
        "eval_split": getattr(args, "split", None),
    }
    config = resolve_experiment_config(args.config, overrides)
    atomic_write_json(Path(config.output_dir) / "resolved_config.json", dump_config(config))
    return config


def load_experiment_corpus(config: ExperimentConfig) -> SyntheticCorpus:
    if config.corpus_path:
        return load_corpus_jsonl(config.corpus_path, config.eval_fraction, config.seed)
    synthetic = config.synthetic
    return gen_synthetic_corpus(
        n_clusters=synthetic.n_clusters,
        head_size=synthetic.head_size,
        tail_size=synthetic.tail_size,
        n_tail=synthetic.n_tail,
        d_in=config.d_in,
        noise_sigma=synthetic.noise_sigma,
        seed=config.seed,
        d_latent=synthetic.d_latent,
        item_spread=synthetic.item_spread,
        eval_fraction=config.eval_fraction,
    )


def load_kb_corpus(config: ExperimentConfig) -> Any:
    if not config.kb_corpus_path:
        return None
    return load_corpus_jsonl(config.kb_corpus_path, eval_fraction=0.0, seed=config.seed).split("all")


def initial_encoders(config: ExperimentConfig, weights_path: Optional[str]) -> tuple:
    if weights_path:
        return load_weights(weights_path)
    return (
        ToyEncoder.initialize("audio", config.d, config.d_in, config.seed),
        ToyEncoder.initialize("text", config.d, config.d_in, config.seed),
    )


# ============================================================================
# SUBCOMMANDS
# ============================================================================


def cmd_build_kb(config: ExperimentConfig, weights_path: Optional[str] = None) -> Path:
    corpus = load_experiment_corpus(config)
    source = load_kb_corpus(config)
    if source is None:
        source = corpus.split("all")
    audio_enc, text_enc = initial_encoders(config, weights_path)
    fine = build_fine_kb(source, audio_enc, text_enc, epoch=0)
    n_c, warning = resolve_num_prototypes(config.N_c, len(fine))
    if warning:
        logger.warning(warning)
    coarse = build_coarse_kb(fine, n_c, derive_seed(config.seed, "kmeans"))

    out = Path(config.output_dir)
    snapshot = atomic_write_bytes(out / "kb_snapshot.bin", snapshot_bytes(fine, coarse))
    atomic_write_json(
        out / "kb_snapshot.json",
        {"N_k": len(fine), "N_c": len(coarse), "d": fine.dim, "built_at": fine.built_at_epoch, "warning": warning},
    )
    return snapshot


def _drift_samples(config: ExperimentConfig, corpus: SyntheticCorpus) -> CorpusSplit:
    samples = corpus.split("train")
    n = min(config.drift.n_samples, len(samples))
    return CorpusSplit(audio=samples.audio[:n], text=samples.text[:n], ids=samples.ids[:n])


def cmd_train(config: ExperimentConfig) -> Dict[str, Path]:
    corpus = load_experiment_corpus(config)
    run = run_training(config, corpus, load_kb_corpus(config))
    out = Path(config.output_dir)
    subset = _drift_samples(config, corpus)
    return {
        "report": atomic_write_json(out / "train_report.json", run.report.model_dump(mode="json")),
        "metrics": atomic_write_csv(out / "metrics.csv", METRIC_COLUMNS, run.report.csv_rows()),
        "weights": export_weights(run.audio_encoder, run.text_encoder, out / "encoder_weights.bin"),
        "drift_trace": drift_trace_export(run.snapshots, subset, out / "train_drift_trace.csv", subset.ids),
    }


def cmd_eval(config: ExperimentConfig, weights_path: str, split: str) -> Dict[str, float]:
    corpus = load_experiment_corpus(config)
    audio_enc, text_enc = load_weights(weights_path)
    pool = corpus.split(split)
    ks, _ = capped_ks(config.recall_ks, len(pool))
    table = recall_at_k(audio_enc(pool.audio), text_enc(pool.text), sorted(set(ks)))
    # keys keep the requested k even when it was capped to the pool size
    rounded = {
        f"{direction}_R@{requested}": round(table[f"{direction}_R@{used}"], 2)
        for direction in ("T2A", "A2T")
        for requested, used in zip(config.recall_ks, ks)
    }
    atomic_write_json(Path(config.output_dir) / "recall.json", rounded)
    return rounded


def _diagnose_rdm(config: ExperimentConfig, corpus: SyntheticCorpus, weights_path: Optional[str]) -> Dict[str, Any]:
    audio_enc, _ = initial_encoders(config, weights_path)
    subset = _drift_samples(config, corpus)
    drift = config.drift
    trace = drift_simulation(
        audio_enc, drift.model, drift.steps, drift.magnitude, subset,
        temperature=drift.temperature, seed=config.seed,
    )
    out = Path(config.output_dir)
    sweep = [step.summary() for step in trace]
    atomic_write_json(out / "rdm_sweep.json", sweep)

    encoders = drift_encoders(audio_enc, drift.model, drift.steps, drift.magnitude, config.seed)
    snapshots = [(0, audio_enc)] + list(enumerate(encoders, start=1))
    drift_trace_export(snapshots, subset, out / "drift_trace.csv", subset.ids)
    return {"steps": sweep}


def _diagnose_obi(
    config: ExperimentConfig, corpus: SyntheticCorpus, weights_path: Optional[str], variants: Sequence[str]
) -> Dict[str, Any]:
    audio_enc, text_enc = initial_encoders(config, weights_path)
    source = corpus.split("train")
    fine = build_fine_kb(source, audio_enc, text_enc, epoch=0)
    n_c, warning = resolve_num_prototypes(config.N_c, len(fine))
    if warning:
        logger.warning(warning)
    coarse = build_coarse_kb(fine, n_c, derive_seed(config.seed, "kmeans"))

    positions = np.arange(min(config.obi_batch_size, len(fine)))
    batch = list(zip(fine.audio[positions], fine.text[positions]))
    reports = {}
    for variant in variants:
        report = obi(batch, fine, config, variant, coarse=coarse, batch_ids=positions)
        reports[variant] = report.model_dump()
    atomic_write_json(Path(config.output_dir) / "obi.json", reports)
    return reports


def _diagnose_bound(config: ExperimentConfig) -> Dict[str, Any]:
    satisfied, total = random_bound_trials(config.bound_trials, BOUND_ENTRIES, config.d, config.seed)
    payload = {"trials": total, "satisfied": satisfied, "violations": total - satisfied}
    atomic_write_json(Path(config.output_dir) / "bound.json", payload)
    return payload


def cmd_diagnose(
    config: ExperimentConfig,
    mode: str,
    weights_path: Optional[str] = None,
    variants: Sequence[str] = LOSS_VARIANTS,
) -> Dict[str, Any]:
    if mode == "bound":
        return _diagnose_bound(config)
    corpus = load_experiment_corpus(config)
    if mode == "rdm":
        return _diagnose_rdm(config, corpus, weights_path)
    if mode == "obi":
        return _diagnose_obi(config, corpus, weights_path, variants)
    raise ConfigError(f"unknown diagnose mode {mode!r}")


def cmd_selftest(config: ExperimentConfig) -> bool:
    report = run_fast_checks(config.seed)
    atomic_write_json(Path(config.output_dir) / "selftest.json", report.model_dump(mode="json"))
    return report.passed


# ============================================================================
# ARGUMENT PARSING
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ask", description="Knowledge-enhanced contrastive learning experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ...")

    sub = parser.add_subparsers(dest="command", required=True)
    build = sub.add_parser("build-kb", parents=[common], help="build and export knowledge bases")
    build.add_argument("--weights", help="encoder weights file (default: seeded initial encoders)")

    train_cmd = sub.add_parser("train", parents=[common], help="train the dual encoders")
    train_cmd.add_argument("--variant", choices=LOSS_VARIANTS)

    eval_cmd = sub.add_parser("eval", parents=[common], help="recall table for saved weights")
    eval_cmd.add_argument("--weights", required=True, help="encoder weights file")
    eval_cmd.add_argument("--split", choices=SPLITS)

    diagnose = sub.add_parser("diagnose", parents=[common], help="drift / OBI / bound diagnostics")
    diagnose.add_argument("--mode", choices=DIAGNOSE_MODES, required=True)
    diagnose.add_argument("--variant", choices=LOSS_VARIANTS)
    diagnose.add_argument("--weights", help="encoder weights file (default: seeded initial encoders)")

    sub.add_parser("selftest", parents=[common], help="run fast acceptance checks")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        config = resolve_config(args)
        if args.command == "build-kb":
            cmd_build_kb(config, args.weights)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            cmd_eval(config, args.weights, config.eval_split)
        elif args.command == "diagnose":
            variants = [args.variant] if args.variant else LOSS_VARIANTS
            cmd_diagnose(config, args.mode, args.weights, variants)
        elif args.command == "selftest":
            if not cmd_selftest(config):
                logger.error("selftest failed")
                return EXIT_ACCEPTANCE
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (AskError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
