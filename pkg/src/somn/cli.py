"""Command-line entry point: the whole pipeline as subcommands.

    somn synth            --config run.json   generate a synthetic cohort
    somn ingest           --config run.json   catalog a cohort directory
    somn preprocess       --config run.json   condition recordings into an epoch store
    somn train-encoder    --config run.json   stage 1: per-epoch encoder
    somn train-aggregator --config run.json   stage 2: whole-night aggregator
    somn evaluate         --config run.json   staging metrics on a held-out split
    somn ablate           --config run.json   one stage-2 model per context mode
    somn gradcheck                            finite-difference audit of every op

Progress goes to stderr; stdout carries exactly one JSON document per
run, a result summary on success or ``{"error": ...}`` on failure.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure. Given the same config and seed, every artifact is written
byte-identically, so reruns into a clean directory are idempotent.

Relative output directories resolve under $SOMN_OUTPUT_ROOT when that
variable is set; ``--out`` overrides the configured ``output_dir``
either way.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from .ablation import ABLATION_ARMS, build_arm_bundle, run_ablation
from .autodiff import load_checkpoint, restore_into, save_checkpoint
from .autodiff.gradcheck import REL_TOL
from .config import RunConfig, load_run_config
from .dataset import compute_clinical_stats, split_manifest_json, split_subjects
from .epoch_store import SubjectEpochs, read_epoch_store, write_epoch_store
from .errors import ConfigError, DataError, NumericError, SomnError
from .gradsuite import run_gradcheck_suite
from .ingest import (cohort_inventory, discover_cohort, extend_aliases,
                     ingest_cohort, load_metadata_csv)
from .metrics import confusion_to_csv, report_to_json
from .model import (init_encoder_params, init_mlp_head_params, load_bundle,
                    save_bundle)
from .synth import gen_cohort
from .train import (TrainHistory, evaluate_staging, extract_features,
                    prepare_stage2_subjects, select_checkpoint, train_stage1,
                    train_stage2)

OUTPUT_ROOT_VAR = "SOMN_OUTPUT_ROOT"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _resolve_out(cfg: RunConfig, args) -> Path:
    chosen = Path(args.out if args.out else cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_VAR)
    if root and not chosen.is_absolute():
        chosen = Path(root) / chosen
    return chosen


def _require(value, message: str):
    if value is None:
        raise ConfigError(message)
    return value


def _load_subjects(cfg: RunConfig, jobs: int) -> list[SubjectEpochs]:
    """Epoch store if configured, else ingest the cohort directory."""
    data = cfg.data
    if data.epst:
        path = Path(data.epst)
        if not path.is_file():
            raise DataError(f"epoch store not found: {path}")
        return read_epoch_store(str(path))
    if data.cohort_dir:
        entries = discover_cohort(data.cohort_dir)
        subjects, excluded = ingest_cohort(
            entries, extend_aliases(data.channel_aliases), data.common_rate_hz,
            _load_metadata(data), jobs=jobs, log=_log)
        for sid, reason in excluded:
            _log(f"excluded {sid}: {reason}")
        return subjects
    raise ConfigError("set data.epst or data.cohort_dir to locate input recordings")


def _load_metadata(data):
    if data.metadata_csv:
        return load_metadata_csv(data.metadata_csv)
    if data.cohort_dir:
        default = Path(data.cohort_dir) / "metadata.csv"
        if default.is_file():
            return load_metadata_csv(default)
    return {}


def _split(cfg: RunConfig, subjects: list[SubjectEpochs]) -> dict[str, list[SubjectEpochs]]:
    ids = [s.subject_id for s in subjects]
    assigned = split_subjects(ids, cfg.data.split, cfg.data.split_seed)
    by_id = {s.subject_id: s for s in subjects}
    split = {name: [by_id[i] for i in assigned[name]] for name in assigned}
    for name in ("train", "val", "test"):
        if not split[name]:
            raise DataError(f"the {name} split is empty: {len(ids)} subjects with "
                            f"fractions {cfg.data.split}")
    return split


def _check_history_finite(history: TrainHistory, what: str) -> None:
    for e in history.entries:
        if not (math.isfinite(e.train_loss) and math.isfinite(e.val_loss)):
            raise NumericError(f"{what} diverged at pass {e.epoch}: "
                               f"train {e.train_loss}, val {e.val_loss}")


def _history_json(history: TrainHistory) -> str:
    best = select_checkpoint(history)
    doc = {
        "best_epoch": best.epoch,
        "best_val_loss": best.val_loss,
        "entries": [
            {"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss,
             "val_loss": e.val_loss,
             "checkpoint": None if e.checkpoint_path is None else e.checkpoint_path.name}
            for e in history.entries],
    }
    return json.dumps(doc, indent=2) + "\n"


def _encoder_checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    if cfg.data.encoder_checkpoint:
        return Path(cfg.data.encoder_checkpoint)
    return out / "stage1" / "encoder.somn"


def _load_encoder(cfg: RunConfig, path: Path):
    """Rebuild encoder + head tensors and fill them from a checkpoint."""
    if not path.is_file():
        raise DataError(f"encoder checkpoint not found: {path}; run train-encoder "
                        "first or set data.encoder_checkpoint")
    loaded = load_checkpoint(str(path))
    encoder_params = init_encoder_params(cfg.model.encoder, 0)
    head_params = init_mlp_head_params(cfg.model.encoder, 0)
    restore_into({**encoder_params, **head_params}, loaded)
    return encoder_params, head_params


# ------------------------------------------------------------- subcommands


def _cmd_synth(cfg: RunConfig, args, out: Path) -> dict:
    cohort_dir = out / "cohort"
    subjects, manifest = gen_cohort(cfg.synth, cohort_dir)
    return {
        "cohort_dir": str(cohort_dir),
        "n_subjects": len(subjects),
        "total_epochs": sum(s.n_epochs for s in subjects),
        "total_events": sum(len(s.events) for s in subjects),
    }


def _cmd_ingest(cfg: RunConfig, args, out: Path) -> dict:
    cohort_dir = _require(cfg.data.cohort_dir,
                          "ingest needs data.cohort_dir in the config")
    inventory = cohort_inventory(cohort_dir, cfg.data.channel_aliases,
                                 cfg.data.metadata_csv)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "inventory.json"
    path.write_text(json.dumps(inventory, indent=2, sort_keys=True) + "\n")
    return {"inventory": str(path), "n_subjects": inventory["n_subjects"],
            "n_excluded": inventory["n_excluded"]}


def _cmd_preprocess(cfg: RunConfig, args, out: Path) -> dict:
    cohort_dir = _require(cfg.data.cohort_dir,
                          "preprocess needs data.cohort_dir in the config")
    entries = discover_cohort(cohort_dir)
    subjects, excluded = ingest_cohort(
        entries, extend_aliases(cfg.data.channel_aliases), cfg.data.common_rate_hz,
        _load_metadata(cfg.data), jobs=args.jobs, log=_log)
    path = Path(cfg.data.epst) if cfg.data.epst else out / "cohort.epst"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_epoch_store(str(path), subjects)
    return {
        "epst": str(path),
        "n_subjects": len(subjects),
        "total_epochs": sum(s.n_epochs for s in subjects),
        "excluded": [{"id": sid, "reason": reason} for sid, reason in excluded],
    }


def _cmd_train_encoder(cfg: RunConfig, args, out: Path) -> dict:
    subjects = _load_subjects(cfg, args.jobs)
    splits = _split(cfg, subjects)
    tcfg = cfg.train.stage_config(1, "none")
    enc_cfg = cfg.model.encoder

    encoder_params = init_encoder_params(enc_cfg, tcfg.seed)
    head_params = init_mlp_head_params(enc_cfg, tcfg.seed + 1)
    stage_dir = out / "stage1"
    history = train_stage1(splits["train"], splits["val"], encoder_params,
                           head_params, enc_cfg, tcfg, out_dir=stage_dir, log=_log)
    _check_history_finite(history, "stage 1")

    best_path = stage_dir / "encoder.somn"
    save_checkpoint(str(best_path), {**encoder_params, **head_params})
    (stage_dir / "history.json").write_text(_history_json(history))
    ids = {name: [s.subject_id for s in split] for name, split in splits.items()}
    (stage_dir / "split.json").write_text(
        split_manifest_json(ids, cfg.data.split_seed, subjects) + "\n")

    best = select_checkpoint(history)
    return {"encoder_checkpoint": str(best_path), "best_epoch": best.epoch,
            "best_val_loss": best.val_loss, "passes": len(history.entries)}


def _stage2_inputs(cfg: RunConfig, args):
    """Splits, frozen encoder, and per-split fused features for Stage 2."""
    subjects = _load_subjects(cfg, args.jobs)
    splits = _split(cfg, subjects)
    return subjects, splits


def _cmd_train_aggregator(cfg: RunConfig, args, out: Path) -> dict:
    subjects, splits = _stage2_inputs(cfg, args)
    mode = cfg.model.context_mode
    tcfg = cfg.train.stage_config(2, mode)
    enc_cfg = cfg.model.encoder
    encoder_params, head_params = _load_encoder(cfg, _encoder_checkpoint_path(cfg, out))

    bundle = build_arm_bundle(enc_cfg, encoder_params, head_params, mode, tcfg.seed,
                              cfg.model.feature_mode, cfg.model.agg_kernel,
                              cfg.model.agg_layers, cfg.model.agg_hidden)
    stats = compute_clinical_stats([s.clinical for s in splits["train"]])
    prep = {}
    for name in ("train", "val"):
        features = extract_features(encoder_params, enc_cfg, splits[name],
                                    cfg.model.feature_mode)
        prep[name] = prepare_stage2_subjects(splits[name], features, mode, stats)

    mode_dir = out / mode
    history = train_stage2(prep["train"], prep["val"], bundle, tcfg,
                           out_dir=mode_dir, log=_log)
    _check_history_finite(history, f"stage 2 [{mode}]")

    bundle_dir = Path(cfg.data.bundle) if cfg.data.bundle else mode_dir / "model"
    save_bundle(bundle, bundle_dir)
    (mode_dir / "history.json").write_text(_history_json(history))

    best = select_checkpoint(history)
    return {"bundle": str(bundle_dir), "context": mode, "best_epoch": best.epoch,
            "best_val_loss": best.val_loss, "passes": len(history.entries)}


def _cmd_evaluate(cfg: RunConfig, args, out: Path) -> dict:
    subjects, splits = _stage2_inputs(cfg, args)
    mode_dir = out / cfg.model.context_mode
    bundle_dir = Path(cfg.data.bundle) if cfg.data.bundle else mode_dir / "model"
    if not (bundle_dir / "config.json").is_file():
        raise DataError(f"no trained model at {bundle_dir}; run train-aggregator "
                        "first or set data.bundle")
    bundle = load_bundle(bundle_dir)

    stats = compute_clinical_stats([s.clinical for s in splits["train"]])
    subset = splits[args.split]
    features = extract_features(bundle.encoder_params, bundle.encoder_cfg, subset,
                                bundle.feature_mode)
    prep = prepare_stage2_subjects(subset, features, bundle.context_mode, stats)
    report = evaluate_staging(bundle, prep)

    out_dir = bundle_dir.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_to_json(report))
    (out_dir / "confusion.csv").write_text(confusion_to_csv(report.confusion))
    return {"report": str(out_dir / "report.json"), "split": args.split,
            "config": report.config, "macro_f1": report.macro_f1,
            "micro_f1": report.micro_f1}


def _cmd_ablate(cfg: RunConfig, args, out: Path) -> dict:
    subjects, splits = _stage2_inputs(cfg, args)
    ablation_dir = out / "ablation"
    reports = run_ablation(
        splits["train"], splits["val"], splits["test"], cfg.model.encoder,
        cfg.train.stage_config(1, "none"), cfg.train.stage_config(2, "none"),
        out_dir=ablation_dir, arms=ABLATION_ARMS,
        feature_mode=cfg.model.feature_mode, kernel=cfg.model.agg_kernel,
        n_agg_layers=cfg.model.agg_layers, d_hidden=cfg.model.agg_hidden, log=_log)
    return {
        "ablation_csv": str(ablation_dir / "ablation.csv"),
        "results": {r.config: {"macro_f1": r.macro_f1, "micro_f1": r.micro_f1}
                    for r in reports},
    }


def _cmd_gradcheck(cfg: RunConfig, args, out: Path) -> dict:
    results = run_gradcheck_suite(seed=args.seed if args.seed is not None else 0)
    width = max(len(name) for name, _ in results)
    for name, err in results:
        status = "ok" if err < REL_TOL else "FAIL"
        _log(f"{name:<{width}}  {err:.3e}  {status}")
    worst_name, worst = max(results, key=lambda r: r[1])
    _log(f"worst: {worst_name} at {worst:.3e} (tolerance {REL_TOL:.0e})")

    doc = {
        "tolerance": REL_TOL,
        "ops": {name: err for name, err in results},
        "worst": {"op": worst_name, "max_rel_err": worst},
    }
    if args.config:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    failures = [name for name, err in results if err >= REL_TOL]
    if failures:
        raise NumericError(
            f"gradient check failed for {', '.join(failures)}: worst relative "
            f"error {worst:.3e} exceeds {REL_TOL:.0e}")
    return doc


_HANDLERS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "preprocess": _cmd_preprocess,
    "train-encoder": _cmd_train_encoder,
    "train-aggregator": _cmd_train_aggregator,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the error contract."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="somn", description="two-stage sleep staging pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate a synthetic cohort (EDF + annotations + metadata)",
        "ingest": "catalog a cohort directory without conditioning signals",
        "preprocess": "condition recordings into an epoch store",
        "train-encoder": "stage 1: train the per-epoch encoder",
        "train-aggregator": "stage 2: train the whole-night aggregator",
        "evaluate": "staging metrics for a trained model on one split",
        "ablate": "train and score one stage-2 model per context mode",
        "gradcheck": "finite-difference audit of every autodiff op",
    }
    for name in _HANDLERS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="path to the JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config output_dir)")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes for file ingestion")
        if name == "evaluate":
            p.add_argument("--split", choices=("train", "val", "test"),
                           default="test", help="which subjects to score")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")
        cfg = load_run_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_seed(args.seed)
        out = _resolve_out(cfg, args)
        summary = _HANDLERS[args.command](cfg, args, out)
        _emit({"command": args.command, "ok": True, "result": summary})
        return 0
    except SomnError as exc:
        if isinstance(exc, ConfigError):
            kind, code = "config", 1
        elif isinstance(exc, NumericError):
            kind, code = "numeric", 3
        else:
            kind, code = "data", 2
        _emit({"error": {"type": kind, "message": str(exc), "exit_code": code}})
        return code


if __name__ == "__main__":
    sys.exit(main())
