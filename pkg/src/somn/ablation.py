"""Context-ablation harness: trains one shared Stage-1 encoder, then one
Stage-2 model per context configuration from identical seeds, and
reports test-set staging quality per arm.

Arms share the Stage-1 checkpoint and the aggregator init seed, so the
only difference between them is which context reaches the aggregator.
All randomness is seeded; rerunning with the same inputs reproduces
every output file byte for byte.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .dataset import compute_clinical_stats, context_dim
from .epoch_store import SubjectEpochs
from .errors import DataError
from .metrics import EvalReport, confusion_to_csv, render_confusion, report_to_json
from .model import (
    AggregatorConfig,
    ModelBundle,
    base_feature_dim,
    init_aggregator_params,
    init_encoder_params,
    init_mlp_head_params,
    init_mtl_params,
    save_bundle,
)
from .train import (
    TrainConfig,
    extract_features,
    evaluate_staging,
    prepare_stage2_subjects,
    train_stage1,
    train_stage2,
)

ABLATION_ARMS = ("none", "clinical", "event", "both", "mtl")


def ablation_csv(reports: list[EvalReport]) -> str:
    lines = ["config,macro_f1,micro_f1"]
    for r in reports:
        lines.append(f"{r.config},{r.macro_f1:.6f},{r.micro_f1:.6f}")
    return "\n".join(lines) + "\n"


def ablation_text(reports: list[EvalReport]) -> str:
    width = max(len(r.config) for r in reports) + 2
    out = [f"{'config':<{width}}{'macro_f1':>10}{'micro_f1':>10}"]
    for r in reports:
        out.append(f"{r.config:<{width}}{r.macro_f1:>10.4f}{r.micro_f1:>10.4f}")
    out.append("")
    for r in reports:
        out.append(f"[{r.config}] confusion (rows = true stage):")
        out.append(render_confusion(r.confusion))
    return "\n".join(out)


def build_arm_bundle(enc_cfg, encoder_params, head_params, arm: str, seed: int,
                     feature_mode: str = "pooled", kernel: int = 7,
                     n_agg_layers: int = 12, d_hidden: int = 512) -> ModelBundle:
    """Stage-2 bundle around a shared (frozen) encoder."""
    agg_cfg = AggregatorConfig(
        in_dim=base_feature_dim(enc_cfg, feature_mode) + context_dim(arm),
        n_layers=n_agg_layers, d_hidden=d_hidden, kernel=kernel)
    bundle = ModelBundle(
        encoder_cfg=enc_cfg,
        aggregator_cfg=agg_cfg,
        context_mode=arm,
        encoder_params=encoder_params,
        head_params=head_params,
        aggregator_params=init_aggregator_params(agg_cfg, seed + 2),
        mtl_params=init_mtl_params(d_hidden, seed=seed + 3) if arm == "mtl" else None,
        feature_mode=feature_mode,
    )
    bundle.set_frozen(True)
    return bundle


def run_ablation(train_set: list[SubjectEpochs], val_set: list[SubjectEpochs],
                 test_set: list[SubjectEpochs], enc_cfg, stage1_cfg: TrainConfig,
                 stage2_cfg: TrainConfig, out_dir: str | Path | None = None,
                 arms=ABLATION_ARMS, feature_mode: str = "pooled", kernel: int = 7,
                 n_agg_layers: int = 12, d_hidden: int = 512,
                 log=None) -> list[EvalReport]:
    if not train_set or not val_set or not test_set:
        raise DataError("ablation needs non-empty train/val/test subject lists")
    out_dir = Path(out_dir) if out_dir is not None else None
    stats = compute_clinical_stats([s.clinical for s in train_set])

    encoder_params = init_encoder_params(enc_cfg, stage1_cfg.seed)
    head_params = init_mlp_head_params(enc_cfg, stage1_cfg.seed + 1)
    train_stage1(train_set, val_set, encoder_params, head_params, enc_cfg, stage1_cfg,
                 out_dir=None if out_dir is None else out_dir / "stage1", log=log)

    split_features = {
        "train": extract_features(encoder_params, enc_cfg, train_set, feature_mode),
        "val": extract_features(encoder_params, enc_cfg, val_set, feature_mode),
        "test": extract_features(encoder_params, enc_cfg, test_set, feature_mode),
    }

    reports = []
    for arm in arms:
        bundle = build_arm_bundle(enc_cfg, encoder_params, head_params, arm,
                                  stage2_cfg.seed, feature_mode, kernel,
                                  n_agg_layers, d_hidden)
        arm_cfg = dataclasses.replace(stage2_cfg, context=arm)
        prep = {
            name: prepare_stage2_subjects(subjects, split_features[name], arm, stats)
            for name, subjects in (("train", train_set), ("val", val_set), ("test", test_set))
        }
        arm_dir = None if out_dir is None else out_dir / arm
        train_stage2(prep["train"], prep["val"], bundle, arm_cfg, out_dir=arm_dir, log=log)
        report = evaluate_staging(bundle, prep["test"])
        reports.append(report)
        if arm_dir is not None:
            (arm_dir / "report.json").write_text(report_to_json(report))
            (arm_dir / "confusion.csv").write_text(confusion_to_csv(report.confusion))
            save_bundle(bundle, arm_dir / "model")
        if log:
            log(f"arm {arm}: macro {report.macro_f1:.4f} micro {report.micro_f1:.4f}")

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.csv").write_text(ablation_csv(reports))
        (out_dir / "ablation.txt").write_text(ablation_text(reports))
    return reports
