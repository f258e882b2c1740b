"""Command-line entry point: synth / train / ablate / report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import backbones, report as report_mod
from .data import (
    DataError,
    SyntheticConfig,
    apply_exclusions,
    generate_synthetic,
    load_manifest,
    make_splits,
    write_manifest,
)
from .engine import TrainConfig, write_trace
from .preprocess import METADATA_MODES
from .report import (
    AblationResult,
    ablation_from_tables,
    compute_metrics,
    emit_curves,
    render_tables,
    run_ablation,
    write_table_csvs,
)
from .stacking import run_pipeline, save_bundle

OUTPUT_ROOT_ENV = "RETISTACK_OUT"
COMPLETE_MARKER = "COMPLETE"
CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Declarative run description loaded from a YAML config file."""

    manifest: str | None = None
    synthetic: SyntheticConfig | None = None
    exclusions: str | None = None
    ratios: tuple[float, float, float] = (0.4, 0.4, 0.2)
    split_seed: int = 0
    backbone_names: list[str] = field(default_factory=lambda: ["tiny_a", "tiny_b"])
    mode: str = "ablation"
    image_side: int = 32
    augment: bool = False
    head_max_epochs: int = 100
    head_lr: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    output_root: str = "runs"

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("exactly one dataset source (manifest or synthetic) is required")
        if not self.backbone_names:
            raise ConfigError("backbone list must be non-empty")
        for name in self.backbone_names:
            if name not in backbones.REGISTRY:
                raise ConfigError(
                    f"unknown backbone {name!r}; registered: {', '.join(backbones.REGISTRY)}"
                )
        if self.mode not in METADATA_MODES + ("ablation",):
            raise ConfigError(f"mode must be one of {METADATA_MODES + ('ablation',)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing field {key!r} in {where} section")
    return section[key]


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    dataset = raw.get("dataset", {})
    synthetic = None
    if "synthetic" in dataset:
        section = dict(dataset["synthetic"])
        _require(section, "seed", "dataset.synthetic")
        for key in ("age_class0_range", "age_class1_range"):
            if key in section:
                section[key] = tuple(section[key])
        try:
            synthetic = SyntheticConfig(**section)
        except TypeError as e:
            raise ConfigError(f"dataset.synthetic: {e}") from e
    splits = raw.get("splits", {})
    train_raw = raw.get("train", {})
    try:
        train = TrainConfig(**train_raw)
    except TypeError as e:
        raise ConfigError(f"train: {e}") from e
    return RunConfig(
        manifest=dataset.get("manifest"),
        synthetic=synthetic,
        exclusions=dataset.get("exclusions"),
        ratios=tuple(splits.get("ratios", (0.4, 0.4, 0.2))),
        split_seed=int(splits.get("seed", 0)),
        backbone_names=list(raw.get("backbones", ["tiny_a", "tiny_b"])),
        mode=raw.get("mode", "ablation"),
        image_side=int(raw.get("image_side", 32)),
        augment=bool(raw.get("augment", False)),
        head_max_epochs=int(raw.get("head_max_epochs", 100)),
        head_lr=float(raw.get("head_lr", 1.0)),
        train=train,
        output_root=raw.get("output_root", os.environ.get(OUTPUT_ROOT_ENV, "runs")),
    )


def resolved_config_dict(cfg: RunConfig) -> dict:
    d = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "dataset": {},
        "splits": {"ratios": list(cfg.ratios), "seed": cfg.split_seed},
        "backbones": cfg.backbone_names,
        "mode": cfg.mode,
        "image_side": cfg.image_side,
        "augment": cfg.augment,
        "head_max_epochs": cfg.head_max_epochs,
        "head_lr": cfg.head_lr,
        "train": dict(cfg.train.__dict__),
        "output_root": cfg.output_root,
    }
    if cfg.manifest:
        d["dataset"]["manifest"] = cfg.manifest
    if cfg.synthetic:
        s = dict(cfg.synthetic.__dict__)
        s["age_class0_range"] = list(s["age_class0_range"])
        s["age_class1_range"] = list(s["age_class1_range"])
        d["dataset"]["synthetic"] = s
    if cfg.exclusions:
        d["dataset"]["exclusions"] = cfg.exclusions
    return d


def _synthetic_dataset_dir(cfg: RunConfig) -> Path:
    digest = hashlib.sha256(
        json.dumps(resolved_config_dict(cfg)["dataset"]["synthetic"], sort_keys=True).encode()
    ).hexdigest()[:12]
    return Path(cfg.output_root) / f"synthetic-{digest}"


def load_records(cfg: RunConfig):
    """Materialize the configured dataset (generating synthetic data if needed)."""
    if cfg.manifest:
        records = load_manifest(cfg.manifest)
    else:
        dataset_dir = _synthetic_dataset_dir(cfg)
        manifest_path = dataset_dir / "manifest.csv"
        if manifest_path.exists():
            records = load_manifest(manifest_path)
        else:
            records = generate_synthetic(cfg.synthetic, dataset_dir)
            write_manifest(records, manifest_path)
    if cfg.exclusions:
        records = apply_exclusions(records, cfg.exclusions)
    return records


def _new_run_dir(cfg: RunConfig, out_override: str | None) -> Path:
    if out_override:
        run_dir = Path(out_override)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.output_root) / f"run-{stamp}"
    if (run_dir / COMPLETE_MARKER).exists():
        raise ConfigError(
            f"run directory {run_dir} is already complete; choose a new directory"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_resolved(cfg: RunConfig, run_dir: Path) -> None:
    (run_dir / "config.resolved").write_text(
        yaml.safe_dump(resolved_config_dict(cfg), sort_keys=True), encoding="utf-8"
    )


def _set_deterministic():
    import torch

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.split_seed = args.seed
        cfg.train.seed = args.seed
        if cfg.synthetic is not None:
            cfg.synthetic.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    return cfg


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    if cfg.synthetic is None:
        raise ConfigError("synth requires a dataset.synthetic section")
    out_dir = Path(args.out) if args.out else _synthetic_dataset_dir(cfg)
    records = generate_synthetic(cfg.synthetic, out_dir)
    write_manifest(records, out_dir / "manifest.csv")
    n1 = sum(r.diabetes_label for r in records)
    print(f"wrote {len(records)} patients to {out_dir} (diabetic {n1}, healthy {len(records) - n1})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    if cfg.mode == "ablation":
        raise ConfigError("train requires a single metadata mode; use the ablate command")
    _set_deterministic()
    records = load_records(cfg)
    splits = make_splits(records, cfg.ratios, cfg.split_seed)
    run_dir = _new_run_dir(cfg, args.out)
    _write_resolved(cfg, run_dir)

    result = run_pipeline(
        splits,
        cfg.backbone_names,
        cfg.mode,
        cfg.train,
        cfg.image_side,
        cfg.augment,
        cfg.head_max_epochs,
        cfg.head_lr,
    )
    save_bundle(result.bundle, run_dir / "bundle")
    traces_dir = run_dir / "traces"
    traces_dir.mkdir(exist_ok=True)
    for name, trace in result.traces.items():
        write_trace(trace, traces_dir / f"{name}.jsonl")

    metrics = compute_metrics(result.test_predictions, result.test_labels)
    with (run_dir / "results.csv").open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["ensemble_accuracy", repr(metrics.accuracy)])
        w.writerow(["precision", "" if metrics.precision is None else repr(metrics.precision)])
        w.writerow(["recall", "" if metrics.recall is None else repr(metrics.recall)])
        for key in ("tp", "fp", "tn", "fn"):
            w.writerow([key, getattr(metrics, key)])
        for name, acc in zip(cfg.backbone_names, result.base_test_accuracies):
            w.writerow([f"base_accuracy_{name}", repr(acc)])
    _write_train_report(run_dir, cfg, metrics, result)
    (run_dir / COMPLETE_MARKER).write_text("ok\n", encoding="utf-8")
    print(f"run complete: {run_dir} (test accuracy {metrics.accuracy:.4f})")
    return 0


def _write_train_report(run_dir, cfg, metrics, result) -> None:
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    lines = [
        "# Training run report",
        "",
        "Positive class is diabetic (label 1).",
        "",
        f"- mode: {cfg.mode}",
        f"- backbones: {', '.join(cfg.backbone_names)}",
        f"- ensemble test accuracy: {fmt(metrics.accuracy)}",
        f"- precision: {fmt(metrics.precision)}",
        f"- recall: {fmt(metrics.recall)}",
        f"- confusion counts: tp={metrics.tp} fp={metrics.fp} tn={metrics.tn} fn={metrics.fn}",
        "",
        "Per-backbone test accuracy:",
        "",
    ]
    for name, acc in zip(cfg.backbone_names, result.base_test_accuracies):
        lines.append(f"- {name}: {acc:.4f}")
    (run_dir / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_ablation_results_csv(result: AblationResult, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["condition", *result.backbone_names, "average", "stage2", "diff"])
        for c in report_mod.CONDITIONS:
            r = result.conditions[c]
            w.writerow(
                [
                    c,
                    *[repr(a) for a in r.base_accuracies],
                    repr(r.stage1_average),
                    repr(r.stage2_accuracy),
                    repr(r.diff),
                ]
            )


def _read_ablation_results_csv(path: Path) -> AblationResult:
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    names = header[1:-3]
    result = AblationResult(backbone_names=names)
    for row in rows[1:]:
        condition = row[0]
        accs = [float(v) for v in row[1 : 1 + len(names)]]
        avg, s2, diff = (float(v) for v in row[-3:])
        result.conditions[condition] = report_mod.ConditionResult(
            condition=condition,
            base_accuracies=accs,
            stage1_average=avg,
            stage2_accuracy=s2,
            diff=diff,
        )
    return result


def _write_ablation_report(run_dir: Path, result: AblationResult) -> None:
    t1, t2 = render_tables(result)
    lines = [
        "# Ablation report",
        "",
        "Positive class is diabetic (label 1); precision/recall, where shown,",
        "use that convention.",
        "",
        "## Per-model test accuracy (stage 1)",
        "",
        "```",
        t1.rstrip(),
        "```",
        "",
        "## Ensemble test accuracy (stage 2)",
        "",
        "```",
        t2.rstrip(),
        "```",
        "",
        f"Metadata gain (both vs none, stage 2): "
        f"{report_mod.format_cell(report_mod.metadata_gain(result))}",
        f"Metadata gain (both vs none, stage 1 average): "
        f"{report_mod.format_cell(report_mod.stage1_gain(result))}",
        "",
    ]
    (run_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    if cfg.mode != "ablation":
        raise ConfigError("ablate requires mode: ablation")
    _set_deterministic()
    records = load_records(cfg)
    splits = make_splits(records, cfg.ratios, cfg.split_seed)
    run_dir = _new_run_dir(cfg, args.out)
    _write_resolved(cfg, run_dir)

    result, traces = run_ablation(
        splits,
        cfg.backbone_names,
        cfg.train,
        cfg.image_side,
        cfg.augment,
        cfg.head_max_epochs,
        cfg.head_lr,
    )
    _write_ablation_results_csv(result, run_dir / "results.csv")
    write_table_csvs(result, run_dir / "table1.csv", run_dir / "table2.csv")
    _write_ablation_report(run_dir, result)
    emit_curves(traces, result, run_dir / "curves")
    traces_dir = run_dir / "traces"
    traces_dir.mkdir(exist_ok=True)
    for condition, by_model in traces.items():
        for name, trace in by_model.items():
            write_trace(trace, traces_dir / f"{condition}_{name}.jsonl")
    (run_dir / COMPLETE_MARKER).write_text("ok\n", encoding="utf-8")
    print(f"ablation complete: {run_dir}")
    return 0


def load_reference_fixture() -> AblationResult:
    """Bundled published accuracy tables, for exercising the report arithmetic."""
    raw = json.loads(
        resources.files("retistack.fixtures").joinpath("reference_tables.json").read_text()
    )
    return ablation_from_tables(
        raw["backbone_names"], raw["base_accuracies"], raw["stage2_accuracies"]
    )


def cmd_report(args) -> int:
    if args.fixture:
        result = load_reference_fixture()
        t1, t2 = render_tables(result)
        print(t1)
        print(t2)
        return 0
    run_dir = Path(args.run_dir)
    results_csv = run_dir / "results.csv"
    if not results_csv.exists():
        raise ConfigError(f"missing results file {results_csv}")
    with results_csv.open(newline="", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    if header[:1] == ["metric"]:
        print((run_dir / "report.md").read_text(encoding="utf-8"))
        return 0
    result = _read_ablation_results_csv(results_csv)
    write_table_csvs(result, run_dir / "table1.csv", run_dir / "table2.csv")
    _write_ablation_report(run_dir, result)
    print((run_dir / "report.md").read_text(encoding="utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retistack",
        description="Two-stage stacked ensemble for eye-pair image classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override every configured seed")
        p.add_argument("--out", help="output directory override")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a single-mode two-stage ensemble")
    add_common(p)
    p.add_argument("--mode", choices=METADATA_MODES, help="metadata mode override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the four-condition metadata ablation")
    add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render reports from stored results")
    p.add_argument("run_dir", nargs="?", default=".", help="completed run directory")
    p.add_argument(
        "--fixture",
        action="store_true",
        help="render the bundled reference accuracy tables instead of a run",
    )
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
