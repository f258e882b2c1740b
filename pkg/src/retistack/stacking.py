"""Two-stage stacked ensemble: K base models, held-out features, linear stacker."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import backbones
from .data import DatasetSplits, PatientRecord
from .engine import EpochRecord, TrainConfig, train_loop
from .fusion import FusionHead, train_fusion_head
from .preprocess import (
    IMAGE_NORMALIZATION,
    MetadataBounds,
    NormalizationSpec,
    augment,
    expand_metadata,
    load_eye_pair,
    normalize_metadata,
)

BUNDLE_SCHEMA_VERSION = 1


class PipelineError(RuntimeError):
    pass


@dataclass
class BaseModel:
    """One trained stage-1 member: backbone plus optional fusion head."""

    name: str
    seed: int
    backbone: nn.Module
    fusion: FusionHead | None = None


@dataclass
class EnsembleBundle:
    """Everything needed to run the test-time prediction path."""

    bases: list[BaseModel]
    stacker: nn.Module
    mode: str
    image_side: int
    normalization: NormalizationSpec
    metadata_bounds: MetadataBounds
    ordering: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ordering:
            self.ordering = [b.name for b in self.bases]
        if self.ordering != [b.name for b in self.bases]:
            raise PipelineError("bundle ordering disagrees with its base models")


def make_stacker(k: int, seed: int) -> nn.Module:
    """Linear layer + softmax over the 2K stacked scores."""
    return FusionHead(seed=seed, in_features=2 * k).linear


def prepare_arrays(
    records: list[PatientRecord],
    image_side: int,
    bounds: MetadataBounds,
    augment_ops: tuple[int, ...] = (0,),
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Load a split into (images, metadata, labels) tensors.

    ``augment_ops`` replicates every record once per op; keep the default
    (identity only) for evaluation splits.
    """
    xs, metas, ys = [], [], []
    for rec in records:
        pair = load_eye_pair(rec, image_side)
        age_n, gender_n = normalize_metadata(rec, bounds)
        for op in augment_ops:
            xs.append(augment(pair, op) if op else pair)
            metas.append((age_n, gender_n))
            ys.append(rec.diabetes_label)
    x = torch.as_tensor(np.stack(xs))
    meta = torch.as_tensor(np.asarray(metas, dtype=np.float32))
    y = torch.as_tensor(np.asarray(ys, dtype=np.int64))
    return x, meta, y


def _meta_matrix(mode: str, meta_raw: torch.Tensor) -> torch.Tensor | None:
    """Expand (age_n, gender_n) rows into the mode's 2-component vectors."""
    if mode == "none":
        return None
    rows = [expand_metadata(mode, float(a), float(g)) for a, g in meta_raw.tolist()]
    return torch.as_tensor(np.asarray(rows, dtype=np.float32))


def base_scores(model: BaseModel, x: torch.Tensor, meta: torch.Tensor | None) -> torch.Tensor:
    """One base model's 2-dim softmax output, fused when a metadata mode is active."""
    model.backbone.eval()
    with torch.no_grad():
        scores = backbones.forward_scores(model.backbone, x)
        if meta is not None:
            if model.fusion is None:
                raise PipelineError(f"base {model.name} has no fusion head for this mode")
            logits = model.fusion(scores, meta)
            scores = torch.softmax(logits, dim=1)
    return scores


def train_stage1(
    x: torch.Tensor,
    meta_raw: torch.Tensor,
    y: torch.Tensor,
    backbone_names: list[str],
    mode: str,
    cfg: TrainConfig,
    head_cfg: TrainConfig | None = None,
) -> tuple[list[BaseModel], dict[str, list[EpochRecord]]]:
    """Train each backbone image-only, then (mode != none) its frozen-base fusion head.

    Member seeds are cfg.seed + index so the ensemble members differ.
    ``head_cfg`` lets the cheap linear fusion heads run more epochs than
    the backbones.
    """
    models: list[BaseModel] = []
    traces: dict[str, list[EpochRecord]] = {}
    meta = _meta_matrix(mode, meta_raw)
    head_cfg = head_cfg or cfg
    for i, name in enumerate(backbone_names):
        seed = cfg.seed + i
        net = backbones.build_backbone(name, seed=seed)
        member_cfg = replace(cfg, seed=seed)
        traces[name] = train_loop(net, (x,), y, member_cfg)
        base = BaseModel(name=name, seed=seed, backbone=net)
        if mode != "none":
            net.eval()
            with torch.no_grad():
                frozen = backbones.forward_scores(net, x)
            base.fusion, fusion_trace = train_fusion_head(
                frozen.numpy(), meta.numpy(), y.numpy(), replace(head_cfg, seed=seed), seed=seed
            )
            traces[f"{name}_fusion"] = fusion_trace
        models.append(base)
    return models, traces


def extract_features(
    models: list[BaseModel],
    x: torch.Tensor,
    meta_raw: torch.Tensor,
    mode: str,
) -> torch.Tensor:
    """Concatenate every base model's 2-dim output, in registry order: (N, 2K)."""
    meta = _meta_matrix(mode, meta_raw)
    cols = [base_scores(m, x, meta) for m in models]
    return torch.cat(cols, dim=1)


def train_stage2(
    features: torch.Tensor, y: torch.Tensor, cfg: TrainConfig
) -> tuple[nn.Module, list[EpochRecord]]:
    """Train the linear stacker on held-out stacked features."""
    k2 = features.shape[1]
    stacker = make_stacker(k2 // 2, seed=cfg.seed)
    trace = train_loop(stacker, (features,), y, cfg)
    return stacker, trace


def stacker_scores(stacker: nn.Module, features: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return torch.softmax(stacker(features), dim=1)


def decide(scores) -> int:
    """Argmax with ties broken toward class 0 (healthy)."""
    return int(float(scores[1]) > float(scores[0]))


def predict(bundle: EnsembleBundle, record: PatientRecord) -> tuple[int, np.ndarray]:
    """Full test-time path for one patient: preprocess, bases, stacker, argmax."""
    pair = load_eye_pair(record, bundle.image_side, bundle.normalization)
    x = torch.as_tensor(pair).unsqueeze(0)
    age_n, gender_n = normalize_metadata(record, bundle.metadata_bounds)
    meta_raw = torch.tensor([[age_n, gender_n]], dtype=torch.float32)
    feats = extract_features(bundle.bases, x, meta_raw, bundle.mode)
    scores = stacker_scores(bundle.stacker, feats)[0].numpy()
    return decide(scores), scores


def assert_split_hygiene(splits: DatasetSplits) -> None:
    """Hard guarantee that train1/train2/test patient ids never overlap."""
    ids1 = {r.patient_id for r in splits.train1}
    ids2 = {r.patient_id for r in splits.train2}
    ids3 = {r.patient_id for r in splits.test}
    overlaps = (ids1 & ids2) | (ids1 & ids3) | (ids2 & ids3)
    if overlaps:
        raise PipelineError(f"split leakage: ids in multiple splits: {sorted(overlaps)[:5]}")


@dataclass
class PipelineResult:
    bundle: EnsembleBundle
    traces: dict[str, list[EpochRecord]]
    base_test_accuracies: list[float]
    ensemble_test_accuracy: float
    test_predictions: list[int]
    test_labels: list[int]


def run_pipeline(
    splits: DatasetSplits,
    backbone_names: list[str],
    mode: str,
    cfg: TrainConfig,
    image_side: int,
    augment_train: bool = False,
    head_max_epochs: int = 100,
    head_lr: float = 1.0,
) -> PipelineResult:
    """Train the full two-stage ensemble and evaluate it on the test split.

    The linear fusion heads and stacker are orders of magnitude cheaper than
    the backbones, so they get their own epoch budget and a larger initial
    LR (plain SGD on bounded 2K-dim inputs underfits badly at the
    backbones' rate).
    """
    assert_split_hygiene(splits)
    bounds = MetadataBounds.from_records(splits.train1 + splits.train2)

    train_ops = tuple(range(8)) if augment_train else (0,)
    x1, meta1, y1 = prepare_arrays(splits.train1, image_side, bounds, train_ops)
    x2, meta2, y2 = prepare_arrays(splits.train2, image_side, bounds)
    xt, metat, yt = prepare_arrays(splits.test, image_side, bounds)

    head_cfg = replace(cfg, max_epochs=max(cfg.max_epochs, head_max_epochs), initial_lr=head_lr)
    models, traces = train_stage1(x1, meta1, y1, backbone_names, mode, cfg, head_cfg)

    feats2 = extract_features(models, x2, meta2, mode)
    stacker, stacker_trace = train_stage2(feats2, y2, head_cfg)
    traces["stacker"] = stacker_trace

    featst = extract_features(models, xt, metat, mode)
    base_accs = []
    for i in range(len(models)):
        pair_scores = featst[:, 2 * i : 2 * i + 2]
        preds = torch.tensor([decide(s) for s in pair_scores])
        base_accs.append(float((preds == yt).float().mean()))
    ens_scores = stacker_scores(stacker, featst)
    ens_preds = [decide(s) for s in ens_scores]
    ens_acc = float(np.mean([p == int(t) for p, t in zip(ens_preds, yt)]))

    bundle = EnsembleBundle(
        bases=models,
        stacker=stacker,
        mode=mode,
        image_side=image_side,
        normalization=IMAGE_NORMALIZATION,
        metadata_bounds=bounds,
    )
    return PipelineResult(
        bundle=bundle,
        traces=traces,
        base_test_accuracies=base_accs,
        ensemble_test_accuracy=ens_acc,
        test_predictions=ens_preds,
        test_labels=[int(t) for t in yt],
    )


def save_bundle(bundle: EnsembleBundle, out_dir: str | Path) -> None:
    """Persist a bundle as a directory: one checkpoint per base plus metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for base in bundle.bases:
        payload = {
            "name": base.name,
            "seed": base.seed,
            "backbone_state": base.backbone.state_dict(),
            "fusion_state": base.fusion.state_dict() if base.fusion else None,
        }
        torch.save(payload, out_dir / f"base_{base.name}.pt")
    torch.save({"stacker_state": bundle.stacker.state_dict()}, out_dir / "stacker.pt")
    meta = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "mode": bundle.mode,
        "image_side": bundle.image_side,
        "ordering": bundle.ordering,
        "normalization": bundle.normalization.to_dict(),
        "metadata_bounds": bundle.metadata_bounds.to_dict(),
        "seeds": [b.seed for b in bundle.bases],
    }
    (out_dir / "bundle.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_bundle(path: str | Path) -> EnsembleBundle:
    """Reload a persisted bundle; parameters round-trip bit-exactly."""
    path = Path(path)
    meta_path = path / "bundle.json"
    if not meta_path.exists():
        raise PipelineError(f"not a bundle directory (missing {meta_path})")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta["schema_version"] != BUNDLE_SCHEMA_VERSION:
        raise PipelineError(f"unsupported bundle schema version {meta['schema_version']}")
    bases = []
    for name, seed in zip(meta["ordering"], meta["seeds"]):
        payload = torch.load(path / f"base_{name}.pt", weights_only=True)
        net = backbones.build_backbone(name, seed=seed)
        net.load_state_dict(payload["backbone_state"])
        fusion = None
        if payload["fusion_state"] is not None:
            fusion = FusionHead(seed=seed)
            fusion.load_state_dict(payload["fusion_state"])
        bases.append(BaseModel(name=name, seed=seed, backbone=net, fusion=fusion))
    stacker = make_stacker(len(bases), seed=0)
    stacker.load_state_dict(torch.load(path / "stacker.pt", weights_only=True)["stacker_state"])
    return EnsembleBundle(
        bases=bases,
        stacker=stacker,
        mode=meta["mode"],
        image_side=meta["image_side"],
        normalization=NormalizationSpec.from_dict(meta["normalization"]),
        metadata_bounds=MetadataBounds.from_dict(meta["metadata_bounds"]),
        ordering=meta["ordering"],
    )
