"""Late-fusion head: base-model class scores + metadata through one dense layer."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .engine import TrainConfig, train_loop

FUSION_IN = 4  # 2 base scores + 2 metadata components


class FusionError(ValueError):
    pass


class FusionHead(nn.Module):
    """Single linear layer + softmax over concat(base scores, metadata)."""

    def __init__(self, seed: int = 0, in_features: int = FUSION_IN):
        super().__init__()
        self.linear = nn.Linear(in_features, 2)
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(in_features)
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound, generator=gen)
            self.linear.bias.zero_()

    def forward(self, base_scores: torch.Tensor, meta: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.cat([base_scores, meta], dim=1))


def fuse_forward(base_scores, meta, head: FusionHead) -> np.ndarray:
    """Fused softmax class scores for one sample.

    ``meta`` must be the 2-component metadata vector; callers in mode
    "none" must use the image-only path instead.
    """
    if meta is None:
        raise FusionError("metadata mode 'none' has no fusion path; use the image-only scores")
    dtype = head.linear.weight.dtype
    base_t = torch.as_tensor(np.asarray(base_scores), dtype=dtype).view(1, 2)
    meta_t = torch.as_tensor(np.asarray(meta), dtype=dtype).view(1, 2)
    with torch.no_grad():
        logits = head(base_t, meta_t)
        return torch.softmax(logits, dim=1).numpy()[0]


def train_fusion_head(
    base_outputs,
    metas,
    labels,
    cfg: TrainConfig,
    seed: int | None = None,
) -> tuple[FusionHead, list]:
    """Train a fusion head on frozen base-model outputs.

    The backbone is not touched here; its softmax outputs are fixed inputs.
    Returns the trained head and its epoch trace.
    """
    base_t = torch.as_tensor(np.asarray(base_outputs, dtype=np.float32))
    meta_t = torch.as_tensor(np.asarray(metas, dtype=np.float32))
    labels_t = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if not (base_t.shape[0] == meta_t.shape[0] == labels_t.shape[0]):
        raise FusionError("base outputs, metadata, and labels must have equal lengths")
    head = FusionHead(seed=cfg.seed if seed is None else seed)
    if cfg.max_epochs == 0:
        return head, []
    trace = train_loop(head, (base_t, meta_t), labels_t, cfg)
    return head, trace
