"""Shared optimization machinery: loss, SGD, LR plateau schedule, early stop, epoch loop."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_threshold: float = 1e-3
    min_lr: float = 1e-5
    early_stop_patience: int = 10
    max_epochs: int = 100
    batch_size: int = 16
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.plateau_factor < 1.0):
            raise TrainingError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise TrainingError("patience values must be >= 1")
        if not (self.initial_lr > self.min_lr > 0.0):
            raise TrainingError("require initial_lr > min_lr > 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    seconds: float


EpochTrace = list  # list[EpochRecord]


def write_trace(trace: list[EpochRecord], path: str | Path) -> None:
    """Stream an epoch trace to a line-oriented JSON metrics file."""
    with Path(path).open("w", encoding="utf-8") as f:
        for rec in trace:
            f.write(json.dumps(asdict(rec)) + "\n")


def cross_entropy(logits, label: int) -> float:
    """Cross-entropy of a single 2-logit prediction, via log-sum-exp."""
    a, b = float(logits[0]), float(logits[1])
    if not (math.isfinite(a) and math.isfinite(b)):
        raise TrainingError(f"non-finite logits ({a}, {b})")
    if label not in (0, 1):
        raise TrainingError(f"label must be 0 or 1, got {label}")
    m = max(a, b)
    lse = m + math.log(math.exp(a - m) + math.exp(b - m))
    return lse - (a if label == 0 else b)


def batch_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over a batch; logsumexp keeps it overflow-safe."""
    lse = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (lse - picked).mean()


def sgd_update(params, grads, lr: float, weight_decay: float = 0.0) -> None:
    """In-place p <- p - lr * (g + weight_decay * p) over matched tensor lists."""
    with torch.no_grad():
        for p, g in zip(params, grads, strict=True):
            if g is None:
                continue
            if p.shape != g.shape:
                raise TrainingError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
            p.add_(g + weight_decay * p, alpha=-lr)


class PlateauScheduler:
    """Cut the LR by a fixed factor after a patience window without loss improvement.

    Improvement means loss < best * (1 - threshold); hitting the patience
    count reduces the LR (never below min_lr) and resets the counter.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.initial_lr
        self.best = math.inf
        self.stall = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best * (1.0 - self.cfg.plateau_threshold):
            self.best = epoch_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.cfg.plateau_patience:
                self.lr = max(self.lr * self.cfg.plateau_factor, self.cfg.min_lr)
                self.stall = 0
        return self.lr


class EarlyStopper:
    """Signal a stop after a patience window without loss improvement.

    Keeps its own stall counter, independent of the LR scheduler's.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.best = math.inf
        self.stall = 0

    def step(self, epoch_loss: float) -> bool:
        if epoch_loss < self.best * (1.0 - self.cfg.plateau_threshold):
            self.best = epoch_loss
            self.stall = 0
            return False
        self.stall += 1
        return self.stall >= self.cfg.early_stop_patience


def train_loop(
    model: torch.nn.Module,
    inputs: tuple[torch.Tensor, ...],
    labels: torch.Tensor,
    cfg: TrainConfig,
) -> list[EpochRecord]:
    """Minibatch SGD epoch loop with plateau LR schedule and early stopping.

    ``model(*batch_inputs)`` must return 2-class logits. The model is left
    holding the parameters of its best (lowest mean loss) epoch. Returns
    the per-epoch trace.
    """
    n = int(labels.shape[0])
    if n == 0:
        raise TrainingError("empty dataset")
    classes = torch.unique(labels)
    if classes.numel() < 2:
        raise TrainingError("degenerate training set: only one class present")

    scheduler = PlateauScheduler(cfg)
    stopper = EarlyStopper(cfg)
    lr = cfg.initial_lr
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]

    best_loss = math.inf
    best_state = None
    trace: list[EpochRecord] = []

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=gen)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch_in = tuple(t[idx] for t in inputs)
            batch_y = labels[idx]
            logits = model(*batch_in)
            loss = batch_cross_entropy(logits, batch_y)
            model.zero_grad(set_to_none=True)
            loss.backward()
            sgd_update(params, [p.grad for p in params], lr, cfg.weight_decay)
            total_loss += float(loss.detach()) * idx.numel()
            correct += int((logits.argmax(dim=1) == batch_y).sum())
        epoch_loss = total_loss / n
        trace.append(
            EpochRecord(
                epoch=epoch,
                loss=epoch_loss,
                accuracy=correct / n,
                lr=lr,
                seconds=time.perf_counter() - t0,
            )
        )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = copy.deepcopy(model.state_dict())
        stop = stopper.step(epoch_loss)
        lr = scheduler.step(epoch_loss)
        if stop:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return trace
