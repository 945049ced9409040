"""Dynamic-length mini-batch training with SGD + momentum and a plateau LR ladder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import NumericFailure
from .features import FeatureSequence
from .heads import forward_logits
from .model import MIN_FRAMES, ModelParameters

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    length_min: int = 200
    length_max: int = 1000
    lr_ladder: tuple = (0.1, 0.01, 0.001)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_patience: int = 3
    plateau_threshold: float = 1e-3
    seed: int = 0
    epochs: int = 30
    target_accuracy: Optional[float] = None

    def __post_init__(self):
        self.lr_ladder = tuple(float(v) for v in self.lr_ladder)
        if self.length_min < MIN_FRAMES or self.length_max < self.length_min:
            raise ValueError(f"length range [{self.length_min}, {self.length_max}] must satisfy "
                             f"{MIN_FRAMES} <= min <= max")
        if not self.lr_ladder or any(b >= a for a, b in zip(self.lr_ladder, self.lr_ladder[1:])):
            raise ValueError(f"lr_ladder must be non-empty and strictly decreasing, got {self.lr_ladder}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def length_range(self) -> tuple:
        return (self.length_min, self.length_max)

    @classmethod
    def from_kv(cls, values: dict) -> "TrainConfig":
        """Build from string values, ignoring keys that are not TrainConfig fields."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.name == "lr_ladder":
                kwargs[f.name] = tuple(float(v) for v in str(raw).split(","))
            elif f.name == "target_accuracy":
                kwargs[f.name] = float(raw) if raw not in ("", None, "none") else None
            elif f.name in ("momentum", "weight_decay", "plateau_threshold"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)

    def to_kv(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OptimizerState:
    momentum: dict = field(default_factory=dict)
    lr_index: int = 0
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def lr(self, config: TrainConfig) -> float:
        return config.lr_ladder[self.lr_index]


# ---------------------------------------------------------------- batching


def sample_batch_length(rng: np.random.Generator, length_range: tuple = (200, 1000)) -> int:
    lo, hi = length_range
    return int(rng.integers(lo, hi + 1))


def crop_or_extend(features: np.ndarray, target: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Random contiguous crop when too long, cyclic repetition when too short."""
    n = features.shape[1]
    if n == target:
        return features
    if n > target:
        start = int(rng.integers(0, n - target + 1)) if rng is not None else 0
        return features[:, start:start + target]
    return features[:, np.arange(target) % n]


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    indices: list


def make_batch(sequences: Sequence[FeatureSequence], indices: Sequence[int], rng: np.random.Generator,
               length: Optional[int] = None, length_range: tuple = (200, 1000)) -> Batch:
    """Stack the chosen utterances at one shared length L drawn per batch.

    Utterances without frames are skipped and replaced by a random draw.
    """
    if length is None:
        length = sample_batch_length(rng, length_range)
    usable = [i for i, s in enumerate(sequences) if s.num_frames > 0]
    if not usable:
        raise ValueError("no utterance has any frames")
    chosen = []
    for idx in indices:
        while sequences[idx].num_frames == 0:
            log.warning("utterance %s has no frames; resampling", sequences[idx].utterance_id)
            idx = usable[int(rng.integers(len(usable)))]
        chosen.append(idx)
    feats = np.stack([crop_or_extend(np.asarray(sequences[i].features, dtype=np.float64), length, rng)
                      for i in chosen])
    labels = np.array([sequences[i].label for i in chosen], dtype=np.int64)
    return Batch(feats, labels, chosen)


def epoch_batches(num_items: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """ceil(N / B) batches from one permutation; the last batch is topped up from its start."""
    perm = rng.permutation(num_items)
    nb = -(-num_items // batch_size)
    if nb * batch_size > num_items:
        perm = np.concatenate([perm, perm[:nb * batch_size - num_items]])
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


# ---------------------------------------------------------------- objective and updates


def cross_entropy(logits: T.Tensor, labels, num_classes: Optional[int] = None) -> T.Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if num_classes is not None and num_classes != k:
        raise ValueError(f"logits have {k} classes, expected {num_classes}")
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(T.log_softmax(logits, axis=1) * onehot).sum() / n


def sgd_step(params: dict, state: OptimizerState, config: TrainConfig, lr: Optional[float] = None) -> None:
    """In-place ``v = m v + (g + wd p)``; ``p -= lr v`` for every named tensor with a gradient."""
    lr = state.lr(config) if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {p.grad.shape} != parameter shape {p.shape}")
        v = state.momentum.get(name)
        if v is None:
            v = state.momentum[name] = np.zeros_like(p.data)
        v *= config.momentum
        v += p.grad + config.weight_decay * p.data
        p.data -= lr * v


def plateau_schedule(state: OptimizerState, epoch_loss: float, config: TrainConfig) -> bool:
    """Track the best loss; after ``plateau_patience`` epochs without a relative
    improvement of ``plateau_threshold``, step one rung down the ladder.
    Returns True when the rate changed."""
    if epoch_loss < state.best_loss * (1.0 - config.plateau_threshold):
        state.best_loss = epoch_loss
        state.epochs_since_improvement = 0
        return False
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= config.plateau_patience and state.lr_index < len(config.lr_ladder) - 1:
        state.lr_index += 1
        state.epochs_since_improvement = 0
        return True
    return False


# ---------------------------------------------------------------- loop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.lr:g}\t{self.loss:.17g}\t{self.accuracy:.6f}"


@dataclass
class TrainResult:
    params: ModelParameters
    state: OptimizerState
    history: list


def train_step(params: ModelParameters, batch: Batch) -> tuple[float, int]:
    """Forward, backward; leaves gradients on the parameters. Returns loss and correct count."""
    with T.ComputationRecord() as record:
        logits, _ = forward_logits(batch.features, params, mode="train")
        loss = cross_entropy(logits, batch.labels)
    T.backward(record, loss, params.trainable())
    correct = int((logits.data.argmax(axis=1) == batch.labels).sum())
    return loss.item(), correct


def train(sequences: Sequence[FeatureSequence], params: ModelParameters, config: TrainConfig,
          out_dir=None, state: Optional[OptimizerState] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None,
          extra_record: Optional[dict] = None) -> TrainResult:
    """Run epochs of make_batch -> forward -> cross-entropy -> backward -> SGD -> plateau schedule.

    With ``out_dir`` set, appends ``train.log`` and rewrites ``last.ulck`` every epoch.
    """
    if not sequences:
        raise ValueError("no training utterances")
    state = state or OptimizerState()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train.log").write_text("")
    record_extra = {**(extra_record or {}), **{f"train.{k}": v for k, v in config.to_kv().items()}}

    history = []
    for epoch in range(1, config.epochs + 1):
        lr = state.lr(config)
        total_loss, total_correct, total = 0.0, 0, 0
        for idx in epoch_batches(len(sequences), config.batch_size, rng):
            batch = make_batch(sequences, idx, rng, length_range=config.length_range)
            loss, correct = train_step(params, batch)
            if not math.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(out_dir / "diagnostic.ulck", params, state.momentum, record_extra)
                raise NumericFailure(f"non-finite loss {loss} at epoch {epoch}")
            sgd_step(params.tensors, state, config, lr)
            n = len(batch.labels)
            total_loss += loss * n
            total_correct += correct
            total += n
        stats = EpochStats(epoch, lr, total_loss / total, total_correct / total)
        history.append(stats)
        plateau_schedule(state, stats.loss, config)
        log.info("epoch %d lr %g loss %.5f acc %.4f", epoch, lr, stats.loss, stats.accuracy)
        if out_dir is not None:
            with open(out_dir / "train.log", "a", encoding="utf-8") as f:
                f.write(stats.log_line() + "\n")
            save_checkpoint(out_dir / "last.ulck", params, state.momentum,
                            {**record_extra, "optim.lr_index": state.lr_index, "epoch": epoch})
        if on_epoch is not None:
            on_epoch(stats)
        if config.target_accuracy is not None and stats.accuracy >= config.target_accuracy:
            break
    return TrainResult(params, state, history)
