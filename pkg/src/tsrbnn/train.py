"""Quantization-aware training: ADAM on latent weights, stratified split, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec
from .layers import Param, softmax_xent
from .network import Model, build_model

log = logging.getLogger(__name__)

# SeedSequence spawn keys; each consumer of randomness gets its own stream
_INIT_STREAM = 0
_SPLIT_STREAM = 1
_SHUFFLE_STREAM = 2


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    seed: int = 0
    val_ratio: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (batch norm), got {self.batch_size}")
        if self.learning_rate < 0 or self.adam_epsilon <= 0:
            raise ValueError("learning rate must be >= 0 and adam epsilon > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if not 0 <= self.val_ratio < 1:
            raise ValueError(f"val_ratio must lie in [0, 1), got {self.val_ratio}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class Adam:
    """ADAM with bias correction over a fixed list of parameters.

    Latent weights flagged ``clip`` are clamped to [-1, 1] after every step.
    """

    def __init__(self, params: list[Param], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.params = params
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.value -= update.astype(p.value.dtype, copy=False)
            if p.clip:
                np.clip(p.value, -1.0, 1.0, out=p.value)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true label, cols = predicted

    @classmethod
    def from_predictions(cls, labels, predictions, classes: int) -> "ConfusionMatrix":
        cm = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        return "".join(",".join(str(int(v)) for v in row) + "\n" for row in self.counts)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float

    def to_line(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.train_acc!r},{self.val_acc!r}"


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    @property
    def best_val_epoch(self) -> int:
        return max(self.records, key=lambda r: r.val_acc).epoch


def stratified_split(labels, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices so each class contributes ``round(ratio * n_c)`` to the first part."""
    labels = np.asarray(labels)
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie strictly in (0, 1), got {ratio}")
    rng = _rng(seed, _SPLIT_STREAM)
    first, second = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {int(c)} has {len(idx)} sample(s); at least 2 are needed")
        idx = rng.permutation(idx)
        k = min(max(int(round(ratio * len(idx))), 1), len(idx) - 1)
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_dataset(ds, ratio: float = 0.8, seed: int = 0):
    train_idx, val_idx = stratified_split(ds.labels, ratio, seed)
    return ds.subset(train_idx), ds.subset(val_idx)


def _batches(n: int, batch_size: int, order: np.ndarray):
    starts = list(range(0, n, batch_size))
    # a trailing batch of one cannot be batch-normalized; fold it into its predecessor
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


def evaluate(model, ds, batch_size: int = 256) -> tuple[float, ConfusionMatrix]:
    """Top-1 accuracy and confusion matrix; ``model`` is anything with ``logits``."""
    labels = np.asarray(ds.labels)
    classes = model.classes
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(
            f"dataset labels span [{labels.min()}, {labels.max()}] but the model has {classes} classes"
        )
    preds = np.empty(len(labels), dtype=np.int64)
    for s in range(0, len(labels), batch_size):
        preds[s:s + batch_size] = np.argmax(model.logits(ds.images[s:s + batch_size]), axis=1)
    cm = ConfusionMatrix.from_predictions(labels, preds, classes)
    acc = float((preds == labels).mean()) if len(labels) else 0.0
    return acc, cm


def fit(model: Model, train_ds, val_ds, cfg: TrainConfig) -> History:
    """Train ``model`` in place for ``cfg.epochs`` epochs."""
    labels = np.asarray(train_ds.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= model.classes):
        raise ValueError(f"training labels must lie in [0, {model.classes})")
    if len(train_ds) < 2:
        raise ValueError("need at least 2 training samples")
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
    history = History()
    for epoch in range(1, cfg.epochs + 1):
        order = _rng(cfg.seed, _SHUFFLE_STREAM, epoch).permutation(len(train_ds))
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in _batches(len(train_ds), cfg.batch_size, order):
            x = train_ds.images[idx]
            y = labels[idx]
            logits = model.forward(x, training=True)
            loss, grad = softmax_xent(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            model.backward(grad)
            opt.step()
            loss_sum += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == y).sum())
            seen += len(idx)
        val_acc = evaluate(model, val_ds)[0] if len(val_ds) else float("nan")
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val_acc)
        history.records.append(rec)
        log.info("epoch %d loss=%.4f train_acc=%.4f val_acc=%.4f",
                 epoch, rec.train_loss, rec.train_acc, rec.val_acc)
    if len(val_ds):
        log.info("best validation accuracy at epoch %d", history.best_val_epoch)
    return history


def train(arch: ArchSpec, ds, cfg: TrainConfig) -> tuple[Model, History]:
    """Build, split 80:20 (stratified) and train a model; the final epoch is kept."""
    if ds.images.shape[1] != arch.input_size:
        raise ValueError(
            f"dataset images are {ds.images.shape[1]}px but the architecture expects "
            f"{arch.input_size}px"
        )
    model = build_model(arch, _rng(cfg.seed, _INIT_STREAM))
    if cfg.val_ratio > 0:
        train_ds, val_ds = split_dataset(ds, 1 - cfg.val_ratio, cfg.seed)
    else:
        train_ds, val_ds = ds, ds.subset(np.array([], dtype=np.int64))
    history = fit(model, train_ds, val_ds, cfg)
    model.metadata.update(
        seed=cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, adam_beta1=cfg.beta1, adam_beta2=cfg.beta2,
        adam_epsilon=cfg.adam_epsilon, split=f"stratified {1 - cfg.val_ratio:g}:{cfg.val_ratio:g}",
        final_val_acc=history.records[-1].val_acc,
        best_val_epoch=history.best_val_epoch if len(val_ds) else None,
    )
    return model, history
