"""SGD training loop with classical momentum, plus evaluation.

The update is v <- mu*v - lr*grad; w <- w + v, on the mean batch loss, with
the sample order reshuffled each epoch by the seeded generator.  With
``deterministic`` set (the default) the BLAS thread pools are pinned to one
thread for the duration of the run, so a fixed seed reproduces the loss
history and the final parameters bitwise.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import NeurofuseError
from .network import Network, ShapeMismatch, _backward_batch, _forward_batch

logger = logging.getLogger(__name__)

__all__ = [
    "SingleClassDataset",
    "NonFiniteLoss",
    "TrainConfig",
    "EpochStats",
    "EvalResult",
    "train",
    "evaluate",
]


class SingleClassDataset(NeurofuseError):
    """Training needs both classes present."""


class NonFiniteLoss(NeurofuseError):
    """Loss became NaN/inf; training aborted with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    loss: str = "categorical_cross_entropy"  # fixed
    deterministic: bool = True  # single-threaded BLAS, bitwise reproducible

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.loss != "categorical_cross_entropy":
            raise ValueError("only categorical cross-entropy is supported")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows true label, columns predicted
    probs: np.ndarray  # per-sample class probabilities

    def to_dict(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "confusion": self.confusion.astype(int).tolist(),
            "probs": self.probs.tolist(),
        }


def _stack_batch(net: Network, samples):
    n_branches = len(net.spec.branches)
    inputs = []
    for b in range(n_branches):
        try:
            inputs.append(np.stack([np.asarray(s[0][b]) for s in samples]))
        except IndexError as exc:
            raise ShapeMismatch(
                f"samples carry fewer tensors than the network's {n_branches} branches"
            ) from exc
    labels = np.array([int(s[1]) for s in samples])
    return inputs, labels


def _onehot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train(net: Network, dataset, cfg: TrainConfig | None = None):
    """Train in place; returns (parameters, per-epoch history).

    ``dataset`` is a sequence of (inputs, label) pairs where ``inputs`` holds
    one array of shape ``input_dims`` per branch and ``label`` is the class
    index.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    labels = {int(s[1]) for s in dataset}
    if len(labels) < 2:
        raise SingleClassDataset(f"dataset holds only class(es) {sorted(labels)}")
    n_classes = net.spec.head.out_nodes
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in net.params]
    history: list[EpochStats] = []

    limits = threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()
    with limits:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(dataset))
            total_loss = 0.0
            correct = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = [dataset[i] for i in order[start : start + cfg.batch_size]]
                inputs, batch_labels = _stack_batch(net, chunk)
                probs, cache = _forward_batch(net, inputs, train=True)
                eps = np.finfo(probs.dtype).tiny
                losses = -np.log(
                    np.maximum(probs[np.arange(len(chunk)), batch_labels], eps)
                )
                loss = float(losses.mean())
                if not np.isfinite(loss):
                    raise NonFiniteLoss(
                        f"loss {loss} at epoch {epoch}, batch starting {start}"
                    )
                grads = _backward_batch(net, cache, probs, _onehot(batch_labels, n_classes))
                for p, v, g in zip(net.params, velocity, grads):
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    p += v
                total_loss += loss * len(chunk)
                correct += int((probs.argmax(axis=1) == batch_labels).sum())
            stats = EpochStats(
                epoch=epoch,
                loss=total_loss / len(dataset),
                accuracy=correct / len(dataset),
            )
            history.append(stats)
            logger.info(
                "epoch %d: loss %.4f, accuracy %.3f", epoch, stats.loss, stats.accuracy
            )
    return net.params, history


def evaluate(net: Network, dataset, batch_size: int = 8) -> EvalResult:
    """Argmax classification accuracy, confusion matrix and per-sample probs."""
    n_classes = net.spec.head.out_nodes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    all_probs = []
    correct = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        inputs, labels = _stack_batch(net, chunk)
        probs, _ = _forward_batch(net, inputs, train=False)
        pred = probs.argmax(axis=1)
        correct += int((pred == labels).sum())
        for t, p in zip(labels, pred):
            confusion[t, p] += 1
        all_probs.append(probs)
    return EvalResult(
        accuracy=correct / len(dataset),
        confusion=confusion,
        probs=np.concatenate(all_probs) if all_probs else np.zeros((0, n_classes)),
    )
