"""Supervised backbone training and unsupervised feedback training.

The backbone trains with plain SGD + momentum on softmax cross-entropy.
Feedback decoders train on the one-step reconstruction objective: after a
single feedforward sweep, each decoder predicts the layer below it once,
and the loss is the summed squared reconstruction error across layers.  No
recurrence and no error-correction term are involved, encoder activations
are constants, and only decoder parameters move.

Updates use v <- momentum * v + g; w <- w - lr * v with per-parameter
velocity state; equal seeds give bitwise-identical runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import ops
from .builder import NetworkSpec, build_network, init_weights, parameter_shapes
from .data import Dataset
from .dynamics import PCNetwork
from .rng import Stream


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during an optimization run."""


class FrozenBackboneError(ValueError):
    """Feedback training requires the backbone to be frozen."""


@dataclass(frozen=True)
class TrainOpts:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    accuracy: float | None = None


class _SGD:
    def __init__(self, opts: TrainOpts, param_names):
        self.lr = opts.learning_rate
        self.momentum = opts.momentum
        self.velocity = {name: None for name in param_names}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            v = self.velocity[name]
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


def _epoch_order(n: int, epoch: int, opts: TrainOpts) -> np.ndarray:
    if not opts.shuffle:
        return np.arange(n)
    # Fisher-Yates on the per-epoch stream keeps shuffles seed-deterministic
    order = np.arange(n)
    u = Stream(opts.seed, epoch + 1).uniform(n)
    for i in range(n - 1, 0, -1):
        j = int(u[i] * (i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def train_backbone(spec: NetworkSpec, dataset: Dataset, opts: TrainOpts = TrainOpts()):
    """Train the feedforward classifier from fresh weights.

    Returns (weights map including untouched decoder entries, per-epoch log).
    Decoder entries are freshly initialized so the result is directly
    buildable; feedback training is a separate stage.
    """
    if dataset.labels.max() >= spec.backbone.class_count:
        raise ValueError(
            f"dataset has label {dataset.labels.max()} but the head emits "
            f"{spec.backbone.class_count} classes"
        )
    from .builder import _make_layer

    weights = init_weights(spec, seed=opts.seed)
    names = [n for n in weights if n.startswith("backbone.")]
    # layers alias the weight arrays, so in-place SGD updates are seen
    stack = [_make_layer(ls, weights, f"backbone.{i}")
             for i, ls in enumerate(spec.backbone.layers)]

    optimizer = _SGD(opts, names)
    log = []
    for epoch in range(opts.epochs):
        order = _epoch_order(len(dataset), epoch, opts)
        total_loss, total_correct = 0.0, 0
        for start in range(0, len(dataset), opts.batch_size):
            idx = order[start : start + opts.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            logits, caches = L.forward_with_caches(stack, x)
            loss, grad = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, sample offset {start}"
                )
            total_loss += loss * len(idx)
            total_correct += int((logits.argmax(axis=1) == y).sum())
            grads = {}
            g = grad
            for i in range(len(stack) - 1, -1, -1):
                if hasattr(stack[i], "backward"):
                    g, pgrads = stack[i].backward(caches[i], g)
                    for pname, pg in pgrads.items():
                        grads[f"backbone.{i}.{pname}"] = pg
                else:
                    g = stack[i].backward_input(caches[i], g)
            optimizer.step(weights, grads)
        log.append(LogRow(
            epoch=epoch,
            split="train",
            loss=total_loss / len(dataset),
            accuracy=total_correct / len(dataset),
        ))
    return weights, log


def _sweep_activations(network: PCNetwork, x: np.ndarray):
    """Encoder outputs e_0..e_N of a plain feedforward pass."""
    acts = [x]
    for p in network.pcoders:
        acts.append(L.run_layers(p.encoder, acts[-1]))
    return acts


def reconstruction_loss(network: PCNetwork, images: np.ndarray) -> float:
    """One-step reconstruction objective, averaged per sample.

    Per sample this is the sum over layers of the squared error between each
    encoder output (the input included) and its one-step prediction from
    above.
    """
    acts = _sweep_activations(network, ops.as_f32(images))
    total = 0.0
    for i, p in enumerate(network.pcoders):
        pred = L.run_layers(p.decoder, acts[i + 1])
        diff = (acts[i] - pred).astype(np.float64)
        total += float((diff * diff).sum())
    return total / len(images)


def train_feedback(network: PCNetwork, dataset: Dataset, opts: TrainOpts = TrainOpts(),
                   holdout: Dataset | None = None):
    """Train decoder weights on clean images with the backbone frozen.

    Returns (decoder weights map, log).  Log rows carry the mean per-sample
    reconstruction loss for the train split (and holdout when given).
    """
    from .builder import network_weights

    weights = network_weights(network)
    backbone_names = [n for n in weights if n.startswith("backbone.")]
    if any(weights[n].flags.writeable for n in backbone_names):
        raise FrozenBackboneError(
            "backbone weights must be frozen (read-only) for feedback training"
        )
    decoder_names = [n for n in weights if n.startswith("pcoder")]
    optimizer = _SGD(opts, decoder_names)
    log = []
    for epoch in range(opts.epochs):
        order = _epoch_order(len(dataset), epoch, opts)
        total = 0.0
        for start in range(0, len(dataset), opts.batch_size):
            idx = order[start : start + opts.batch_size]
            x = dataset.images[idx]
            acts = _sweep_activations(network, x)
            grads = {}
            batch_loss = 0.0
            for n, p in enumerate(network.pcoders, start=1):
                pred, caches = L.forward_with_caches(p.decoder, acts[n])
                diff = pred - acts[n - 1]
                batch_loss += float((diff.astype(np.float64) ** 2).sum())
                g = (2.0 / len(idx)) * diff
                for j in range(len(p.decoder) - 1, -1, -1):
                    layer = p.decoder[j]
                    if hasattr(layer, "backward"):
                        g, pgrads = layer.backward(caches[j], g)
                        for pname, pg in pgrads.items():
                            grads[f"pcoder{n}.decoder.{j}.{pname}"] = pg
                    elif j:
                        g = layer.backward_input(caches[j], g)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"reconstruction loss became non-finite at epoch {epoch}"
                )
            total += batch_loss
            optimizer.step(weights, grads)
        log.append(LogRow(epoch=epoch, split="train", loss=total / len(dataset)))
        if holdout is not None:
            log.append(LogRow(
                epoch=epoch, split="holdout",
                loss=reconstruction_loss(network, holdout.images),
            ))
    return {n: weights[n] for n in decoder_names}, log


def evaluate(network: PCNetwork, dataset: Dataset, timesteps: int, batch_size: int = 256,
             workers: int | None = None):
    """Per-timestep accuracy and mean cross-entropy over a dataset."""
    from .parallel import map_batches
    from .dynamics import run_dynamics

    def job(lo, hi):
        outs = run_dynamics(network, dataset.images[lo:hi], timesteps)
        y = dataset.labels[lo:hi]
        correct = np.array([(o.logits.argmax(axis=1) == y).sum() for o in outs], dtype=np.int64)
        ce = np.array([ops.cross_entropy_per_sample(o.logits, y).sum() for o in outs])
        return correct, ce

    results = map_batches(job, len(dataset), batch_size, workers)
    correct = sum(r[0] for r in results)
    ce = sum(r[1] for r in results)
    return correct / len(dataset), ce / len(dataset)
