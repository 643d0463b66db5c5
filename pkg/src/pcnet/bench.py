"""Robustness benchmarking: corruption-error scores, denoising and
representation-drift curves, transfer attacks, and coefficient tuning.

Every curve has T+1 entries, one per timestep including the feedforward
baseline at index 0.  Corruption error for one noise kind is the summed
per-severity error rate of the model divided by that of the baseline (the
same network at timestep 0); the mean over kinds is the mCE.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import Dataset
from .dynamics import HyperParams, PCNetwork, run_dynamics
from .noise import NoiseSpec, apply_noise_batch
from .parallel import map_batches


class EmptySubsetError(RuntimeError):
    """No images qualify for the requested evaluation."""


# canonical severity ladders, mildest first; desk-scale runs use the first 3
SEVERITY_LADDERS = {
    "gaussian": (0.25, 0.5, 0.75, 1.0, 2.0),
    "speckle": (0.5, 1.0, 1.5, 2.0, 3.0),
    "impulse": (0.1, 0.2, 0.4, 0.6, 0.8),
    "shot": (60.0, 25.0, 12.0, 6.0, 3.0),
}


@dataclass(frozen=True)
class MetricsRecord:
    """One CSV row of benchmark output."""

    metric: str
    value: float
    timestep: int
    noise_kind: str = ""
    severity: float | None = None
    layer: int | None = None

    def __post_init__(self):
        if self.timestep < 0:
            raise ValueError(f"timestep must be >= 0, got {self.timestep}")
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.metric} has non-finite value {self.value}")


# --------------------------------------------------------------------------
# Corruption error
# --------------------------------------------------------------------------

def corruption_error(model_errors, baseline_errors) -> float:
    """Summed error rates over severities, normalized by the baseline.

    Returns NaN (with a warning) when the baseline never errs, which makes
    the score undefined.
    """
    model_errors = np.asarray(model_errors, dtype=np.float64)
    baseline_errors = np.asarray(baseline_errors, dtype=np.float64)
    if model_errors.shape != baseline_errors.shape:
        raise ValueError("model and baseline must cover the same severities")
    denom = baseline_errors.sum()
    if denom <= 0.0:
        warnings.warn("baseline error rate is zero; corruption error undefined", RuntimeWarning)
        return float("nan")
    return float(model_errors.sum() / denom)


def mean_corruption_error(ce_by_kind: dict) -> float:
    """Unweighted mean CE over kinds, excluding undefined entries."""
    values = [v for v in ce_by_kind.values() if np.isfinite(v)]
    if not values:
        raise ValueError("no defined corruption-error scores to average")
    if len(values) < len(ce_by_kind):
        warnings.warn(
            f"excluding {len(ce_by_kind) - len(values)} undefined corruption-error scores",
            RuntimeWarning,
        )
    return float(np.mean(values))


def per_timestep_error_rates(network: PCNetwork, dataset: Dataset, spec: NoiseSpec,
                             timesteps: int, batch_size: int = 256,
                             workers: int | None = None) -> np.ndarray:
    """Error rate (1 - accuracy) at each timestep under one corruption."""
    noisy = apply_noise_batch(dataset.images, spec)

    def job(lo, hi):
        outs = run_dynamics(network, noisy[lo:hi], timesteps)
        y = dataset.labels[lo:hi]
        return np.array([(o.logits.argmax(axis=1) != y).sum() for o in outs], dtype=np.int64)

    wrong = sum(map_batches(job, len(dataset), batch_size, workers))
    return wrong / len(dataset)


def noise_benchmark(network: PCNetwork, dataset: Dataset, kinds, severities: dict,
                    timesteps: int, seed: int = 0, batch_size: int = 256,
                    workers: int | None = None):
    """Per-kind CE at every timestep, plus the mCE curve.

    ``severities`` maps kind -> ladder of severity values.  The baseline for
    each kind is the same network's timestep-0 row.  Returns (records, ce,
    mce) where ce[kind] is the (T+1,) CE curve.
    """
    records = []
    ce = {}
    for kind in kinds:
        ladder = severities[kind]
        # error rates per severity per timestep
        rates = np.stack([
            per_timestep_error_rates(
                network, dataset, NoiseSpec(kind, s, seed), timesteps, batch_size, workers
            )
            for s in ladder
        ])
        for si, s in enumerate(ladder):
            for t in range(timesteps + 1):
                records.append(MetricsRecord(
                    metric="error_rate", value=float(rates[si, t]),
                    timestep=t, noise_kind=kind, severity=float(s),
                ))
        baseline = rates[:, 0]
        curve = np.array([
            corruption_error(rates[:, t], baseline) for t in range(timesteps + 1)
        ])
        ce[kind] = curve
        for t in range(timesteps + 1):
            records.append(MetricsRecord(
                metric="corruption_error", value=float(curve[t]),
                timestep=t, noise_kind=kind,
            ))
    mce = np.array([
        mean_corruption_error({k: ce[k][t] for k in ce}) for t in range(timesteps + 1)
    ])
    for t in range(timesteps + 1):
        records.append(MetricsRecord(metric="mean_corruption_error", value=float(mce[t]), timestep=t))
    return records, ce, mce


# --------------------------------------------------------------------------
# Denoising / representation-drift curves
# --------------------------------------------------------------------------

def reconstruction_mse_curve(network: PCNetwork, dataset: Dataset, spec: NoiseSpec,
                             timesteps: int, batch_size: int = 256,
                             workers: int | None = None):
    """Mean MSE between the input reconstruction and the *clean* image.

    Returns (curve, normalized) of length T+1; the normalized variant
    divides by the timestep-0 value.
    """
    noisy = apply_noise_batch(dataset.images, spec)

    def job(lo, hi):
        outs = run_dynamics(network, noisy[lo:hi], timesteps)
        clean = dataset.images[lo:hi]
        return np.array([ops.sample_mse(o.d0, clean).sum() for o in outs])

    total = sum(map_batches(job, len(dataset), batch_size, workers))
    curve = total / len(dataset)
    return curve, curve / curve[0]


def _pearson_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample 1 - Pearson r over flattened activations.

    Zero-variance vectors: distance 0 when both are constant and equal,
    else 1.
    """
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt((ac * ac).sum(axis=1))
    nb = np.sqrt((bc * bc).sum(axis=1))
    ok = (na > 0) & (nb > 0)
    r = np.zeros(len(a))
    r[ok] = (ac[ok] * bc[ok]).sum(axis=1) / (na[ok] * nb[ok])
    dist = 1.0 - r
    degenerate = ~ok
    if degenerate.any():
        equal = np.all(a[degenerate] == b[degenerate], axis=1)
        dist[degenerate] = np.where(equal, 0.0, 1.0)
    return dist


def representation_distance_curve(network: PCNetwork, dataset: Dataset, spec: NoiseSpec,
                                  timesteps: int, batch_size: int = 256,
                                  workers: int | None = None):
    """Mean correlation distance between clean-run and noisy-run encoders.

    Returns (raw, normalized), each (depth, T+1); normalization divides each
    layer's row by its timestep-0 value.
    """
    noisy = apply_noise_batch(dataset.images, spec)

    def job(lo, hi):
        clean_outs = run_dynamics(network, dataset.images[lo:hi], timesteps, record_e=True)
        noisy_outs = run_dynamics(network, noisy[lo:hi], timesteps, record_e=True)
        acc = np.zeros((network.depth, timesteps + 1))
        for t, (co, no) in enumerate(zip(clean_outs, noisy_outs)):
            for n in range(network.depth):
                acc[n, t] = _pearson_distance(co.e[n], no.e[n]).sum()
        return acc

    total = sum(map_batches(job, len(dataset), batch_size, workers))
    raw = total / len(dataset)
    return raw, raw / raw[:, :1]


# --------------------------------------------------------------------------
# Transfer attacks
# --------------------------------------------------------------------------

def select_qualifying(network: PCNetwork, dataset: Dataset, timesteps: int,
                      limit: int | None = None, batch_size: int = 256,
                      workers: int | None = None) -> np.ndarray:
    """Indices of images classified correctly at every timestep, clean."""
    def job(lo, hi):
        outs = run_dynamics(network, dataset.images[lo:hi], timesteps)
        y = dataset.labels[lo:hi]
        good = np.ones(hi - lo, dtype=bool)
        for o in outs:
            good &= o.logits.argmax(axis=1) == y
        return np.nonzero(good)[0] + lo

    idx = np.concatenate(map_batches(job, len(dataset), batch_size, workers))
    return idx[:limit] if limit else idx


def craft_transfer_attack(network: PCNetwork, images: np.ndarray, targets: np.ndarray,
                          epsilon: float, steps: int) -> np.ndarray:
    """Targeted iterative sign-gradient attack against the feedforward pass.

    ``steps`` iterations of size epsilon/steps, projected onto the L-inf
    ball around the original images and clipped to [0, 1].  Gradients come
    from the timestep-0 pass only; the recurrence never sees the attack.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x0 = ops.as_f32(images)
    x = x0.copy()
    if epsilon == 0 or steps < 1:
        return x
    alpha = np.float32(epsilon / steps)
    lo = np.maximum(x0 - np.float32(epsilon), 0.0)
    hi = np.minimum(x0 + np.float32(epsilon), 1.0)
    for _ in range(steps):
        g = network.input_gradient(x, targets)
        x = np.clip(x - alpha * np.sign(g), lo, hi)  # descend toward the target
    return x


def transfer_attack_eval(network: PCNetwork, dataset: Dataset, epsilon: float,
                         steps: int = 10, timesteps: int = 8,
                         target_class: int | None = None, limit: int | None = None,
                         batch_size: int = 256, workers: int | None = None):
    """Success rate per timestep of a targeted attack crafted at timestep 0.

    Qualifying images are those correctly classified at every timestep
    without the attack.  Each image is pushed toward ``target_class``, or
    toward (label + 1) mod classes when none is given.
    """
    idx = select_qualifying(network, dataset, timesteps, limit, batch_size, workers)
    if len(idx) == 0:
        raise EmptySubsetError("no images are correctly classified at every timestep")
    subset = dataset.subset(idx)
    if target_class is None:
        targets = (subset.labels + 1) % dataset.class_count
    else:
        keep = subset.labels != target_class
        subset = subset.subset(np.nonzero(keep)[0])
        if len(subset) == 0:
            raise EmptySubsetError("every qualifying image already has the target label")
        targets = np.full(len(subset), target_class, dtype=np.int64)

    def job(lo, hi):
        adv = craft_transfer_attack(network, subset.images[lo:hi], targets[lo:hi], epsilon, steps)
        outs = run_dynamics(network, adv, timesteps)
        return np.array([
            (o.logits.argmax(axis=1) == targets[lo:hi]).sum() for o in outs
        ], dtype=np.int64)

    hits = sum(map_batches(job, len(subset), batch_size, workers))
    return hits / len(subset), len(subset)


# --------------------------------------------------------------------------
# Hyperparameter tuning
# --------------------------------------------------------------------------

TUNE_TIMESTEPS = 4


def _tuning_objective(network: PCNetwork, images: np.ndarray, labels: np.ndarray,
                      batch_size: int, workers: int | None) -> float:
    """Mean cross-entropy averaged over timesteps 1..4 on corrupted images."""
    def job(lo, hi):
        outs = run_dynamics(network, images[lo:hi], TUNE_TIMESTEPS)
        return sum(
            ops.cross_entropy_per_sample(o.logits, labels[lo:hi]).sum()
            for o in outs[1:]
        )

    total = sum(map_batches(job, len(images), batch_size, workers))
    return float(total) / (len(images) * TUNE_TIMESTEPS)


def _feasible_grid(search_space: dict):
    betas = search_space.get("feedforward", [DEFAULT_GRID["feedforward"][0]])
    lams = search_space.get("feedback", [DEFAULT_GRID["feedback"][0]])
    alphas = search_space.get("pc", [DEFAULT_GRID["pc"][0]])
    grid = [
        HyperParams(float(b), float(l), float(a))
        for b, l, a in itertools.product(betas, lams, alphas)
        if b + l <= 1.0
    ]
    if not grid:
        raise ValueError("search space contains no feasible (feedforward + feedback <= 1) point")
    return grid


DEFAULT_GRID = {
    "feedforward": [0.2, 0.3, 0.5, 0.8],
    "feedback": [0.0, 0.1, 0.3],
    "pc": [0.0, 0.01, 0.05],
}


def tune_hyperparams(network: PCNetwork, tuning_set: Dataset, spec: NoiseSpec,
                     search_space: dict | None = None, mode: str = "whole-network",
                     batch_size: int = 256, workers: int | None = None):
    """Grid-search the balancing coefficients on corrupted tuning images.

    The objective is the mean cross-entropy averaged over timesteps 1..4.
    ``whole-network`` assigns one shared triple; ``per-pcoder`` greedily
    optimizes each PCoder's triple in ascending order with the others held
    at their current values.  Ties break toward larger feedforward weight,
    then earlier grid order.  Returns (assignment, log rows).
    """
    if mode not in ("whole-network", "per-pcoder"):
        raise ValueError(f"unknown tuning mode '{mode}'")
    grid = _feasible_grid(search_space or DEFAULT_GRID)
    noisy = apply_noise_batch(tuning_set.images, spec)
    labels = tuning_set.labels
    log = []

    def objective(assignment) -> float:
        candidate = network.with_hyperparams(assignment)
        return _tuning_objective(candidate, noisy, labels, batch_size, workers)

    def better(trial, best) -> bool:
        obj_t, hp_t = trial
        obj_b, hp_b = best
        if obj_t != obj_b:
            return obj_t < obj_b
        return hp_t.beta > hp_b.beta

    if mode == "whole-network":
        best = None
        for hp in grid:
            obj = objective([hp] * network.depth)
            log.append(("all", hp, obj))
            if best is None or better((obj, hp), best):
                best = (obj, hp)
        return [best[1]] * network.depth, log

    assignment = [p.hp for p in network.pcoders]
    for i in range(network.depth):
        best = None
        for hp in grid:
            trial = list(assignment)
            trial[i] = hp
            obj = objective(trial)
            log.append((f"pcoder{i + 1}", hp, obj))
            if best is None or better((obj, hp), best):
                best = (obj, hp)
        assignment[i] = best[1]
    return assignment, log
