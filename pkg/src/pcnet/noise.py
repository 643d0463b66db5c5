"""Image corruption generators.

Each corruption is a pure function of (image, spec): the per-image stream is
derived from (spec.seed, image index), so corrupting a batch in any order,
on any worker count, yields bit-identical results.  All outputs are clipped
back to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream

KINDS = ("gaussian", "shot", "impulse", "speckle")


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption kind plus its scalar severity.

    Severity is sigma for gaussian/speckle, the Poisson event scale for shot
    (smaller = noisier), and the flip probability for impulse.
    """

    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind '{self.kind}', expected one of {KINDS}")
        if not self.severity > 0:
            raise ValueError(f"severity must be > 0, got {self.severity}")


def apply_noise(image: np.ndarray, spec: NoiseSpec, index: int = 0) -> np.ndarray:
    """Corrupt one image (C, H, W) or (1, C, H, W); ``index`` selects the stream."""
    squeeze = image.ndim == 4
    x = image[0] if squeeze else image
    stream = Stream(spec.seed, index)
    if spec.kind == "gaussian":
        out = x + stream.normal(x.shape) * spec.severity
    elif spec.kind == "speckle":
        out = x * (1.0 + stream.normal(x.shape) * spec.severity)
    elif spec.kind == "impulse":
        u = stream.uniform(x.shape)
        out = np.where(u < spec.severity / 2.0, 0.0, np.where(u >= 1.0 - spec.severity / 2.0, 1.0, x))
    elif spec.kind == "shot":
        counts = stream.poisson(x.astype(np.float64) * spec.severity)
        out = counts / spec.severity
    else:  # unreachable; NoiseSpec validates
        raise ValueError(spec.kind)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[None] if squeeze else out


def apply_noise_batch(images: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Corrupt (N, C, H, W) images; image ``i`` uses stream (seed, i)."""
    out = np.empty_like(images)
    for i in range(len(images)):
        out[i] = apply_noise(images[i], spec, index=i)
    return out
