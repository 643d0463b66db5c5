"""The predictive-coding recurrence.

After an initial feedforward sweep, every layer representation is revised
once per timestep, bottom-up:

    e_n <- beta * ff + lambda * fb + (1 - beta - lambda) * e_n - alpha * grad

where ``ff`` re-encodes the (already updated) layer below, ``fb`` is the
prediction of this layer produced by the layer above on the previous
timestep, and ``grad`` is the gradient of the layer-below reconstruction
error with respect to e_n.  The gradient is evaluated on the residual
snapshot stored when this layer last decoded, not on the freshly updated
layer below; the input e_0 never changes.

Reconstruction errors are per-sample mean squared errors; the optional
gradient-scaling toggle multiplies the error gradient by K/sqrt(C) (K =
element count of the predicted layer, C = its receptive-field fan through
the decoder's deconv kernel) to counteract the 1/K attenuation that the
mean introduces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from . import ops
from .ops import Tensor


class DynamicsError(RuntimeError):
    """Raised when dynamics are driven from an invalid or stale state."""


@dataclass(frozen=True)
class HyperParams:
    """Per-PCoder balancing coefficients (feedforward, feedback, correction)."""

    beta: float = 0.3
    lam: float = 0.3
    alpha: float = 0.01

    def validate(self) -> None:
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"feedforward coefficient must be in [0, 1], got {self.beta}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"feedback coefficient must be in [0, 1], got {self.lam}")
        if self.beta + self.lam > 1.0 + 1e-12:
            raise ValueError(
                f"feedforward + feedback must not exceed 1, got {self.beta} + {self.lam}"
            )
        if self.alpha < 0.0:
            raise ValueError(f"error-correction step must be >= 0, got {self.alpha}")


@dataclass
class PCoder:
    """One encoder stage plus the decoder that predicts the layer below it."""

    encoder: list
    decoder: list
    hp: HyperParams
    gradient_scaling: bool
    in_shape: tuple   # per-sample shape of the predicted layer (e_{n-1})
    out_shape: tuple  # per-sample shape of e_n

    def __post_init__(self):
        self.hp.validate()
        self.K = int(np.prod(self.in_shape))
        deconvs = [l for l in self.decoder if isinstance(l, L.Deconv)]
        if not deconvs:
            raise ValueError("a PCoder decoder must contain a deconv layer")
        # receptive-field fan through the deconv that emits the prediction
        k = deconvs[-1].weights.kernel
        self.C = k.shape[2] * k.shape[3] * self.in_shape[0]

    @property
    def scale_factor(self) -> float:
        """Gradient multiplier sqrt(K^2 / C) applied when scaling is on."""
        return self.K / math.sqrt(self.C)


@dataclass
class PCNetwork:
    """Immutable assembly of PCoders plus the classification head."""

    pcoders: list
    head: list
    input_shape: tuple
    class_count: int
    name: str = "pcnet"
    spec: object = None  # builder NetworkSpec, kept for serialization

    @property
    def depth(self) -> int:
        return len(self.pcoders)

    def backbone_layers(self) -> list:
        out = []
        for p in self.pcoders:
            out.extend(p.encoder)
        return out

    def forward_backbone(self, x: Tensor) -> Tensor:
        """Plain feedforward logits, no recurrence."""
        h = L.run_layers(self.backbone_layers(), x)
        return L.run_layers(self.head, h)

    def input_gradient(self, x: Tensor, targets) -> Tensor:
        """d(mean cross-entropy)/dx through the feedforward pass only."""
        all_layers = self.backbone_layers() + self.head
        logits, caches = L.forward_with_caches(all_layers, x)
        _, grad = ops.softmax_cross_entropy(logits, targets)
        return L.backward_input_chain(all_layers, caches, grad)

    def with_hyperparams(self, assignment) -> "PCNetwork":
        """Copy of the network with per-PCoder coefficients replaced."""
        if len(assignment) != self.depth:
            raise ValueError(f"expected {self.depth} triples, got {len(assignment)}")
        for hp in assignment:
            hp.validate()
        pcoders = [replace(p, hp=hp) for p, hp in zip(self.pcoders, assignment)]
        return replace(self, pcoders=pcoders)


@dataclass
class PCNetworkState:
    """Per-batch dynamic state: one entry per PCoder, plus the timestep."""

    x: Tensor                 # e_0, constant across timesteps
    e: list                   # e_1..e_N, each (N, C, H, W)
    d: list                   # d_0..d_{N-1}: prediction of the layer below
    eps: list                 # per-sample reconstruction errors, each (N,)
    residual: list            # snapshot e_{n-1} - d_{n-1} at decode time
    decoder_cache: list       # per-PCoder caches for decoder backward
    t: int = 0


def _decode(pcoder: PCoder, e: Tensor):
    d, caches = L.forward_with_caches(pcoder.decoder, e)
    return d, caches


def init_feedforward_sweep(network: PCNetwork, image: Tensor) -> PCNetworkState:
    """Populate all e_n with a feedforward pass, then decode each prediction."""
    x = ops.as_f32(image)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(network.input_shape):
        raise ops.ShapeError(
            f"input shape {x.shape[1:]} does not match configured {network.input_shape}"
        )
    e, d, eps, residual, caches = [], [], [], [], []
    below = x
    for p in network.pcoders:
        en = L.run_layers(p.encoder, below)
        dn, cache = _decode(p, en)
        e.append(en)
        d.append(dn)
        residual.append(below - dn)
        eps.append(ops.sample_mse(below, dn))
        caches.append(cache)
        below = en
    return PCNetworkState(x=x, e=e, d=d, eps=eps, residual=residual, decoder_cache=caches, t=0)


def error_gradient(network: PCNetwork, state: PCNetworkState, n: int) -> Tensor:
    """Gradient of the layer-(n-1) reconstruction error wrt e_n (1-based n).

    Equals -(2/K) times the decoder's input-gradient applied to the stored
    residual; multiplied by sqrt(K^2/C) when gradient scaling is on.
    """
    if not 1 <= n <= network.depth:
        raise IndexError(f"pcoder index {n} out of range 1..{network.depth}")
    p = network.pcoders[n - 1]
    cache = state.decoder_cache[n - 1]
    if cache is None:
        raise DynamicsError("error_gradient requires a completed feedforward sweep")
    grad_d = (-2.0 / p.K) * state.residual[n - 1]
    g = L.backward_input_chain(p.decoder, cache, grad_d.astype(np.float32))
    if p.gradient_scaling:
        g = g * np.float32(p.scale_factor)
    return g


def pcoder_update(e_prev: Tensor, ff: Tensor, fb, grad, hp: HyperParams) -> Tensor:
    """One application of the update rule; ``fb=None`` drops the feedback term.

    Zero-coefficient terms are skipped outright, so degenerate settings are
    exact: all-zero coefficients return the representation unchanged, and
    pure feedforward returns ``ff`` bitwise.  Accumulation runs in f64 and
    rounds once at the end.
    """
    hp.validate()
    mem = 1.0 - hp.beta - hp.lam
    if hp.beta == 0.0 and hp.lam == 0.0 and hp.alpha == 0.0:
        return e_prev.copy()
    out = np.zeros(e_prev.shape, dtype=np.float64)
    if hp.beta != 0.0:
        out += hp.beta * ff.astype(np.float64)
    if hp.lam != 0.0 and fb is not None:
        out += hp.lam * fb.astype(np.float64)
    if mem != 0.0:
        out += mem * e_prev.astype(np.float64)
    if hp.alpha != 0.0:
        if grad is None:
            raise DynamicsError("error-correction step requires a gradient")
        out -= hp.alpha * grad.astype(np.float64)
    return out.astype(np.float32)


def step(network: PCNetwork, state: PCNetworkState) -> PCNetworkState:
    """Advance every layer once, bottom-up, then bump the timestep."""
    below = state.x
    for i, p in enumerate(network.pcoders):
        ff = L.run_layers(p.encoder, below)
        fb = state.d[i + 1] if i + 1 < network.depth else None
        grad = error_gradient(network, state, i + 1) if p.hp.alpha != 0.0 else None
        en = pcoder_update(state.e[i], ff, fb, grad, p.hp)
        dn, cache = _decode(p, en)
        state.e[i] = en
        state.d[i] = dn
        state.residual[i] = below - dn
        state.eps[i] = ops.sample_mse(below, dn)
        state.decoder_cache[i] = cache
        below = en
    state.t += 1
    return state


@dataclass
class TimestepOutput:
    """What the engine reports after each timestep."""

    t: int
    logits: Tensor            # (N, class_count)
    eps: Tensor               # (depth, N) per-sample reconstruction errors
    d0: Tensor                # (N, C, H, W) input reconstruction
    e: list | None = None     # optional copies of e_1..e_N


def _snapshot(network: PCNetwork, state: PCNetworkState, record_e: bool) -> TimestepOutput:
    logits = L.run_layers(network.head, state.e[-1])
    return TimestepOutput(
        t=state.t,
        logits=logits,
        eps=np.stack(state.eps),
        d0=state.d[0].copy(),
        e=[en.copy() for en in state.e] if record_e else None,
    )


def run_dynamics(network: PCNetwork, image: Tensor, timesteps: int, record_e: bool = False):
    """Sweep, then ``timesteps`` updates; returns T+1 per-timestep outputs."""
    if timesteps < 0:
        raise ValueError(f"timestep count must be >= 0, got {timesteps}")
    state = init_feedforward_sweep(network, image)
    outputs = [_snapshot(network, state, record_e)]
    for _ in range(timesteps):
        state = step(network, state)
        outputs.append(_snapshot(network, state, record_e))
    return outputs
