"""Declarative network construction from TOML configs.

A config names a backbone (explicit layer list plus classification head) and
carves its body into contiguous encoder stages, one per PCoder.  Decoders
may be given explicitly or left to the default rule: upscale by the integer
spatial ratio, then a 3x3 stride-1 transposed convolution onto the predicted
layer's channel count.  Missing coefficients fall back to
(feedforward, feedback, pc) = (0.3, 0.3, 0.01).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib as _toml
except ImportError:  # Python 3.10
    import tomli as _toml

from . import layers as L
from .dynamics import HyperParams, PCNetwork, PCoder
from .ops import LayerWeights, ShapeError
from .rng import Stream

DEFAULT_HP = HyperParams(beta=0.3, lam=0.3, alpha=0.01)


class ConfigError(ValueError):
    """Config text that cannot be parsed or does not validate."""


class WeightsMismatchError(ValueError):
    """Supplied weight map does not cover the spec."""


def validate_hyperparams(hp: HyperParams) -> None:
    """Raise ValueError naming the violated constraint, if any."""
    hp.validate()


# --------------------------------------------------------------------------
# Layer descriptors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    label: str | None = None
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class ReluSpec:
    label: str | None = None
    type: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool2Spec:
    label: str | None = None
    type: str = field(default="maxpool2", init=False)


@dataclass(frozen=True)
class FlattenSpec:
    label: str | None = None
    type: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class DenseSpec:
    out_features: int
    label: str | None = None
    type: str = field(default="dense", init=False)


@dataclass(frozen=True)
class UpsampleSpec:
    factor: int
    type: str = field(default="upsample", init=False)


@dataclass(frozen=True)
class DeconvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    type: str = field(default="deconv", init=False)


def _shape_after(spec, shape):
    """Per-sample shape propagation through one layer descriptor."""
    if isinstance(spec, ConvSpec):
        c, h, w = shape
        span_h = h + 2 * spec.padding - spec.kernel
        span_w = w + 2 * spec.padding - spec.kernel
        if span_h < 0 or span_w < 0 or span_h % spec.stride or span_w % spec.stride:
            raise ConfigError(f"conv {spec} does not tile a {shape} input")
        return (spec.out_channels, span_h // spec.stride + 1, span_w // spec.stride + 1)
    if isinstance(spec, DeconvSpec):
        c, h, w = shape
        ho = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
        wo = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
        if ho < 1 or wo < 1:
            raise ConfigError(f"deconv {spec} collapses a {shape} input")
        return (spec.out_channels, ho, wo)
    if isinstance(spec, MaxPool2Spec):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ConfigError(f"maxpool2 needs even extents, got {shape}")
        return (c, h // 2, w // 2)
    if isinstance(spec, UpsampleSpec):
        c, h, w = shape
        return (c, h * spec.factor, w * spec.factor)
    if isinstance(spec, (ReluSpec,)):
        return shape
    if isinstance(spec, FlattenSpec):
        return (int(np.prod(shape)),)
    if isinstance(spec, DenseSpec):
        if len(shape) != 1:
            raise ConfigError(f"dense must follow flatten, got input shape {shape}")
        return (spec.out_features,)
    raise ConfigError(f"unknown layer descriptor {spec!r}")


# --------------------------------------------------------------------------
# Network spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneSpec:
    input_size: tuple        # (C, H, W)
    layers: tuple            # layer descriptors
    head_start: int          # index where the classification head begins

    def body_shapes(self):
        """Shapes after each body layer, starting from the input."""
        shapes = [tuple(self.input_size)]
        for spec in self.layers[: self.head_start]:
            shapes.append(_shape_after(spec, shapes[-1]))
        return shapes

    def validate(self) -> None:
        if len(self.input_size) != 3 or any(int(v) < 1 for v in self.input_size):
            raise ConfigError(f"input_size must be 3 positive ints, got {self.input_size}")
        if not self.layers:
            raise ConfigError("backbone must declare at least one layer")
        if not 0 < self.head_start <= len(self.layers):
            raise ConfigError(f"head_start {self.head_start} out of range")
        flat = [i for i, s in enumerate(self.layers) if isinstance(s, FlattenSpec)]
        if len(flat) != 1:
            raise ConfigError(f"backbone must contain exactly one flatten, found {len(flat)}")
        if flat[0] < self.head_start:
            raise ConfigError("flatten must sit at or after head_start")
        for spec in self.layers[: self.head_start]:
            if isinstance(spec, (FlattenSpec, DenseSpec)):
                raise ConfigError(f"{spec.type} not allowed in the body")
        # full propagation (body + head) must succeed
        shape = tuple(self.input_size)
        for spec in self.layers:
            shape = _shape_after(spec, shape)
        if len(shape) != 1:
            raise ConfigError(f"head must end in a class vector, got shape {shape}")

    @property
    def class_count(self) -> int:
        shape = tuple(self.input_size)
        for spec in self.layers:
            shape = _shape_after(spec, shape)
        return shape[0]


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    backbone: BackboneSpec
    boundaries: tuple        # layer index of each encoder's output, ascending
    decoders: tuple          # per PCoder: tuple of descriptors, or None = default
    hp: tuple                # per-PCoder HyperParams
    gradient_scaling: bool = False
    shared_hyperparameters: bool = False

    @property
    def depth(self) -> int:
        return len(self.boundaries)

    def encoder_slices(self):
        starts = (0,) + tuple(b + 1 for b in self.boundaries[:-1])
        return list(zip(starts, (b + 1 for b in self.boundaries)))

    def encoder_shapes(self):
        """Per-sample output shape of e_0..e_N (index 0 = the input)."""
        shapes = self.backbone.body_shapes()
        return [shapes[0]] + [shapes[b + 1] for b in self.boundaries]

    def resolved_decoders(self):
        """Decoder descriptors with defaults synthesized."""
        enc = self.encoder_shapes()
        out = []
        for i, dec in enumerate(self.decoders):
            if dec is None:
                dec = default_decoder(enc[i + 1], enc[i])
            out.append(tuple(dec))
        return out

    def validate(self) -> None:
        self.backbone.validate()
        if not self.boundaries:
            raise ConfigError("at least one pcoder is required")
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise ConfigError(f"pcoder boundaries must strictly increase, got {self.boundaries}")
        if self.boundaries[0] < 0 or self.boundaries[-1] >= self.backbone.head_start:
            raise ConfigError(
                f"pcoder boundaries {self.boundaries} must lie in the body "
                f"(before head_start {self.backbone.head_start})"
            )
        if self.boundaries[-1] != self.backbone.head_start - 1:
            raise ConfigError(
                "encoders must tile the body with no gap: last boundary "
                f"{self.boundaries[-1]} != head_start - 1 = {self.backbone.head_start - 1}"
            )
        if len(self.decoders) != self.depth or len(self.hp) != self.depth:
            raise ConfigError("decoders and hyperparameters must match the pcoder count")
        for hp in self.hp:
            hp.validate()
        if self.shared_hyperparameters and len(set(self.hp)) > 1:
            raise ConfigError("shared_hyperparameters = true but per-pcoder triples differ")
        enc = self.encoder_shapes()
        for i, dec in enumerate(self.resolved_decoders()):
            shape = enc[i + 1]
            for spec in dec:
                if not isinstance(spec, (DeconvSpec, UpsampleSpec, ReluSpec)):
                    raise ConfigError(f"layer type {spec!r} not allowed in a decoder")
                shape = _shape_after(spec, shape)
            if tuple(shape) != tuple(enc[i]):
                raise ConfigError(
                    f"pcoder {i + 1} decoder produces {shape}, must equal "
                    f"the predicted layer shape {enc[i]}"
                )
            if not any(isinstance(s, DeconvSpec) for s in dec):
                raise ConfigError(f"pcoder {i + 1} decoder must contain a deconv")


def default_decoder(above_shape, predicted_shape):
    """Default prediction stack from an encoder output onto the layer below.

    Upscale by the (integer) spatial ratio when the sizes differ, then a 3x3
    stride-1 pad-1 transposed convolution onto the predicted channel count.
    """
    c_hi, h_hi, w_hi = above_shape
    c_lo, h_lo, w_lo = predicted_shape
    if h_lo % h_hi or w_lo % w_hi:
        raise ConfigError(
            f"no default decoder for non-integer spatial ratio {predicted_shape} / "
            f"{above_shape}; declare an explicit predictor"
        )
    fh, fw = h_lo // h_hi, w_lo // w_hi
    if fh != fw:
        raise ConfigError(
            f"default decoder needs equal H/W upscale factors, got ({fh}, {fw})"
        )
    stack = []
    if fh > 1:
        stack.append(UpsampleSpec(factor=fh))
    stack.append(DeconvSpec(out_channels=c_lo, kernel=3, stride=1, padding=1))
    return tuple(stack)


# --------------------------------------------------------------------------
# TOML parsing / serialization
# --------------------------------------------------------------------------

_HP_KEYS = {"feedforward": "beta", "feedback": "lam", "pc": "alpha"}


def _parse_hp(table, where: str) -> HyperParams:
    unknown = set(table) - set(_HP_KEYS)
    if unknown:
        raise ConfigError(f"unknown hyperparameter keys {sorted(unknown)} in {where}")
    kwargs = {_HP_KEYS[k]: float(v) for k, v in table.items()}
    hp = HyperParams(**{**{"beta": DEFAULT_HP.beta, "lam": DEFAULT_HP.lam,
                           "alpha": DEFAULT_HP.alpha}, **kwargs})
    try:
        hp.validate()
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    return hp


def _parse_layer(table, where: str, allow_label: bool = True):
    if "type" not in table:
        raise ConfigError(f"layer in {where} is missing a 'type' key")
    kind = table["type"]
    args = {k: v for k, v in table.items() if k != "type"}
    classes = {
        "conv": ConvSpec,
        "relu": ReluSpec,
        "maxpool2": MaxPool2Spec,
        "flatten": FlattenSpec,
        "dense": DenseSpec,
        "upsample": UpsampleSpec,
        "deconv": DeconvSpec,
    }
    if kind not in classes:
        raise ConfigError(f"unknown layer type '{kind}' in {where}")
    if not allow_label:
        args.pop("label", None)
    try:
        return classes[kind](**args)
    except TypeError as e:
        raise ConfigError(f"bad '{kind}' layer in {where}: {e}") from None


def parse_config(text: str) -> NetworkSpec:
    """Parse and validate a TOML network description."""
    try:
        doc = _toml.loads(text)
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"TOML syntax error: {e}") from None

    name = doc.get("name", "pcnet")
    if "input_size" not in doc:
        raise ConfigError("missing required key 'input_size'")
    input_size = tuple(int(v) for v in doc["input_size"])
    gradient_scaling = bool(doc.get("gradient_scaling", False))
    shared = bool(doc.get("shared_hyperparameters", False))

    backbone_tbl = doc.get("backbone")
    if not backbone_tbl or "layers" not in backbone_tbl:
        raise ConfigError("missing [backbone] table with a 'layers' array")
    layer_specs = tuple(
        _parse_layer(t, f"backbone layer {i}") for i, t in enumerate(backbone_tbl["layers"])
    )
    flat = [i for i, s in enumerate(layer_specs) if isinstance(s, FlattenSpec)]
    head_start = int(backbone_tbl.get("head_start", flat[0] if flat else len(layer_specs)))
    backbone = BackboneSpec(input_size=input_size, layers=layer_specs, head_start=head_start)

    pcoder_tbls = doc.get("pcoders", [])
    if not pcoder_tbls:
        raise ConfigError("at least one [[pcoders]] entry is required")

    labels = {s.label: i for i, s in enumerate(layer_specs) if getattr(s, "label", None)}
    boundaries, decoders, hps = [], [], []
    shared_hp = _parse_hp(doc.get("hyperparameters", {}), "top-level hyperparameters")
    for i, tbl in enumerate(pcoder_tbls):
        where = f"pcoders[{i}]"
        if "module" not in tbl:
            raise ConfigError(f"{where} is missing 'module'")
        module = tbl["module"]
        if isinstance(module, str):
            if module not in labels:
                raise ConfigError(f"{where}: no backbone layer labelled '{module}'")
            boundaries.append(labels[module])
        else:
            boundaries.append(int(module))
        if "predictor" in tbl:
            decoders.append(tuple(
                _parse_layer(t, f"{where} predictor", allow_label=False)
                for t in tbl["predictor"]
            ))
        else:
            decoders.append(None)
        if "hyperparameters" in tbl:
            if shared:
                raise ConfigError(
                    f"{where}: per-pcoder hyperparameters conflict with "
                    "shared_hyperparameters = true"
                )
            hps.append(_parse_hp(tbl["hyperparameters"], where))
        else:
            hps.append(shared_hp)

    spec = NetworkSpec(
        name=name,
        backbone=backbone,
        boundaries=tuple(boundaries),
        decoders=tuple(decoders),
        hp=tuple(hps),
        gradient_scaling=gradient_scaling,
        shared_hyperparameters=shared,
    )
    spec.validate()
    return spec


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        import json

        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _layer_table(spec) -> str:
    pairs = [("type", spec.type)]
    for key in ("out_channels", "out_features", "kernel", "stride", "padding", "factor", "label"):
        v = getattr(spec, key, None)
        if v is not None:
            pairs.append((key, v))
    return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in pairs) + " }"


def _hp_table(hp: HyperParams) -> str:
    return (
        "{ feedforward = " + repr(hp.beta)
        + ", feedback = " + repr(hp.lam)
        + ", pc = " + repr(hp.alpha) + " }"
    )


def serialize_config(spec: NetworkSpec) -> str:
    """TOML text that parses back to a semantically equal NetworkSpec."""
    lines = [
        f"name = {_toml_value(spec.name)}",
        f"input_size = {_toml_value(list(spec.backbone.input_size))}",
        f"gradient_scaling = {_toml_value(spec.gradient_scaling)}",
        f"shared_hyperparameters = {_toml_value(spec.shared_hyperparameters)}",
    ]
    if spec.shared_hyperparameters:
        lines.append(f"hyperparameters = {_hp_table(spec.hp[0])}")
    lines += ["", "[backbone]", f"head_start = {spec.backbone.head_start}", "layers = ["]
    lines += [f"  {_layer_table(s)}," for s in spec.backbone.layers]
    lines.append("]")
    for i, b in enumerate(spec.boundaries):
        lines += ["", "[[pcoders]]", f"module = {b}"]
        if spec.decoders[i] is not None:
            lines.append(
                "predictor = [" + ", ".join(_layer_table(s) for s in spec.decoders[i]) + "]"
            )
        if not spec.shared_hyperparameters:
            lines.append(f"hyperparameters = {_hp_table(spec.hp[i])}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Weight naming, initialization, assembly
# --------------------------------------------------------------------------

def parameter_shapes(spec: NetworkSpec) -> dict:
    """name -> shape for every trainable tensor, in deterministic order."""
    out = {}
    shapes = [tuple(spec.backbone.input_size)]
    for i, layer in enumerate(spec.backbone.layers):
        in_shape = shapes[-1]
        if isinstance(layer, ConvSpec):
            out[f"backbone.{i}.kernel"] = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
            out[f"backbone.{i}.bias"] = (layer.out_channels,)
        elif isinstance(layer, DenseSpec):
            out[f"backbone.{i}.kernel"] = (layer.out_features, in_shape[0])
            out[f"backbone.{i}.bias"] = (layer.out_features,)
        shapes.append(_shape_after(layer, in_shape))
    enc = spec.encoder_shapes()
    for n, dec in enumerate(spec.resolved_decoders(), start=1):
        shape = enc[n]
        for j, layer in enumerate(dec):
            if isinstance(layer, DeconvSpec):
                # kernel is (c_out, c_in, kH, kW) of the underlying conv view:
                # the deconv consumes c_out channels and emits c_in channels
                out[f"pcoder{n}.decoder.{j}.kernel"] = (
                    shape[0], layer.out_channels, layer.kernel, layer.kernel,
                )
                out[f"pcoder{n}.decoder.{j}.bias"] = (layer.out_channels,)
            shape = _shape_after(layer, shape)
    return out


def init_weights(spec: NetworkSpec, seed: int = 0) -> dict:
    """Fresh uniform(+-sqrt(1/fan_in)) weights from the seeded stream."""
    stream = Stream(seed)
    out = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".kernel") and len(shape) == 4:
            if name.startswith("backbone"):
                fan_in = shape[1] * shape[2] * shape[3]   # conv: c_in * kH * kW
            else:
                fan_in = shape[0] * shape[2] * shape[3]   # deconv consumes c_out
        elif name.endswith(".kernel"):
            fan_in = shape[1]                              # dense input width
        else:
            kernel_shape = out[name.replace(".bias", ".kernel")].shape
            if len(kernel_shape) == 4:
                if name.startswith("backbone"):
                    fan_in = kernel_shape[1] * kernel_shape[2] * kernel_shape[3]
                else:
                    fan_in = kernel_shape[0] * kernel_shape[2] * kernel_shape[3]
            else:
                fan_in = kernel_shape[1]
        bound = math.sqrt(1.0 / fan_in)
        u = stream.uniform(shape)
        out[name] = ((2.0 * u - 1.0) * bound).astype(np.float32)
    return out


def _make_layer(layer_spec, weights, name_prefix):
    if isinstance(layer_spec, ConvSpec):
        return L.Conv(LayerWeights(
            weights[f"{name_prefix}.kernel"], weights[f"{name_prefix}.bias"],
            stride=layer_spec.stride, padding=layer_spec.padding,
        ))
    if isinstance(layer_spec, DeconvSpec):
        return L.Deconv(LayerWeights(
            weights[f"{name_prefix}.kernel"], weights[f"{name_prefix}.bias"],
            stride=layer_spec.stride, padding=layer_spec.padding,
        ))
    if isinstance(layer_spec, DenseSpec):
        return L.Dense(weights[f"{name_prefix}.kernel"], weights[f"{name_prefix}.bias"])
    if isinstance(layer_spec, ReluSpec):
        return L.Relu()
    if isinstance(layer_spec, MaxPool2Spec):
        return L.MaxPool2()
    if isinstance(layer_spec, FlattenSpec):
        return L.Flatten()
    if isinstance(layer_spec, UpsampleSpec):
        return L.Upsample(layer_spec.factor)
    raise ConfigError(f"unknown layer descriptor {layer_spec!r}")


def _check_weights(spec: NetworkSpec, weights: dict) -> dict:
    expected = parameter_shapes(spec)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise WeightsMismatchError(f"missing weight entry '{missing[0]}'")
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise WeightsMismatchError(f"unexpected weight entry '{extra[0]}'")
    checked = {}
    for name, shape in expected.items():
        arr = np.array(weights[name], dtype=np.float32)
        if arr.shape != tuple(shape):
            raise WeightsMismatchError(
                f"weight '{name}' has shape {arr.shape}, expected {tuple(shape)}"
            )
        checked[name] = arr
    return checked


def build_network(spec: NetworkSpec, weights: dict | None = None, seed: int = 0) -> PCNetwork:
    """Assemble a runnable, shape-checked network.

    Backbone parameter arrays are frozen (read-only) so recurrent dynamics
    and feedback training can never touch them; decoder arrays stay
    writable for the reconstruction-training stage.
    """
    spec.validate()
    if weights is None:
        weights = init_weights(spec, seed)
    weights = _check_weights(spec, weights)
    for name, arr in weights.items():
        if name.startswith("backbone."):
            arr.flags.writeable = False

    enc_shapes = spec.encoder_shapes()
    pcoders = []
    for n, (start, stop) in enumerate(spec.encoder_slices(), start=1):
        shapes = [enc_shapes[n - 1]]
        enc_layers = []
        for i in range(start, stop):
            enc_layers.append(_make_layer(spec.backbone.layers[i], weights, f"backbone.{i}"))
            shapes.append(_shape_after(spec.backbone.layers[i], shapes[-1]))
        dec_layers = []
        dshape = enc_shapes[n]
        for j, dspec in enumerate(spec.resolved_decoders()[n - 1]):
            dec_layers.append(_make_layer(dspec, weights, f"pcoder{n}.decoder.{j}"))
            dshape = _shape_after(dspec, dshape)
        pcoders.append(PCoder(
            encoder=enc_layers,
            decoder=dec_layers,
            hp=spec.hp[n - 1],
            gradient_scaling=spec.gradient_scaling,
            in_shape=enc_shapes[n - 1],
            out_shape=enc_shapes[n],
        ))

    head = []
    hshape = enc_shapes[-1]
    for i in range(spec.backbone.head_start, len(spec.backbone.layers)):
        head.append(_make_layer(spec.backbone.layers[i], weights, f"backbone.{i}"))
        hshape = _shape_after(spec.backbone.layers[i], hshape)

    return PCNetwork(
        pcoders=pcoders,
        head=head,
        input_shape=tuple(spec.backbone.input_size),
        class_count=spec.backbone.class_count,
        name=spec.name,
        spec=spec,
    )


def network_weights(network: PCNetwork) -> dict:
    """Current name -> tensor map of a built network (live views)."""
    spec = network.spec
    out = {}
    for n, (start, stop) in enumerate(spec.encoder_slices(), start=1):
        p = network.pcoders[n - 1]
        for offset, layer in enumerate(p.encoder):
            if hasattr(layer, "params"):
                for pname, arr in layer.params().items():
                    out[f"backbone.{start + offset}.{pname}"] = arr
        for j, layer in enumerate(p.decoder):
            if hasattr(layer, "params"):
                for pname, arr in layer.params().items():
                    out[f"pcoder{n}.decoder.{j}.{pname}"] = arr
    for i, layer in enumerate(network.head, start=spec.backbone.head_start):
        if hasattr(layer, "params"):
            for pname, arr in layer.params().items():
                out[f"backbone.{i}.{pname}"] = arr
    return out


def network_summary(spec: NetworkSpec) -> list:
    """Per-PCoder shape/constant table (for inspection output)."""
    enc = spec.encoder_shapes()
    rows = []
    for n, dec in enumerate(spec.resolved_decoders(), start=1):
        deconvs = [d for d in dec if isinstance(d, DeconvSpec)]
        k = int(np.prod(enc[n - 1]))
        c = deconvs[-1].kernel ** 2 * enc[n - 1][0]
        rows.append({
            "pcoder": n,
            "e_shape": enc[n],
            "d_shape": enc[n - 1],
            "K": k,
            "C": c,
            "scale": k / math.sqrt(c),
            "hp": spec.hp[n - 1],
            "decoder": dec,
        })
    return rows
