"""Declarative builders for the U-Net generator, conditional discriminator and
the evaluation classifier, plus a single interpreter (:func:`forward`)."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import ShapeError, Tensor

INIT_STD = 0.02
MAX_CHANNELS = 512
BN_MOMENTUM = 0.99
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | deconv | gap | linear
    in_channels: int
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    norm: bool = False
    activation: str | None = None  # relu | leaky_relu | tanh | sigmoid | None
    skip_from: int | None = None  # layer index whose output is concatenated onto this layer's input
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # C, H, W
    output_shape: tuple[int, ...]
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)


@dataclass
class ParameterSet:
    """Learnable tensors keyed by layer-qualified names, plus batchnorm buffers."""

    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, t in self.tensors.items():
            out.tensors[k] = Tensor(t.data.copy(), requires_grad=True, dtype=t.data.dtype)
        for k, b in self.buffers.items():
            out.buffers[k] = b.copy()
        return out


def _check_resolution(resolution: int, depth: int) -> None:
    if resolution < 1 or resolution & (resolution - 1):
        raise ValueError(f"resolution {resolution} is not a power of two")
    if resolution < 2 ** depth:
        raise ValueError(
            f"resolution {resolution} is too small for {depth} stride-2 layers "
            f"(needs at least {2 ** depth})")


def _channels(base: int, i: int) -> int:
    return min(base * 2 ** i, MAX_CHANNELS)


def _init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParameterSet:
    params = ParameterSet()
    for layer in spec.layers:
        k = layer.kernel
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, k, k)
        elif layer.kind == "deconv":
            shape = (layer.in_channels, layer.out_channels, k, k)
        elif layer.kind == "linear":
            shape = (layer.out_channels, layer.in_channels)
        else:
            continue
        params.tensors[f"{layer.name}.weight"] = Tensor(
            rng.normal(0.0, INIT_STD, size=shape), requires_grad=True, dtype=np.float32)
        params.tensors[f"{layer.name}.bias"] = Tensor(
            np.zeros(layer.out_channels), requires_grad=True, dtype=np.float32)
        if layer.norm:
            c = layer.out_channels
            params.tensors[f"{layer.name}.gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=np.float32)
            params.tensors[f"{layer.name}.beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=np.float32)
            params.buffers[f"{layer.name}.running_mean"] = np.zeros(c, dtype=np.float32)
            params.buffers[f"{layer.name}.running_var"] = np.ones(c, dtype=np.float32)
    return params


def build_unet_generator(resolution: int, in_channels: int = 3, out_channels: int = 3,
                         base_filters: int = 64, depth: int = 7, seed: int = 0,
                         bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
    """Encoder of ``depth`` stride-2 convolutions mirrored by transpose
    convolutions, with encoder level ``i`` concatenated into decoder level
    ``depth - 1 - i``. Output passes through tanh."""
    _check_resolution(resolution, depth)
    if depth < 2:
        raise ValueError("generator depth must be at least 2")
    layers: list[LayerSpec] = []
    ch = [_channels(base_filters, i) for i in range(depth)]
    size, c_prev = resolution, in_channels
    for i in range(depth):
        layers.append(LayerSpec(
            f"enc{i}", "conv", c_prev, ch[i], norm=0 < i < depth - 1,
            activation="leaky_relu", in_shape=(c_prev, size, size), out_shape=(ch[i], size // 2, size // 2)))
        size //= 2
        c_prev = ch[i]
    for k in range(depth):
        last = k == depth - 1
        skip = None if k == 0 else depth - 1 - k  # encoder level feeding this decoder level
        c_in = c_prev + (ch[skip] if skip is not None else 0)
        c_out = out_channels if last else ch[depth - 2 - k]
        layers.append(LayerSpec(
            f"dec{k}", "deconv", c_in, c_out, norm=not last,
            activation="tanh" if last else "relu", skip_from=skip,
            in_shape=(c_in, size, size), out_shape=(c_out, size * 2, size * 2)))
        size *= 2
        c_prev = c_out
    spec = NetworkSpec("generator", tuple(layers), (in_channels, resolution, resolution),
                       (out_channels, resolution, resolution), bn_momentum, bn_eps)
    _validate(spec)
    return spec, _init_params(spec, np.random.default_rng(seed))


def build_discriminator(resolution: int, condition_channels: int = 3, candidate_channels: int = 3,
                        base_filters: int = 64, depth: int | None = None, seed: int = 0,
                        bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
    """Whole-image conditional discriminator: stride-2 stack down to 2x2,
    flatten, affine to one logit, sigmoid. ``depth`` defaults to log2(res) - 1."""
    if resolution < 4 or resolution & (resolution - 1):
        raise ValueError(f"resolution {resolution} is not a power of two >= 4")
    if depth is None:
        depth = resolution.bit_length() - 2
    _check_resolution(resolution, depth)
    c_prev = condition_channels + candidate_channels
    size = resolution
    layers = []
    for i in range(depth):
        c = _channels(base_filters, i)
        layers.append(LayerSpec(f"conv{i}", "conv", c_prev, c, norm=i > 0, activation="leaky_relu",
                                in_shape=(c_prev, size, size), out_shape=(c, size // 2, size // 2)))
        c_prev, size = c, size // 2
    flat = c_prev * size * size
    layers.append(LayerSpec("fc", "linear", flat, 1, kernel=0, stride=0, padding=0,
                            activation="sigmoid", in_shape=(flat,), out_shape=(1,)))
    spec = NetworkSpec("discriminator", tuple(layers),
                       (condition_channels + candidate_channels, resolution, resolution), (1,),
                       bn_momentum, bn_eps)
    _validate(spec)
    return spec, _init_params(spec, np.random.default_rng(seed))


def build_classifier(resolution: int, num_classes: int, in_channels: int = 3, seed: int = 0,
                     bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    _check_resolution(resolution, 3)
    layers = []
    c_prev, size = in_channels, resolution
    for i, c in enumerate((16, 32, 64)):
        layers.append(LayerSpec(f"conv{i}", "conv", c_prev, c, norm=True, activation="relu",
                                in_shape=(c_prev, size, size), out_shape=(c, size // 2, size // 2)))
        c_prev, size = c, size // 2
    layers.append(LayerSpec("pool", "gap", c_prev, c_prev, kernel=0, stride=0, padding=0,
                            in_shape=(c_prev, size, size), out_shape=(c_prev,)))
    layers.append(LayerSpec("fc", "linear", c_prev, num_classes, kernel=0, stride=0, padding=0,
                            in_shape=(c_prev,), out_shape=(num_classes,)))
    spec = NetworkSpec("classifier", tuple(layers), (in_channels, resolution, resolution),
                       (num_classes,), bn_momentum, bn_eps)
    _validate(spec)
    return spec, _init_params(spec, np.random.default_rng(seed))


def _validate(spec: NetworkSpec) -> None:
    shapes: list[tuple[int, ...]] = []
    prev = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        expected = prev
        if layer.skip_from is not None:
            if not 0 <= layer.skip_from < idx:
                raise ShapeError(f"{layer.name}: skip source {layer.skip_from} is not an earlier layer")
            src = shapes[layer.skip_from]
            if src[1:] != prev[1:]:
                raise ShapeError(f"{layer.name}: skip source {spec.layers[layer.skip_from].name} "
                                 f"has spatial dims {src[1:]}, expected {prev[1:]}")
            expected = (prev[0] + src[0], *prev[1:])
        if layer.kind == "linear":
            expected = (int(np.prod(expected)),)
        if tuple(layer.in_shape) != tuple(expected):
            raise ShapeError(f"{layer.name}: declared input {layer.in_shape} but receives {expected}")
        shapes.append(tuple(layer.out_shape))
        prev = tuple(layer.out_shape)
    if prev != tuple(spec.output_shape):
        raise ShapeError(f"{spec.name}: final layer yields {prev}, declared output {spec.output_shape}")


def _activate(x: Tensor, name: str | None) -> Tensor:
    if name is None:
        return x
    if name == "relu":
        return tc.relu(x)
    if name == "leaky_relu":
        return tc.leaky_relu(x, 0.2)
    if name == "tanh":
        return tc.tanh(x)
    if name == "sigmoid":
        return tc.sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def forward(spec: NetworkSpec, params: ParameterSet, x: Tensor, mode: str = "train",
            update_stats: bool = True, drop_skips: bool = False) -> Tensor:
    """Run ``spec`` on ``x``. Train mode uses batch statistics.

    ``drop_skips`` replaces every skip tensor with zeros of the same shape.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"{spec.name}: input shape {x.shape[1:]} does not match expected {spec.input_shape}")
    outputs: list[Tensor] = []
    h = x
    for layer in spec.layers:
        if layer.skip_from is not None:
            skip = outputs[layer.skip_from]
            if drop_skips:
                skip = Tensor(np.zeros_like(skip.data), dtype=skip.data.dtype)
            h = tc.concat_channels(h, skip)
        if layer.kind != "linear" and tuple(h.shape[1:]) != tuple(layer.in_shape):
            raise ShapeError(f"{spec.name}.{layer.name}: got input {h.shape[1:]}, expected {layer.in_shape}")
        w = params.tensors.get(f"{layer.name}.weight")
        b = params.tensors.get(f"{layer.name}.bias")
        if layer.kind == "conv":
            h = tc.conv2d(h, w, b, layer.stride, layer.padding)
        elif layer.kind == "deconv":
            h = tc.conv2d_transpose(h, w, b, layer.stride, layer.padding)
        elif layer.kind == "gap":
            h = tc.global_avg_pool(h)
        elif layer.kind == "linear":
            h = tc.linear(tc.flatten(h), w, b)
        if layer.norm:
            h = tc.batchnorm2d(
                h, params[f"{layer.name}.gamma"], params[f"{layer.name}.beta"], mode,
                params.buffers[f"{layer.name}.running_mean"], params.buffers[f"{layer.name}.running_var"],
                spec.bn_momentum, spec.bn_eps, update_stats)
        h = _activate(h, layer.activation)
        outputs.append(h)
    return h


def recalibrate_batchnorm(spec: NetworkSpec, params: ParameterSet, x: np.ndarray, chunk: int = 256) -> None:
    """Set every running mean/variance to its average over ``x`` under the current weights."""
    with tc.no_grad():
        for k, start in enumerate(range(0, len(x), chunk)):
            # momentum k/(k+1) keeps an equal-weight mean over chunks
            forward(dataclasses.replace(spec, bn_momentum=k / (k + 1)), params,
                    Tensor(x[start:start + chunk]), "train")


def discriminate(spec: NetworkSpec, params: ParameterSet, condition: Tensor, candidate: Tensor,
                 mode: str = "train", update_stats: bool = True) -> Tensor:
    """D(candidate | condition): probability per batch item, shape [N, 1]."""
    return forward(spec, params, tc.concat_channels(condition, candidate), mode, update_stats)


def bottleneck_shape(spec: NetworkSpec) -> tuple[int, ...]:
    """Output shape of the innermost encoder layer of a generator."""
    enc = [layer for layer in spec.layers if layer.name.startswith("enc")]
    return enc[-1].out_shape
