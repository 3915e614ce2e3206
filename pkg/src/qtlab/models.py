"""Tiny model zoo: seeded MLPs and 3x3-conv CNNs over the autodiff engine.

Weights are stored with the output channel on axis 0 (dense: [out, in];
conv: [out, in, 3, 3]) so per-channel quantization always reads axis 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor


@dataclass(frozen=True)
class ModelSpec:
    kind: str                                # "mlp" | "tiny-cnn"
    widths: tuple[int, ...] = ()             # mlp: input, hidden..., classes
    channels: tuple[int, ...] = ()           # tiny-cnn conv output channels
    input_shape: tuple[int, ...] = ()        # tiny-cnn: (C, H, W)
    n_classes: int = 0                       # tiny-cnn output classes
    seed: int = 0


class Dense:
    kind = "dense"

    def __init__(self, name: str, weight: Tensor, bias: Tensor):
        self.name = name
        self.weight = weight
        self.bias = bias

    def apply(self, x: Tensor, weight: Tensor) -> Tensor:
        return engine.add_bias(engine.matmul(x, engine.transpose(weight)), self.bias)


class Conv2d3x3:
    kind = "conv"

    def __init__(self, name: str, weight: Tensor, bias: Tensor):
        self.name = name
        self.weight = weight
        self.bias = bias

    def apply(self, x: Tensor, weight: Tensor) -> Tensor:
        return engine.add_bias(engine.conv2d(x, weight), self.bias)


class ReLU:
    kind = "relu"

    def __init__(self, name: str):
        self.name = name


class Flatten:
    kind = "flatten"

    def __init__(self, name: str):
        self.name = name


class Model:
    """Ordered layer list; forward optionally routes through a quantizer.

    A quantizer exposes weight(layer_name, tensor) and activation(site, tensor)
    hooks; activation sites are the network input plus every ReLU output.
    """

    def __init__(self, spec: ModelSpec, layers: list):
        if not layers:
            raise ValueError("empty model")
        self.spec = spec
        self.layers = layers

    def forward(self, x: Tensor, quantizer=None) -> Tensor:
        h = quantizer.activation("input", x) if quantizer is not None else x
        for layer in self.layers:
            if layer.kind in ("dense", "conv"):
                w = layer.weight
                if quantizer is not None:
                    w = quantizer.weight(layer.name, w)
                h = layer.apply(h, w)
            elif layer.kind == "relu":
                h = engine.relu(h)
                if quantizer is not None:
                    h = quantizer.activation(layer.name, h)
            elif layer.kind == "flatten":
                h = engine.flatten(h)
            else:
                raise ValueError(f"unsupported layer kind {layer.kind!r}")
        return h

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for layer in self.layers:
            if layer.kind in ("dense", "conv"):
                params.append((f"{layer.name}.weight", layer.weight))
                params.append((f"{layer.name}.bias", layer.bias))
        return params

    def weight_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind in ("dense", "conv")]

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())


def _init_pair(rng: np.random.Generator, w_shape, fan_in: int):
    bound = 1.0 / np.sqrt(fan_in)
    weight = Tensor(rng.uniform(-bound, bound, w_shape), requires_grad=True)
    bias = Tensor(rng.uniform(-bound, bound, w_shape[0]), requires_grad=True)
    return weight, bias


def build_model(spec: ModelSpec) -> Model:
    """Instantiate a spec with deterministic uniform fan-in-scaled init."""
    rng = np.random.default_rng([spec.seed, 0])
    layers: list = []
    if spec.kind == "mlp":
        if len(spec.widths) < 2 or any(w < 1 for w in spec.widths):
            raise ValueError(f"mlp widths {spec.widths} must be >= 2 positive entries")
        for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            weight, bias = _init_pair(rng, (n_out, n_in), n_in)
            layers.append(Dense(f"dense{i}", weight, bias))
            if i < len(spec.widths) - 2:
                layers.append(ReLU(f"relu{i}"))
    elif spec.kind == "tiny-cnn":
        if len(spec.input_shape) != 3 or any(d < 1 for d in spec.input_shape):
            raise ValueError(f"tiny-cnn input_shape {spec.input_shape} must be (C, H, W)")
        if not spec.channels or any(c < 1 for c in spec.channels):
            raise ValueError(f"tiny-cnn channels {spec.channels} must be non-empty positive")
        if spec.n_classes < 2:
            raise ValueError("tiny-cnn requires n_classes >= 2")
        c_in, h, w = spec.input_shape
        for i, c_out in enumerate(spec.channels):
            weight, bias = _init_pair(rng, (c_out, c_in, 3, 3), c_in * 9)
            layers.append(Conv2d3x3(f"conv{i}", weight, bias))
            layers.append(ReLU(f"relu{i}"))
            c_in = c_out
        layers.append(Flatten("flatten0"))
        features = c_in * h * w
        weight, bias = _init_pair(rng, (spec.n_classes, features), features)
        layers.append(Dense("dense0", weight, bias))
    else:
        raise ValueError(f"unknown model kind {spec.kind!r}")
    return Model(spec, layers)
