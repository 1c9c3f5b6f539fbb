"""Sequential network container and the VGG20-BN regression builder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2,
    ReLU,
    check_finite,
    layer_from_spec,
)

VGG_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))
VGG_FC = (4096, 4096, 1000)


@dataclass(frozen=True)
class VGGConfig:
    input_channels: int = 3
    first_kernel_size: int = 19
    channel_scale: float = 1.0
    input_hw: int = 224
    dropout: float = 0.25

    def __post_init__(self):
        if self.input_channels < 1:
            raise ConfigError("input_channels must be at least 1")
        if self.input_hw < 32 or self.input_hw % 32:
            raise ConfigError(f"input_hw must be a positive multiple of 32, got {self.input_hw}")
        if not 0 < self.channel_scale <= 1:
            raise ConfigError(f"channel_scale must lie in (0, 1], got {self.channel_scale}")
        if self.first_kernel_size < 1 or self.first_kernel_size % 2 == 0:
            raise ConfigError(f"first_kernel_size must be odd, got {self.first_kernel_size}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout rate must lie in [0, 1)")


def scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


class Network:
    """A plain layer sequence.  ``mode`` is "train" or "infer"."""

    def __init__(self, layers: list[Layer], input_shape, config: dict | None = None, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.config = dict(config or {})
        self.dtype = np.dtype(dtype)
        self.mode = "infer"
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (1,):
            raise ShapeError(f"network must end in a single output, got {shape}")
        if not isinstance(self.layers[-1], ReLU) or not isinstance(self.layers[-2], Dense):
            raise ShapeError("network must end with FC(., 1) followed by ReLU")

    # ------------------------------------------------------------ setup
    def init_params(self, seed: int):
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(self.layers):
            layer.init_params(rng, self.dtype)
            if isinstance(layer, Dropout):
                layer.reseed([seed, i])
        return self

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(self.dtype)
        return self

    def spec(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    def named_state(self):
        for i, layer in enumerate(self.layers):
            for name in layer.state:
                yield f"{i}.{name}", layer, name

    def n_params(self) -> int:
        return sum(layer.params[n].size for _, layer, n in self.named_params())

    def dropout_layers(self):
        return [l for l in self.layers if isinstance(l, Dropout)]

    # ------------------------------------------------------------ compute
    def forward(self, x, mode: str | None = None) -> np.ndarray:
        mode = mode or self.mode
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        train = mode == "train"
        for layer in self.layers:
            x = check_finite(layer.forward(x, train), layer.kind)
        return x

    def backward(self, grad) -> np.ndarray:
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = check_finite(layer.backward(grad), f"{layer.kind} backward")
        return grad

    def predict(self, x) -> np.ndarray:
        return self.forward(x, "infer")[:, 0]

    def gradients(self) -> dict[str, np.ndarray]:
        return {key: layer.grads[n] for key, layer, n in self.named_params()}


def build_network(spec: list[dict], input_shape, config=None, dtype=np.float64) -> Network:
    return Network([layer_from_spec(d) for d in spec], input_shape, config, dtype)


def vgg20bn_spec(cfg: VGGConfig) -> list[dict]:
    layers = []
    ch = cfg.input_channels
    for b, (width, reps) in enumerate(VGG_BLOCKS):
        out = scaled(width, cfg.channel_scale)
        for r in range(reps):
            k = cfg.first_kernel_size if (b, r) == (0, 0) else 3
            layers += [Conv2D(ch, out, k).describe(), BatchNorm(out).describe(), {"kind": "relu"}]
            ch = out
        layers.append({"kind": "maxpool"})
    side = cfg.input_hw // 32
    n = ch * side * side
    layers.append({"kind": "flatten"})
    for width in VGG_FC:
        out = scaled(width, cfg.channel_scale)
        layers += [{"kind": "fc", "n_in": n, "n_out": out}, {"kind": "relu"}]
        n = out
    layers += [{"kind": "dropout", "rate": cfg.dropout}, {"kind": "fc", "n_in": n, "n_out": 1}, {"kind": "relu"}]
    return layers


def build_vgg20bn(config=None, seed: int = 0, dtype=np.float64, **overrides) -> Network:
    """VGG20-BN with a single non-negative output.

    ``config`` is a VGGConfig or a dict of its fields; keyword overrides win.
    """
    if config is None:
        config = VGGConfig(**overrides)
    elif isinstance(config, dict):
        config = VGGConfig(**{**config, **overrides})
    elif overrides:
        config = VGGConfig(**{**asdict(config), **overrides})
    shape = (config.input_channels, config.input_hw, config.input_hw)
    net = build_network(vgg20bn_spec(config), shape, asdict(config), dtype)
    return net.init_params(seed)
