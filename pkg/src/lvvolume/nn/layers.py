"""Layers with exact backward passes.

Every layer works on batches: conv/BN/pool take (N, C, H, W), FC takes
(N, features).  ``forward(x, train)`` caches what ``backward`` needs;
``backward(grad)`` returns the input gradient and fills ``self.grads``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from ..errors import NumericFault, ShapeError

# kernels at least this large go through the FFT path
FFT_MIN_KERNEL = 7


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite values after {where}")
    return x


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}  # non-trainable buffers
        self._cache = None

    def describe(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, shape):
        return shape

    def init_params(self, rng: np.random.Generator, dtype):
        pass

    def astype(self, dtype):
        for d in (self.params, self.state):
            for k in d:
                d[k] = d[k].astype(dtype)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}.backward called without a cached forward pass")
        return self._cache

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


# ---------------------------------------------------------------- convolution

def _same_corr_direct(x, w):
    """out[n,o] = sum_c xcorr(x[n,c], w[o,c]) with zero 'same' padding."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _same_corr_fft(x, w):
    k = w.shape[-1]
    p = k // 2
    H, W = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = xp.shape[2:]
    fx = sfft.rfft2(xp, s=s)
    fw = sfft.rfft2(w, s=s)
    # circular correlation of size Hp never wraps into the first H outputs
    prod = np.einsum("nchw,ochw->nohw", fx, np.conj(fw))
    return sfft.irfft2(prod, s=s)[:, :, :H, :W].astype(x.dtype, copy=False)


def _weight_grad_direct(x, g, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k


def _weight_grad_fft(x, g, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = xp.shape[2:]
    fx = sfft.rfft2(xp, s=s)
    fg = sfft.rfft2(g, s=s)
    prod = np.einsum("nchw,nohw->ochw", fx, np.conj(fg))
    return sfft.irfft2(prod, s=s)[:, :, :k, :k].astype(x.dtype, copy=False)


class Conv2D(Layer):
    """Stride-1 cross-correlation with zero 'same' padding (odd kernels)."""

    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd and positive, got {kernel}")
        self.in_ch, self.out_ch, self.kernel = int(in_ch), int(out_ch), int(kernel)
        self.params = {
            "w": np.zeros((self.out_ch, self.in_ch, kernel, kernel)),
            "b": np.zeros(self.out_ch),
        }

    def describe(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        return (self.out_ch, h, w)

    def init_params(self, rng, dtype):
        k2 = self.kernel * self.kernel
        bound = glorot_bound(self.in_ch * k2, self.out_ch * k2)
        self.params["w"] = rng.uniform(-bound, bound, self.params["w"].shape).astype(dtype)
        self.params["b"] = np.zeros(self.out_ch, dtype=dtype)

    @property
    def use_fft(self) -> bool:
        return self.kernel >= FFT_MIN_KERNEL

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        w = self.params["w"]
        out = (_same_corr_fft if self.use_fft else _same_corr_direct)(x, w)
        out += self.params["b"][None, :, None, None]
        self._cache = x
        return out

    def backward(self, grad):
        x = self._need_cache()
        w = self.params["w"]
        if self.use_fft:
            self.grads["w"] = _weight_grad_fft(x, grad, self.kernel)
        else:
            self.grads["w"] = _weight_grad_direct(x, grad, self.kernel)
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        # transposed 'same' correlation = 'same' correlation with the flipped kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return (_same_corr_fft if self.use_fft else _same_corr_direct)(grad, wt)


# ---------------------------------------------------------------- the rest

class BatchNorm(Layer):
    """Per-channel normalization over (N, H, W) for 4-D input, over N for 2-D."""

    kind = "bn"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.channels, self.eps, self.momentum = int(channels), float(eps), float(momentum)
        self.params = {"gamma": np.ones(self.channels), "beta": np.zeros(self.channels)}
        self.state = {"running_mean": np.zeros(self.channels), "running_var": np.ones(self.channels)}

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {shape[0]}")
        return shape

    def init_params(self, rng, dtype):
        self.params = {"gamma": np.ones(self.channels, dtype=dtype), "beta": np.zeros(self.channels, dtype=dtype)}
        self.state = {
            "running_mean": np.zeros(self.channels, dtype=dtype),
            "running_var": np.ones(self.channels, dtype=dtype),
        }

    def _axes(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise ShapeError(f"batch norm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {x.shape[1]}")
        axes, bshape = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mean
            self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
        else:
            mean, var = self.state["running_mean"], self.state["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
        self._cache = (xhat, inv, train)
        return xhat * self.params["gamma"].reshape(bshape) + self.params["beta"].reshape(bshape)

    def backward(self, grad):
        xhat, inv, train = self._need_cache()
        axes, bshape = self._axes(grad)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        gx = grad * self.params["gamma"].reshape(bshape)
        if not train:
            return gx * inv.reshape(bshape)
        m = grad.size / self.channels
        mean_g = gx.sum(axis=axes).reshape(bshape) / m
        mean_gx = (gx * xhat).sum(axis=axes).reshape(bshape) / m
        return (gx - mean_g - xhat * mean_gx) * inv.reshape(bshape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._need_cache(), grad, 0.0).astype(grad.dtype, copy=False)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2.  The gradient goes to the first maximum."""

    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pooling needs even spatial size, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pooling needs even spatial size, got {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, shape = self._need_cache()
        n, c, h, w = shape
        blocks = np.zeros(grad.shape + (4,), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


class Dense(Layer):
    """Fully connected: y = x W + b with W of shape (in, out)."""

    kind = "fc"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params = {"w": np.zeros((self.n_in, self.n_out)), "b": np.zeros(self.n_out)}

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"fully connected layer expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def init_params(self, rng, dtype):
        bound = glorot_bound(self.n_in, self.n_out)
        self.params["w"] = rng.uniform(-bound, bound, (self.n_in, self.n_out)).astype(dtype)
        self.params["b"] = np.zeros(self.n_out, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"fully connected layer expects (N, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        x = self._need_cache()
        self.grads["w"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["w"].T


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) in training."""

    kind = "dropout"

    def __init__(self, rate: float, seed: int = 0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ShapeError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = np.random.default_rng(seed)

    def describe(self):
        return {"kind": self.kind, "rate": self.rate}

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._cache = np.ones_like(x)
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = keep
        return x * keep

    def backward(self, grad):
        return grad * self._need_cache()


def layer_from_spec(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "conv":
        return Conv2D(d["in_ch"], d["out_ch"], d["kernel"])
    if kind == "bn":
        return BatchNorm(d["channels"], d.get("eps", 1e-5), d.get("momentum", 0.9))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2()
    if kind == "flatten":
        return Flatten()
    if kind == "fc":
        return Dense(d["n_in"], d["n_out"])
    if kind == "dropout":
        return Dropout(d["rate"])
    raise ShapeError(f"unknown layer kind {kind!r}")
