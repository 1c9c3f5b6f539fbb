"""Central finite-difference gradient checks for layers and networks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Dropout, Layer, MaxPool2, ReLU
from .network import Network


def rel_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class GradCheck:
    name: str
    error: float
    n_checked: int


def _coords(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, max_coords, replace=False))


def _numeric(f, arr, coords, step):
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * step)
    return out


def check_layer(layer: Layer, x, seed=0, train=True, step=1e-4, max_coords=None) -> list[GradCheck]:
    """Check d(sum(out * r))/d(input and params) for one layer."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    dropout_state = layer.rng.bit_generator.state if isinstance(layer, Dropout) else None

    def run():
        if dropout_state is not None:
            layer.rng.bit_generator.state = dropout_state  # same mask on every pass
        return layer.forward(x, train)

    out = run()
    r = rng.standard_normal(out.shape)
    gx = layer.backward(r)
    f = lambda: float(np.sum(run() * r))
    results = []
    coords = _coords(x.size, max_coords, rng)
    results.append(GradCheck("input", rel_error(gx.reshape(-1)[coords], _numeric(f, x, coords, step)), len(coords)))
    for name, p in layer.params.items():
        coords = _coords(p.size, max_coords, rng)
        ana = layer.grads[name].reshape(-1)[coords].copy()
        results.append(GradCheck(name, rel_error(ana, _numeric(f, p, coords, step)), len(coords)))
    return results


def _scalar_error(a: float, b: float, floor: float) -> float:
    denom = max(abs(a), abs(b))
    if denom <= floor:
        return 0.0  # both vanish, e.g. a conv bias that feeds batch norm
    return abs(a - b) / denom


def _pattern(net: Network) -> list[np.ndarray]:
    """ReLU masks and max-pool winners of the last forward pass."""
    out = []
    prev = None
    for layer in net.layers:
        if isinstance(layer, ReLU):
            out.append(layer._cache.copy())
        elif isinstance(layer, MaxPool2):
            # winners among all-zero blocks (after a ReLU) carry no gradient
            idx = layer._cache[0].copy()
            if isinstance(prev, ReLU):
                n, c, h, w = prev._cache.shape
                live = prev._cache.reshape(n, c, h // 2, 2, w // 2, 2).any(axis=(3, 5))
                idx[~live] = -1
            out.append(idx)
        prev = layer
    return out


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def check_network(net: Network, x, targets, seed=0, step=1e-4, directions=2, loss=None) -> list[GradCheck]:
    """Directional central differences of a scalar loss (default RMSE against
    ``targets``) in train mode.

    For the input and each parameter tensor, ``directions`` random unit
    directions v are drawn and (L(p + h v) - L(p - h v)) / 2h is compared with
    the analytic g . v.
    """
    from ..trainer import rmse_loss

    loss = loss or rmse_loss
    # a stream of its own, so directions never coincide with seeded inputs
    rng = np.random.default_rng([seed, 0x6772])
    x = np.array(x, dtype=net.dtype)
    states = [d.rng.bit_generator.state for d in net.dropout_layers()]
    bn_state = {key: layer.state[n].copy() for key, layer, n in net.named_state()}

    def run():
        for d, s in zip(net.dropout_layers(), states):
            d.rng.bit_generator.state = s
        return net.forward(x, "train")[:, 0]

    pred = run()
    base = _pattern(net)
    value, g = loss(pred, targets)
    gx = net.backward(g[:, None])
    grads = {"input": gx, **{k: v.copy() for k, v in net.gradients().items()}}
    arrays = {"input": x, **{key: layer.params[n] for key, layer, n in net.named_params()}}
    results = []
    for key, arr in arrays.items():
        worst, done, tries = 0.0, 0, 0
        while done < directions:
            tries += 1
            if tries > 20 * directions:
                raise RuntimeError(f"could not find a kink-free direction for {key}")
            v = rng.standard_normal(arr.shape)
            v /= np.linalg.norm(v)
            # shrink the step when the segment crosses a ReLU or max-pool switch
            for h in step / 10.0 ** np.arange(5):
                orig = arr.copy()
                arr += h * v
                fp = loss(run(), targets)[0]
                smooth = _same_pattern(base, _pattern(net))
                arr[...] = orig - h * v
                fm = loss(run(), targets)[0]
                smooth = smooth and _same_pattern(base, _pattern(net))
                arr[...] = orig
                if smooth:
                    break
            if not smooth:
                continue
            numeric = (fp - fm) / (2 * h)
            # roundoff level of a central difference of L at step h
            floor = 100 * np.finfo(np.float64).eps * max(1.0, abs(value)) / h
            worst = max(worst, _scalar_error(float(np.sum(grads[key] * v)), numeric, floor))
            done += 1
        results.append(GradCheck(key, worst, directions))
    for key, layer, n in net.named_state():
        layer.state[n] = bn_state[key]
    return results
