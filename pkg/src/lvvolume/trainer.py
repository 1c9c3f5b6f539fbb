"""RMSE loss, Adam, the augmentation/min-validation training loop and
three-model ensembling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import preprocess
from .errors import ConfigError, NumericFault, ShapeError
from .nn import checkpoint
from .nn.layers import Dense, Dropout
from .nn.network import Network

log = logging.getLogger(__name__)

TARGETS = ("EDV", "ESV")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: preprocess.AugmentParams = field(default_factory=preprocess.AugmentParams)
    seed: int = 0
    target: str = "EDV"
    # start the output bias at the mean training target so the ReLU head is live
    init_head_bias: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.target.upper() not in TARGETS:
            raise ConfigError(f"target must be EDV or ESV, got {self.target!r}")


# ---------------------------------------------------------------- loss / Adam

def rmse_loss(preds, targets) -> tuple[float, np.ndarray]:
    """sqrt(mean((X - Y)^2)) and its gradient (X - Y) / (N * loss)."""
    x = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.size == 0:
        raise ShapeError("rmse_loss needs a non-empty batch")
    if x.shape != y.shape:
        raise ShapeError(f"predictions {x.shape} and targets {y.shape} differ")
    d = x - y
    loss = float(np.sqrt(np.mean(d * d)))
    if loss == 0.0:
        return 0.0, np.zeros_like(d)
    return loss, d / (d.size * loss)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p):
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(param, grad, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new param, new state) without mutating inputs."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"Adam shapes disagree: {param.shape}, {grad.shape}, {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    new = param - lr * mhat / (np.sqrt(vhat) + eps)
    return new.astype(param.dtype, copy=False), AdamState(m, v, t)


class Adam:
    def __init__(self, net: Network, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states = {key: AdamState.zeros_like(layer.params[n]) for key, layer, n in net.named_params()}

    def step(self):
        for key, layer, n in self.net.named_params():
            layer.params[n], self.states[key] = adam_step(layer.params[n], layer.grads[n], self.states[key], **self.hyper)


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    x: np.ndarray  # (N, channels, H, W)
    y: np.ndarray  # (N,) ml
    ids: tuple = ()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.x.ndim != 4 or len(self.x) != len(self.y):
            raise ShapeError(f"dataset needs (N, C, H, W) inputs and N targets, got {self.x.shape}, {self.y.shape}")
        if not self.ids:
            self.ids = tuple(str(i) for i in range(len(self.y)))

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], tuple(self.ids[i] for i in idx))


def dataset_from_inputs(inputs, roles, target: str = "EDV") -> Dataset:
    """Stack prepared studies (see pipeline.prepare_study) for one target.
    EDV models see the ED frame, ESV models the ES frame."""
    from .views import stack_roles

    target = target.upper()
    phase = "ED" if target == "EDV" else "ES"
    xs, ys, ids = [], [], []
    for s in inputs:
        y = s.edv if target == "EDV" else s.esv
        if y is None:
            raise ConfigError(f"study {s.study_id} has no {target} truth")
        xs.append(stack_roles(s.images[phase], roles))
        ys.append(y)
        ids.append(s.study_id)
    return Dataset(np.stack(xs), np.array(ys), tuple(ids))


def augment_batch(x: np.ndarray, rng: np.random.Generator, params: preprocess.AugmentParams) -> np.ndarray:
    """One rotation/shift draw per sample, applied identically to all its channels."""
    out = np.empty_like(x)
    for i in range(len(x)):
        angle, dr, dc = preprocess.draw_augmentation(rng, params)
        for c in range(x.shape[1]):
            out[i, c] = preprocess.apply_augmentation(x[i, c], angle, dr, dc)
    return out


# ---------------------------------------------------------------- training

@dataclass
class Checkpoint:
    blob: bytes  # serialized network (nn.checkpoint container)
    epoch: int
    validation_loss: float

    def network(self) -> Network:
        return checkpoint.from_bytes(self.blob)[0]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.blob)
        return path


@dataclass
class TrainResult:
    best: Checkpoint
    history: list  # (epoch, train_rmse, val_rmse)
    saved_epochs: list


def evaluate_loss(net: Network, data: Dataset, batch_size: int = 64) -> float:
    preds = predict(net, data.x, batch_size)
    return rmse_loss(preds, data.y)[0]


def predict(net: Network, x, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([net.predict(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch indices.  A trailing batch of one sample is dropped
    because batch statistics are undefined for it."""
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def write_history(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_rmse_ml,val_rmse_ml"]
    lines += [f"{e},{tr:.6f},{va:.6f}" for e, tr, va in history]
    path.write_text("\n".join(lines) + "\n")
    return path


def train(train_set: Dataset, val_set: Dataset, net: Network, config: TrainConfig, history_path=None) -> TrainResult:
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dropout):
            layer.reseed([config.seed, i])
    if config.init_head_bias:
        head = [l for l in net.layers if isinstance(l, Dense)][-1]
        head.params["b"][:] = np.mean(train_set.y)
    opt = Adam(net, config.learning_rate, config.beta1, config.beta2, config.eps)
    meta = {"seed": int(config.seed), "target": config.target.upper()}
    history, saved = [], []
    best = None
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        try:
            x = augment_batch(train_set.x, rng, config.augment)
            sq, count = 0.0, 0
            for idx in batches(len(train_set), config.batch_size, rng):
                pred = net.forward(x[idx], "train")[:, 0]
                loss, g = rmse_loss(pred, train_set.y[idx])
                net.backward(g[:, None])
                opt.step()
                sq += loss * loss * len(idx)
                count += len(idx)
            val = evaluate_loss(net, val_set, config.batch_size)
        except NumericFault as exc:
            exc.checkpoint = best
            log.error("numeric fault at epoch %d; keeping checkpoint from epoch %s", epoch, best and best.epoch)
            raise
        tr = float(np.sqrt(sq / count))
        history.append((epoch, tr, val))
        if best is None or val < best.validation_loss:
            best = Checkpoint(checkpoint.to_bytes(net, {**meta, "epoch": epoch, "val_rmse": val}), epoch, val)
            saved.append(epoch)
        log.info("epoch %d train %.3f val %.3f", epoch, tr, val)
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(best, history, saved)


def predict_ensemble(models, x, batch_size: int = 64) -> np.ndarray:
    """Mean of three infer-mode predictions.  ``x`` is (N, C, H, W) or a
    FusedInput / single (C, H, W) tensor."""
    models = [m.network() if isinstance(m, Checkpoint) else m for m in models]
    if len(models) != 3:
        raise ConfigError(f"an ensemble needs exactly 3 models, got {len(models)}")
    spec = models[0].spec()
    if any(m.spec() != spec or m.input_shape != models[0].input_shape for m in models[1:]):
        raise ConfigError("ensemble members have different network specs")
    x = getattr(x, "tensor", x)
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    preds = sum(predict(m, x, batch_size) for m in models) / 3.0
    return float(preds[0]) if single else preds


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split (both parts sorted)."""
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    n_val = max(1, int(round(n * val_fraction)))
    if n - n_val < 2:
        raise ConfigError(f"{n} samples are too few for a train/validation split")
    order = np.random.default_rng([seed, 17]).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit(train_set: Dataset, val_set: Dataset, vgg, config: TrainConfig, dtype=np.float64, history_path=None) -> TrainResult:
    """Build a fresh VGG20-BN from ``vgg`` (VGGConfig or dict) seeded with
    ``config.seed`` and train it."""
    from .nn.network import build_vgg20bn

    cfg = dict(vgg) if isinstance(vgg, dict) else dict(vgg.__dict__)
    cfg["input_channels"] = train_set.x.shape[1]
    cfg["input_hw"] = train_set.x.shape[2]
    net = build_vgg20bn(cfg, seed=config.seed, dtype=dtype)
    return train(train_set, val_set, net, config, history_path)
