"""A one-hidden-layer ReLU softmax classifier with hand-written gradients.

Everything the valuation stage needs from a model lives here: per-sample
losses, mean-loss gradients, per-sample gradient rows, finite-difference
Hessian-vector products and a plain SGD loop that exposes every step.
Parameters are one flat float64 vector laid out as ``W1, b1, W2, b2`` with
``W1`` of shape ``(input_dim, hidden_dim)`` and ``W2`` of shape
``(hidden_dim, num_classes)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, LabeledSample, downscale
from .errors import ParameterError
from .projection import Embedding


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dim: int
    num_classes: int
    # block-average factor applied to images before flattening
    downscale: int = 1

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_classes, self.downscale) < 1:
            raise ParameterError(f"all architecture dims must be >= 1: {self}")

    @property
    def num_params(self) -> int:
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        return d * h + h + h * k + k

    @classmethod
    def for_dataset(cls, ds: Dataset, hidden_dim: int = 32, max_side: int | None = None) -> Arch:
        """Pick the smallest downscale factor that brings the image within ``max_side``."""
        h, w = ds.shape
        factor = 1
        if max_side is not None:
            while (h // factor > max_side or w // factor > max_side) and \
                    h % (factor * 2) == 0 and w % (factor * 2) == 0:
                factor *= 2
        return cls((h // factor) * (w // factor), hidden_dim, ds.num_classes, factor)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "num_classes": self.num_classes, "downscale": self.downscale}


@dataclass(frozen=True)
class Params:
    arch: Arch
    theta: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.arch.num_params,):
            raise ParameterError(f"theta has shape {theta.shape}, expected ({self.arch.num_params},)")
        if not np.all(np.isfinite(theta)):
            raise ParameterError("theta contains non-finite entries")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def __eq__(self, other):
        return (isinstance(other, Params) and self.arch == other.arch
                and np.array_equal(self.theta, other.theta))

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0

    def validate(self, n: int | None = None):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1 or (n is not None and self.batch_size > n):
            raise ParameterError(f"batch_size must lie in [1, N], got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")


@dataclass(frozen=True)
class StepRecord:
    t: int
    lr: float
    batch: tuple[int, ...]


@dataclass(frozen=True)
class TrainTrace:
    steps: tuple[StepRecord, ...]
    seed: int
    final: Params | np.ndarray = field(compare=False)

    def __len__(self):
        return len(self.steps)


StepHook = Callable[[int, np.ndarray, np.ndarray, float], None]


def unpack(arch: Arch, theta: np.ndarray):
    d, h, k = arch.input_dim, arch.hidden_dim, arch.num_classes
    o = 0
    w1 = theta[o:o + d * h].reshape(d, h); o += d * h
    b1 = theta[o:o + h]; o += h
    w2 = theta[o:o + h * k].reshape(h, k); o += h * k
    b2 = theta[o:o + k]
    return w1, b1, w2, b2


def init_params(arch: Arch, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.num_params)
    w1, _, w2, _ = unpack(arch, theta)
    for w in (w1, w2):
        s = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-s, s, size=w.shape)
    return Params(arch, theta, seed)


def sample_features(arch: Arch, samples) -> np.ndarray:
    """Flattened [0, 1] inputs for a Dataset or a sequence of samples."""
    if isinstance(samples, Dataset):
        samples = samples.samples
    elif isinstance(samples, LabeledSample):
        samples = (samples,)
    rows = []
    for s in samples:
        img = s.image
        if arch.downscale != 1:
            img = downscale(img, arch.downscale)
        if img.width * img.height != arch.input_dim:
            raise ParameterError(
                f"sample {s.id}: {img.width}x{img.height} input does not match input_dim {arch.input_dim}")
        rows.append(np.frombuffer(img.pixels, dtype=np.uint8))
    if not rows:
        return np.zeros((0, arch.input_dim))
    return np.stack(rows).astype(np.float64) / 255.0


def _labels(samples) -> np.ndarray:
    if isinstance(samples, Dataset):
        return samples.labels
    if isinstance(samples, LabeledSample):
        return np.array([samples.label])
    return np.array([s.label for s in samples], dtype=np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class MLPObjective:
    """Mean cross-entropy of the classifier over a fixed design matrix.

    The SGD loop and the hypergradient code only talk to objects exposing
    ``n``, ``grad(theta, idx)`` and ``sample_grads(theta, idx)``; this is the
    production one.
    """

    def __init__(self, arch: Arch, x: np.ndarray, y: np.ndarray):
        self.arch = arch
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.n = len(self.y)

    @classmethod
    def from_samples(cls, arch: Arch, samples) -> MLPObjective:
        return cls(arch, sample_features(arch, samples), _labels(samples))

    def _forward(self, theta, x):
        w1, b1, w2, b2 = unpack(self.arch, theta)
        z1 = x @ w1 + b1
        hid = np.maximum(z1, 0.0)
        return z1, hid, hid @ w2 + b2

    def losses(self, theta, idx=None) -> np.ndarray:
        x, y = (self.x, self.y) if idx is None else (self.x[idx], self.y[idx])
        logp = _log_softmax(self._forward(theta, x)[2])
        return -logp[np.arange(len(y)), y]

    def _deltas(self, theta, idx):
        x, y = self.x[idx], self.y[idx]
        w1, b1, w2, b2 = unpack(self.arch, theta)
        z1, hid, logits = self._forward(theta, x)
        logp = _log_softmax(logits)
        d2 = np.exp(logp)
        d2[np.arange(len(y)), y] -= 1.0
        d1 = (d2 @ w2.T) * (z1 > 0)
        loss = -logp[np.arange(len(y)), y]
        return x, hid, d1, d2, loss

    def grad(self, theta, idx) -> tuple[float, np.ndarray]:
        idx = np.asarray(idx)
        x, hid, d1, d2, loss = self._deltas(theta, idx)
        m = len(idx)
        return float(loss.mean()), np.concatenate([
            (x.T @ d1).ravel() / m, d1.sum(0) / m, (hid.T @ d2).ravel() / m, d2.sum(0) / m])

    def sample_grads(self, theta, idx) -> np.ndarray:
        """One gradient row per index, shape ``(len(idx), P)``."""
        idx = np.asarray(idx)
        x, hid, d1, d2, _ = self._deltas(theta, idx)
        m = len(idx)
        return np.concatenate([
            np.einsum("nd,nh->ndh", x, d1).reshape(m, -1), d1,
            np.einsum("nh,nk->nhk", hid, d2).reshape(m, -1), d2], axis=1)


def per_sample_loss(params: Params, sample: LabeledSample) -> float:
    obj = MLPObjective.from_samples(params.arch, [sample])
    return float(obj.losses(params.theta)[0])


def grad(params: Params, samples) -> tuple[float, np.ndarray]:
    obj = MLPObjective.from_samples(params.arch, samples)
    if obj.n == 0:
        raise ParameterError("gradient of an empty batch")
    return obj.grad(params.theta, np.arange(obj.n))


def fd_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Central-difference Hessian-vector product of any gradient function."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape != np.shape(theta):
        raise ParameterError(f"v must have shape {np.shape(theta)}, got {v.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(v)
    h = 1e-4 * max(1.0, float(np.linalg.norm(theta))) / max(1.0, vnorm)
    return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)


def hvp(params: Params, samples, v) -> np.ndarray:
    obj = MLPObjective.from_samples(params.arch, samples)
    idx = np.arange(obj.n)
    return fd_hvp(lambda th: obj.grad(th, idx)[1], params.theta, v)


def sgd(objective, theta0: np.ndarray, cfg: TrainConfig, step_hook: StepHook | None = None,
        ids: Sequence[int] | None = None, extra_grad: Callable | None = None):
    """Plain minibatch SGD over ``objective`` with a seeded per-epoch shuffle.

    ``step_hook(t, theta_before, batch_positions, lr)`` runs after each update.
    ``extra_grad(t, theta, batch_positions)`` may add a term to the step's
    gradient (used by perturbation oracles). Returns ``(theta, steps)``.
    """
    n = objective.n
    cfg.validate(n)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(theta0, dtype=np.float64)
    steps = []
    t = 0
    lr = float(cfg.learning_rate)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, g = objective.grad(theta, batch)
            if extra_grad is not None:
                g = g + extra_grad(t, theta, batch)
            before = theta
            theta = theta - lr * g
            steps.append(StepRecord(t, lr, tuple(int(i) for i in ids[batch])))
            if step_hook is not None:
                step_hook(t, before, batch, lr)
            t += 1
    return theta, tuple(steps)


def train_sgd(train: Dataset, cfg: TrainConfig, step_hook: StepHook | None = None,
              arch: Arch | None = None, init: Params | None = None) -> tuple[Params, TrainTrace]:
    if arch is None:
        arch = init.arch if init is not None else Arch.for_dataset(train)
    if init is None:
        init = init_params(arch, cfg.seed)
    obj = MLPObjective.from_samples(arch, train)
    theta, steps = sgd(obj, init.theta, cfg, step_hook, ids=train.ids)
    final = Params(arch, theta, init.seed)
    return final, TrainTrace(steps, cfg.seed, final)


def logits(params: Params, ds) -> np.ndarray:
    obj = MLPObjective.from_samples(params.arch, ds)
    return obj._forward(params.theta, obj.x)[2]


def predict(params: Params, ds) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return np.argmax(logits(params, ds), axis=1)


def accuracy(params: Params, ds: Dataset) -> float:
    return float(np.mean(predict(params, ds) == ds.labels))


def penultimate(params: Params, ds: Dataset) -> Embedding:
    x = sample_features(params.arch, ds)
    w1, b1, _, _ = unpack(params.arch, params.theta)
    return Embedding(np.maximum(x @ w1 + b1, 0.0), ds.ids)


def save_params(params: Params, path, **extra) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(params.theta.astype("<f8").tobytes())
    meta = {"arch": params.arch.to_dict(), "seed": params.seed, **extra}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[Params, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arch = Arch(**meta["arch"])
    theta = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    return Params(arch, theta, meta.get("seed")), meta
