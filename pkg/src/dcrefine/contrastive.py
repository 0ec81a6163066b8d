"""Siamese encoder trained with a margin contrastive loss on augmented pairs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import PAIR_KINDS, AugOp, apply_op, random_op
from .dataset import Dataset, GrayImage, downscale
from .errors import ParameterError
from .nnet import Arch, init_params, save_params, unpack
from .projection import Embedding


@dataclass(frozen=True)
class EncoderParams:
    """Shared-weight encoder: ReLU hidden layer followed by a linear head."""

    arch: Arch  # arch.num_classes is the embedding width
    theta: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.arch.num_params,) or not np.all(np.isfinite(theta)):
            raise ParameterError("encoder theta must be finite with the arch's parameter count")
        if self.arch.num_classes < 2:
            raise ParameterError("embed_dim must be >= 2")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def embed_dim(self) -> int:
        return self.arch.num_classes

    def __eq__(self, other):
        return (isinstance(other, EncoderParams) and self.arch == other.arch
                and self.margin == other.margin and np.array_equal(self.theta, other.theta))

    __hash__ = None


@dataclass(frozen=True)
class Pair:
    a: GrayImage
    b: GrayImage
    same: bool
    ops: tuple[str, str] = ("", "")


@dataclass(frozen=True)
class SiameseConfig:
    margin: float = 1.0
    pairs_per_epoch: int = 2000
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    hidden_dim: int = 128
    embed_dim: int = 16
    max_side: int | None = 16
    views_per_sample: int = 16
    momentum: float = 0.0
    # sub-range of the normalized op magnitude used for pair views
    pair_magnitudes: tuple[float, float] = (0.3, 0.7)

    def validate(self):
        if not self.margin > 0:
            raise ParameterError("margin must be positive")
        if self.epochs < 0 or self.pairs_per_epoch < 2 or self.batch_size < 1 or self.views_per_sample < 1:
            raise ParameterError(f"invalid siamese schedule: {self}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.embed_dim < 2:
            raise ParameterError("embed_dim must be >= 2")
        lo, hi = self.pair_magnitudes
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError("pair_magnitudes must satisfy 0 <= lo <= hi <= 1")


def contrastive_loss(distance: float, same: bool, margin: float = 1.0) -> float:
    if distance < 0:
        raise ParameterError(f"distance must be non-negative, got {distance}")
    if same:
        return distance * distance
    gap = max(margin - distance, 0.0)
    return gap * gap


def _augment(img: GrayImage, rng: np.random.Generator,
             magnitudes: tuple[float, float] = (0.0, 1.0)) -> tuple[GrayImage, str]:
    kind = PAIR_KINDS[int(rng.integers(len(PAIR_KINDS)))]
    op = random_op(kind, rng)
    lo, hi = magnitudes
    op = AugOp(op.kind, lo + (hi - lo) * op.magnitude)
    return apply_op(img, op, int(rng.integers(2 ** 63))), kind


def _pair_indices(ds: Dataset, count: int, rng: np.random.Generator):
    """Alternating positive/negative index pairs ``(ia, ib, same)``."""
    labels = ds.labels
    by_class = [np.flatnonzero(labels == c) for c in range(ds.num_classes)]
    present = [c for c in range(ds.num_classes) if len(by_class[c])]
    pos_classes = [c for c in present if len(by_class[c]) >= 2]
    lonely = [ds.classes[c] for c in present if len(by_class[c]) < 2]
    if lonely:
        warnings.warn(f"classes with fewer than 2 samples form no positive pairs: {lonely}",
                      stacklevel=3)
    if len(present) < 2:
        raise ParameterError("negative pairs need at least two populated classes")
    pos_weights = np.array([len(by_class[c]) for c in pos_classes], dtype=np.float64)
    out = []
    for j in range(count):
        if j % 2 == 0 and pos_classes:
            c = pos_classes[int(rng.choice(len(pos_classes), p=pos_weights / pos_weights.sum()))]
            ia, ib = rng.choice(by_class[c], size=2, replace=False)
            out.append((int(ia), int(ib), True))
        else:
            ca, cb = rng.choice(present, size=2, replace=False)
            out.append((int(rng.choice(by_class[ca])), int(rng.choice(by_class[cb])), False))
    return out


def make_pairs(ds: Dataset, cfg: SiameseConfig, seed: int, count: int | None = None) -> list[Pair]:
    """Alternate positive and negative pairs, each member independently augmented."""
    count = cfg.pairs_per_epoch if count is None else count
    rng = np.random.default_rng(seed)
    pairs = []
    for ia, ib, same in _pair_indices(ds, count, rng):
        a, ka = _augment(ds.samples[ia].image, rng, cfg.pair_magnitudes)
        b, kb = _augment(ds.samples[ib].image, rng, cfg.pair_magnitudes)
        pairs.append(Pair(a, b, same, (ka, kb)))
    return pairs


def _inputs(arch: Arch, images: Sequence[GrayImage]) -> np.ndarray:
    rows = []
    for img in images:
        if arch.downscale != 1:
            img = downscale(img, arch.downscale)
        if img.width * img.height != arch.input_dim:
            raise ParameterError(f"{img.width}x{img.height} image does not match encoder input_dim")
        rows.append(np.frombuffer(img.pixels, dtype=np.uint8))
    return np.stack(rows).astype(np.float64) / 255.0


def _forward(arch: Arch, theta: np.ndarray, x: np.ndarray):
    w1, b1, w2, b2 = unpack(arch, theta)
    z1 = x @ w1 + b1
    hid = np.maximum(z1, 0.0)
    return z1, hid, hid @ w2 + b2


def embed_images(encoder: EncoderParams, images: Sequence[GrayImage]) -> np.ndarray:
    if not len(images):
        return np.zeros((0, encoder.embed_dim))
    return _forward(encoder.arch, encoder.theta, _inputs(encoder.arch, images))[2]


def embed(encoder: EncoderParams, ds: Dataset) -> Embedding:
    return Embedding(embed_images(encoder, [s.image for s in ds.samples]), ds.ids)


def pair_losses(encoder: EncoderParams, pairs: Sequence[Pair]) -> np.ndarray:
    ea = embed_images(encoder, [p.a for p in pairs])
    eb = embed_images(encoder, [p.b for p in pairs])
    d = np.linalg.norm(ea - eb, axis=1)
    return np.array([contrastive_loss(float(di), p.same, encoder.margin) for di, p in zip(d, pairs)])


def _batch_grad(arch: Arch, theta: np.ndarray, xa, xb, same, margin):
    m = len(same)
    x = np.concatenate([xa, xb])
    z1, hid, emb = _forward(arch, theta, x)
    diff = emb[:m] - emb[m:]
    d = np.linalg.norm(diff, axis=1)
    gap = np.maximum(margin - d, 0.0)
    loss = np.where(same, d ** 2, gap ** 2).mean()
    # dL/d(diff): same -> 2 diff; different -> -2 gap diff / d (zero where d == 0)
    safe_d = np.where(d > 0, d, 1.0)
    coef = np.where(same, 2.0, np.where(d > 0, -2.0 * gap / safe_d, 0.0)) / m
    g_diff = coef[:, None] * diff
    d_emb = np.concatenate([g_diff, -g_diff])
    w1, b1, w2, b2 = unpack(arch, theta)
    d_hid = (d_emb @ w2.T) * (z1 > 0)
    return float(loss), np.concatenate([
        (x.T @ d_hid).ravel(), d_hid.sum(0), (hid.T @ d_emb).ravel(), d_emb.sum(0)])


def init_encoder(ds: Dataset, cfg: SiameseConfig) -> EncoderParams:
    base = Arch.for_dataset(ds, cfg.hidden_dim, cfg.max_side)
    arch = Arch(base.input_dim, cfg.hidden_dim, cfg.embed_dim, base.downscale)
    return EncoderParams(arch, init_params(arch, cfg.seed).theta, cfg.margin)


def train_siamese(ds: Dataset, cfg: SiameseConfig, history: list | None = None) -> EncoderParams:
    """SGD on the mean contrastive loss; ``history`` collects per-epoch mean loss.

    Each sample gets ``cfg.views_per_sample`` augmented views up front; every
    epoch draws fresh pairs and a random view for each member.
    """
    cfg.validate()
    enc = init_encoder(ds, cfg)
    arch, theta = enc.arch, enc.theta.copy()
    if cfg.epochs == 0:
        return enc
    rng = np.random.default_rng(cfg.seed)
    views = np.stack([
        _inputs(arch, [_augment(s.image, rng, cfg.pair_magnitudes)[0] for s in ds.samples])
        for _ in range(cfg.views_per_sample)])  # (V, N, D)
    velocity = np.zeros_like(theta)
    for epoch in range(cfg.epochs):
        idx_pairs = _pair_indices(ds, cfg.pairs_per_epoch, rng)
        ia = np.array([a for a, _, _ in idx_pairs])
        ib = np.array([b for _, b, _ in idx_pairs])
        same = np.array([s for _, _, s in idx_pairs])
        va = rng.integers(cfg.views_per_sample, size=len(ia))
        vb = rng.integers(cfg.views_per_sample, size=len(ib))
        xa, xb = views[va, ia], views[vb, ib]
        order = rng.permutation(len(idx_pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, g = _batch_grad(arch, theta, xa[b], xb[b], same[b], cfg.margin)
            velocity = cfg.momentum * velocity - cfg.learning_rate * g
            theta = theta + velocity
            total += loss * len(b)
        if history is not None:
            history.append(total / len(order))
    return EncoderParams(arch, theta, cfg.margin)


def save_encoder(encoder: EncoderParams, path) -> None:
    from .nnet import Params
    save_params(Params(encoder.arch, encoder.theta), path,
                embed_dim=encoder.embed_dim, margin=encoder.margin)


def load_encoder(path) -> EncoderParams:
    from .nnet import load_params
    params, meta = load_params(path)
    return EncoderParams(params.arch, params.theta, float(meta.get("margin", 1.0)))
