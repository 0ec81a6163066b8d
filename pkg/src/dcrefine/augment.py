"""Grayscale transform kernels, augmentation policies, a policy search and
dataset-level augmentation (class balancing, edge-case copies).

Magnitudes are normalized to [0, 1]. For signed ops 0.5 is the neutral point,
so the identity sits inside the search space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset, GrayImage, LabeledSample
from .errors import ParameterError

KINDS = ("shear_x", "translate_x", "translate_y", "rotate", "zoom", "invert", "gaussian_noise")
# op sets per stage
SEARCH_KINDS = ("shear_x", "invert", "translate_x", "translate_y", "rotate", "gaussian_noise")
PAIR_KINDS = ("shear", "inversion", "shift", "rotation", "zoom", "gaussian_noise")
EDGE_KINDS = ("invert", "translate", "zoom", "rotate")

MAX_ROTATE_DEG = 30.0
MAX_SHEAR = 0.3
MAX_TRANSLATE = 0.2
ZOOM_RANGE = (0.7, 1.3)
MAX_NOISE_SIGMA = 0.15
FILL = 255.0


@dataclass(frozen=True)
class AugOp:
    kind: str
    magnitude: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown op kind {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ParameterError(f"magnitude must lie in [0, 1], got {self.magnitude}")


@dataclass(frozen=True)
class Stage:
    op: AugOp
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class Policy:
    sub_policies: tuple[tuple[Stage, ...], ...]

    def __post_init__(self):
        subs = tuple(tuple(s) for s in self.sub_policies)
        if not subs:
            raise ParameterError("a policy needs at least one sub-policy")
        for sub in subs:
            if len(sub) not in (1, 2):
                raise ParameterError("each sub-policy has one or two stages")
        object.__setattr__(self, "sub_policies", subs)

    def kinds(self) -> set[str]:
        return {st.op.kind for sub in self.sub_policies for st in sub}

    def to_json(self) -> list:
        return [{"stages": [{"kind": st.op.kind, "p": st.p, "magnitude": st.op.magnitude}
                            for st in sub]} for sub in self.sub_policies]

    @classmethod
    def from_json(cls, data) -> Policy:
        if isinstance(data, str):
            data = json.loads(data)
        return cls(tuple(tuple(Stage(AugOp(st["kind"], float(st.get("magnitude", 0.5))), float(st["p"]))
                               for st in sub["stages"]) for sub in data))


# --- kernels --------------------------------------------------------------------

def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


_GRIDS: dict = {}


def _grid(h: int, w: int):
    key = (h, w)
    if key not in _GRIDS:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        _GRIDS[key] = (xx - (w - 1) / 2.0, yy - (h - 1) / 2.0)
    return _GRIDS[key]


def warp_affine(arr: np.ndarray, matrix, offset=(0.0, 0.0), fill: float = FILL) -> np.ndarray:
    """Apply ``out(p) = in(A^-1 (p - c - offset) + c)`` with bilinear sampling.

    ``matrix`` is the forward 2x2 map in (x, y) order about the image center
    ``c``; samples falling outside the source read ``fill``.
    """
    h, w = arr.shape
    a = np.asarray(matrix, dtype=np.float64)
    inv = np.eye(2) if np.array_equal(a, np.eye(2)) else np.linalg.inv(a)
    gx, gy = _grid(h, w)
    u = gx - offset[0]
    v = gy - offset[1]
    sx = inv[0, 0] * u + inv[0, 1] * v + (w - 1) / 2.0
    sy = inv[1, 0] * u + inv[1, 1] * v + (h - 1) / 2.0
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    # indices into the source padded by one fill pixel on every side
    outside = (sx < -1) | (sx >= w) | (sy < -1) | (sy >= h)
    xi = np.clip(x0.astype(np.int64) + 1, 0, w)
    yi = np.clip(y0.astype(np.int64) + 1, 0, h)
    src = np.full((h + 2, w + 2), fill)
    src[1:-1, 1:-1] = arr
    base = yi * (w + 2) + xi
    flat = src.ravel()
    top = flat[base] * (1 - fx) + flat[base + 1] * fx
    bottom = flat[base + w + 2] * (1 - fx) + flat[base + w + 3] * fx
    out = top * (1 - fy) + bottom * fy
    out[outside] = fill
    return _to_u8(out)


def translate(img: GrayImage, dx: float, dy: float) -> GrayImage:
    return GrayImage.from_array(warp_affine(img.array(), np.eye(2), (dx, dy)))


def _signed(magnitude: float) -> float:
    return (magnitude - 0.5) * 2.0


def apply_op(img: GrayImage, op: AugOp, seed: int = 0) -> GrayImage:
    arr = img.array()
    m = op.magnitude
    if op.kind == "invert":
        return GrayImage.from_array(255 - arr)
    if op.kind == "gaussian_noise":
        sigma = MAX_NOISE_SIGMA * m
        if sigma == 0:
            return img
        rng = np.random.default_rng(seed)
        noisy = img.unit() + rng.normal(0.0, sigma, size=arr.shape)
        return GrayImage.from_array(_to_u8(noisy * 255.0))
    offset = (0.0, 0.0)
    if op.kind == "rotate":
        a = math.radians(MAX_ROTATE_DEG * _signed(m))
        matrix = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
    elif op.kind == "shear_x":
        matrix = [[1.0, MAX_SHEAR * _signed(m)], [0.0, 1.0]]
    elif op.kind == "zoom":
        s = ZOOM_RANGE[0] + (ZOOM_RANGE[1] - ZOOM_RANGE[0]) * m
        matrix = [[s, 0.0], [0.0, s]]
    elif op.kind == "translate_x":
        matrix, offset = np.eye(2), (MAX_TRANSLATE * _signed(m) * img.width, 0.0)
    else:  # translate_y
        matrix, offset = np.eye(2), (0.0, MAX_TRANSLATE * _signed(m) * img.height)
    return GrayImage.from_array(warp_affine(arr, matrix, offset))


def apply_policy(img: GrayImage, policy: Policy, seed: int) -> GrayImage:
    rng = np.random.default_rng(seed)
    sub = policy.sub_policies[int(rng.integers(len(policy.sub_policies)))]
    for stage in sub:
        fire = rng.random() < stage.p
        op_seed = int(rng.integers(2 ** 63))
        if fire:
            img = apply_op(img, stage.op, op_seed)
    return img


def random_op(kind: str, rng: np.random.Generator) -> AugOp:
    """An op of a named family with a seeded magnitude (pair/edge vocabularies accepted)."""
    alias = {"shear": "shear_x", "inversion": "invert", "rotation": "rotate"}
    kind = alias.get(kind, kind)
    if kind in ("shift", "translate"):
        kind = "translate_x" if rng.random() < 0.5 else "translate_y"
    return AugOp(kind, float(rng.uniform(0.0, 1.0)))


def random_policy(rng: np.random.Generator, kinds: Sequence[str] = SEARCH_KINDS,
                  num_sub_policies: int = 5, stages: int = 2) -> Policy:
    subs = []
    for _ in range(num_sub_policies):
        sub = []
        for _ in range(stages):
            kind = kinds[int(rng.integers(len(kinds)))]
            sub.append(Stage(AugOp(kind, float(rng.uniform())), float(rng.uniform())))
        subs.append(tuple(sub))
    return Policy(tuple(subs))


# --- policy search --------------------------------------------------------------

def frechet_diag(feats_a, feats_b) -> float:
    """Frechet distance between diagonal-covariance Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ParameterError("feature sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    dmu = a.mean(0) - b.mean(0)
    dsd = np.sqrt(a.var(0)) - np.sqrt(b.var(0))
    return float(dmu @ dmu + dsd @ dsd)


@dataclass(frozen=True)
class Candidate:
    policy: Policy
    perturbation: float
    distance: float


@dataclass(frozen=True)
class PolicySearch:
    policy: Policy
    candidates: tuple[Candidate, ...]
    chosen: int
    warning: str | None = None


def policy_search(ds: Dataset, encoder, budget: int = 16, diversity_floor: float = 0.02,
                  seed: int = 0, probe_size: int = 128, num_sub_policies: int = 5) -> PolicySearch:
    """Random search for the policy whose augmentations best match the data's feature distribution."""
    from .contrastive import embed_images

    if budget < 1:
        raise ParameterError("budget must be >= 1")
    if ds is None or len(ds) == 0:
        raise ParameterError("policy search needs a nonempty dataset")
    rng = np.random.default_rng(seed)
    probe_pos = np.sort(rng.choice(len(ds), size=min(probe_size, len(ds)), replace=False))
    probe = [ds.samples[p].image for p in probe_pos]
    base = np.stack([im.array() for im in probe]).astype(np.float64)
    base_feats = embed_images(encoder, probe)
    cands = []
    for _ in range(budget):
        policy = random_policy(rng, SEARCH_KINDS, num_sub_policies)
        seeds = rng.integers(2 ** 63, size=len(probe))
        augmented = [apply_policy(im, policy, int(s)) for im, s in zip(probe, seeds)]
        arr = np.stack([im.array() for im in augmented]).astype(np.float64)
        delta = float(np.mean(np.abs(arr - base)) / 255.0)
        dist = frechet_diag(embed_images(encoder, augmented), base_feats)
        cands.append(Candidate(policy, delta, dist))
    eligible = [i for i, c in enumerate(cands) if c.perturbation >= diversity_floor]
    warning = None
    if eligible:
        chosen = min(eligible, key=lambda i: (cands[i].distance, i))
    else:
        chosen = max(range(len(cands)), key=lambda i: (cands[i].perturbation, -i))
        warning = (f"no candidate reached perturbation floor {diversity_floor}; "
                   f"returning the most perturbing one ({cands[chosen].perturbation:.4f})")
    return PolicySearch(cands[chosen].policy, tuple(cands), chosen, warning)


def search_policy(ds: Dataset, encoder, budget: int = 16, diversity_floor: float = 0.02,
                  seed: int = 0, **kw) -> Policy:
    return policy_search(ds, encoder, budget, diversity_floor, seed, **kw).policy


# --- dataset-level augmentation -----------------------------------------------------

def _copy(src: LabeledSample, image: GrayImage, new_id: int) -> LabeledSample:
    return LabeledSample(new_id, image, src.label, "augmented", src.true_label, src.id)


def balance_targets(counts: Sequence[int], budget_cap: int) -> tuple[int, bool]:
    """Per-class target and whether the cap stops augmentation short of it."""
    k = len(counts)
    target = min(max(counts), budget_cap // k)
    needed = sum(max(0, target - c) for c in counts)
    return target, sum(counts) + needed > budget_cap


def balance_classes(ds: Dataset, policy: Policy, budget_cap: int, seed: int) -> Dataset:
    """Fill every class up to a common target with policy-augmented copies."""
    n = len(ds)
    if budget_cap < n:
        raise ParameterError(f"budget_cap {budget_cap} is below the dataset size {n}")
    labels = ds.labels
    counts = np.bincount(labels, minlength=ds.num_classes).tolist()
    target, _ = balance_targets(counts, budget_cap)
    rng = np.random.default_rng(seed)
    members = {c: rng.permutation(np.flatnonzero(labels == c)) for c in range(ds.num_classes)}
    deficit = {c: target - counts[c] for c in range(ds.num_classes)
               if counts[c] < target and len(members[c])}
    added = []
    cursor = {c: 0 for c in deficit}
    next_id = ds.next_id()
    total = n
    # round-robin over deficit classes so a binding cap is shared fairly
    while deficit and total < budget_cap:
        for c in sorted(deficit):
            if total >= budget_cap:
                break
            src = ds.samples[members[c][cursor[c] % len(members[c])]]
            cursor[c] += 1
            img = apply_policy(src.image, policy, int(rng.integers(2 ** 63)))
            added.append(_copy(src, img, next_id))
            next_id += 1
            total += 1
            deficit[c] -= 1
            if deficit[c] == 0:
                del deficit[c]
    if not added:
        return ds
    return ds.with_samples(ds.samples + tuple(added))


def edge_augment(ds: Dataset, edge_ids, seed: int) -> Dataset:
    """Append one invert, translate, zoom and rotate copy of every edge-case sample."""
    edge_ids = sorted(set(int(i) for i in edge_ids))
    for i in edge_ids:
        if i not in ds:
            raise ParameterError(f"unknown edge-case id {i}")
    if not edge_ids:
        return ds
    rng = np.random.default_rng(seed)
    next_id = ds.next_id()
    added = []
    for i in edge_ids:
        src = ds.get(i)
        for kind in EDGE_KINDS:
            op = random_op(kind, rng)
            added.append(_copy(src, apply_op(src.image, op, int(rng.integers(2 ** 63))), next_id))
            next_id += 1
    return ds.with_samples(ds.samples + tuple(added))


def invert_copies(ds: Dataset, budget_cap: int) -> Dataset:
    """Append a pixel-inverted copy of every sample, in order, while the cap allows."""
    room = max(0, budget_cap - len(ds))
    next_id = ds.next_id()
    added = [_copy(s, apply_op(s.image, AugOp("invert")), next_id + j)
             for j, s in enumerate(ds.samples[:room])]
    return ds.with_samples(ds.samples + tuple(added)) if added else ds

