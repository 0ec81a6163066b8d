"""Training-data valuation by hypergradients accumulated along the SGD trajectory.

For each tracked training point ``i`` the derivative ``p_i = d theta / d eps_i``
of the parameters with respect to an upweight on that point's loss is carried
through every SGD step::

    p_i <- p_i - lr * H_B(theta_t) p_i - lr * grad l(z_i; theta_t) * [i in B_t]

(``fast`` mode drops the Hessian term). The influence of training point ``i``
on validation point ``j`` is then ``-(1/N) grad l(z_j; theta_T) . p_i``;
negative values mark points whose upweighting raises validation loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import CapacityError, ParameterError
from .nnet import Arch, MLPObjective, Params, TrainConfig, fd_hvp, init_params, sgd

EXACT_CAP = 10 ** 7


@dataclass(frozen=True)
class InfluenceMatrix:
    values: np.ndarray
    train_ids: np.ndarray
    val_ids: np.ndarray
    mode: str = "fast"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        train_ids = np.asarray(self.train_ids, dtype=np.int64)
        val_ids = np.asarray(self.val_ids, dtype=np.int64)
        if values.shape != (len(train_ids), len(val_ids)):
            raise ParameterError(f"influence shape {values.shape} does not match id lists")
        if not np.all(np.isfinite(values)):
            raise ParameterError("influence values must be finite")
        if self.mode not in ("fast", "exact"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "train_ids", train_ids)
        object.__setattr__(self, "val_ids", val_ids)


@dataclass(frozen=True)
class FilterDecision:
    removed_ids: frozenset
    thresholds: tuple  # (val_id, min, std, threshold) per column
    votes: dict = field(default_factory=dict, compare=False)
    retained_by_guard: tuple = ()


def hypergradients(objective, theta0: np.ndarray, cfg: TrainConfig, mode: str = "fast",
                   track: Sequence[int] | None = None, cap: int = EXACT_CAP):
    """Run SGD while carrying ``p_i`` for each tracked position; returns ``(theta_T, p, steps)``."""
    if mode not in ("fast", "exact"):
        raise ParameterError(f"mode must be 'fast' or 'exact', got {mode!r}")
    n = objective.n
    track = np.arange(n) if track is None else np.asarray(track, dtype=np.int64)
    num_params = len(theta0)
    if mode == "exact" and n * num_params > cap:
        raise CapacityError(
            f"exact mode needs N*P = {n * num_params} > cap {cap}; use mode='fast'")
    row_of = {int(i): r for r, i in enumerate(track)}
    p = np.zeros((len(track), num_params))

    def hook(t, theta, batch, lr):
        if mode == "exact":
            gfun = lambda th: objective.grad(th, batch)[1]  # noqa: E731
            hp = np.stack([fd_hvp(gfun, theta, row) for row in p])
        rows = [(row_of[int(b)], int(b)) for b in batch if int(b) in row_of]
        if mode == "exact":
            p[...] -= lr * hp
        if rows:
            r_idx = np.array([r for r, _ in rows])
            grads = objective.sample_grads(theta, np.array([b for _, b in rows]))
            np.subtract.at(p, r_idx, lr * grads)

    theta, steps = sgd(objective, theta0, cfg, hook)
    return theta, p, steps


def influence_from_hypergradients(p: np.ndarray, val_grads: np.ndarray, n_train: int) -> np.ndarray:
    return -(p @ val_grads.T) / n_train


def hydra_influence(train: Dataset, val: Dataset, cfg: TrainConfig, mode: str = "fast",
                    arch: Arch | None = None, init: Params | None = None,
                    cap: int = EXACT_CAP) -> tuple[InfluenceMatrix, Params]:
    if len(val) == 0:
        raise ParameterError("validation set is empty")
    if arch is None:
        arch = init.arch if init is not None else Arch.for_dataset(train, max_side=16)
    if init is None:
        init = init_params(arch, cfg.seed)
    obj = MLPObjective.from_samples(arch, train)
    theta, p, _ = hypergradients(obj, init.theta, cfg, mode, cap=cap)
    val_obj = MLPObjective.from_samples(arch, val)
    val_grads = val_obj.sample_grads(theta, np.arange(val_obj.n))
    values = influence_from_hypergradients(p, val_grads, obj.n)
    return InfluenceMatrix(values, train.ids, val.ids, mode), Params(arch, theta, init.seed)


def min_std_filter(im: InfluenceMatrix, require_negative: bool = True, min_votes: int = 1,
                   labels: Mapping[int, int] | None = None) -> FilterDecision:
    """Flag training points whose influence falls below ``min + std`` of a column.

    A point is removed when at least ``min_votes`` validation columns flag it.
    If ``labels`` (train id -> class) is given, a class is never emptied: its
    least harmful member is kept.
    """
    vals = im.values
    mins = vals.min(axis=0)
    stds = vals.std(axis=0)  # population std; defined for a single row
    thr = mins + stds
    flags = vals < thr
    if require_negative:
        flags &= vals < 0
    votes = flags.sum(axis=1)
    removed = {int(i) for i, v in zip(im.train_ids, votes) if v >= min_votes}
    kept_by_guard = []
    if labels is not None and removed:
        worst = vals.min(axis=1)
        by_class: dict[int, list[int]] = {}
        for row, tid in enumerate(im.train_ids):
            by_class.setdefault(labels[int(tid)], []).append(row)
        for cls, rows in sorted(by_class.items()):
            if all(int(im.train_ids[r]) in removed for r in rows):
                keep = max(rows, key=lambda r: (worst[r], -r))
                removed.discard(int(im.train_ids[keep]))
                kept_by_guard.append(int(im.train_ids[keep]))
    thresholds = tuple((int(v), float(m), float(s), float(t))
                       for v, m, s, t in zip(im.val_ids, mins, stds, thr))
    return FilterDecision(frozenset(removed), thresholds,
                          {int(i): int(v) for i, v in zip(im.train_ids, votes)},
                          tuple(kept_by_guard))


def loo_delta(train: Dataset, val: Dataset, cfg: TrainConfig, i: int,
              arch: Arch | None = None) -> float:
    """Mean validation loss without training point ``i`` minus with it (retraining oracle)."""
    n = len(train)
    if n < 2:
        raise ParameterError("leave-one-out needs at least two training points")
    if not 0 <= i < n:
        raise ParameterError(f"index {i} out of range [0, {n})")
    arch = arch or Arch.for_dataset(train, max_side=16)
    theta0 = init_params(arch, cfg.seed).theta
    val_obj = MLPObjective.from_samples(arch, val)

    def val_loss(ds):
        obj = MLPObjective.from_samples(arch, ds)
        c = TrainConfig(cfg.epochs, min(cfg.batch_size, obj.n), cfg.learning_rate, cfg.seed)
        theta, _ = sgd(obj, theta0, c)
        return float(val_obj.losses(theta).mean())

    reduced = train.with_samples(s for k, s in enumerate(train.samples) if k != i)
    return val_loss(reduced) - val_loss(train)


def influence_report(im: InfluenceMatrix, decision: FilterDecision,
                     labels: Mapping[int, int] | None = None,
                     classes: Sequence[str] | None = None, top_k: int = 10) -> dict:
    per_class: dict[str, int] = {}
    if labels is not None:
        for tid in sorted(decision.removed_ids):
            lab = labels[tid]
            name = classes[lab] if classes is not None else str(lab)
            per_class[name] = per_class.get(name, 0) + 1
    flat = np.argsort(im.values, axis=None, kind="stable")[:top_k]
    rows, cols = np.unravel_index(flat, im.values.shape)
    return {
        "mode": im.mode,
        "num_train": int(len(im.train_ids)),
        "num_val": int(len(im.val_ids)),
        "removed": len(decision.removed_ids),
        "removed_ids": sorted(int(i) for i in decision.removed_ids),
        "removed_per_class": per_class,
        "retained_by_class_guard": list(decision.retained_by_guard),
        "thresholds": [{"val_id": v, "min": m, "std": s, "threshold": t}
                       for v, m, s, t in decision.thresholds],
        "most_negative": [{"train_id": int(im.train_ids[r]), "val_id": int(im.val_ids[c]),
                           "influence": float(im.values[r, c])} for r, c in zip(rows, cols)],
    }


def save_influence(im: InfluenceMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(im.values.astype("<f8").tobytes())
    meta = {"train_ids": im.train_ids.tolist(), "val_ids": im.val_ids.tolist(), "mode": im.mode}
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")


def load_influence(path) -> InfluenceMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    shape = (len(meta["train_ids"]), len(meta["val_ids"]))
    return InfluenceMatrix(values.reshape(shape), meta["train_ids"], meta["val_ids"], meta["mode"])


def decision_to_json(decision: FilterDecision) -> dict:
    return {"removed_ids": sorted(int(i) for i in decision.removed_ids),
            "thresholds": [list(t) for t in decision.thresholds],
            "retained_by_class_guard": list(decision.retained_by_guard)}
