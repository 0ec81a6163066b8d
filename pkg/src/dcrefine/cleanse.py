"""Neighborhood rules that turn an embedding's k-NN graph into dataset edits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .errors import ParameterError
from .projection import NeighborGraph


@dataclass(frozen=True)
class CleanseConfig:
    k: int = 5
    drop_alpha: float = 2.0
    # clause (b) fires when more than this fraction of neighbors is foreign
    foreign_majority: float = 0.5
    edge_quantile: float = 0.90

    def validate(self):
        if self.k < 2:
            raise ParameterError("k must be >= 2")
        if not 0 < self.edge_quantile < 1:
            raise ParameterError("edge_quantile must lie in (0, 1)")
        if not self.drop_alpha > 0:
            raise ParameterError("drop_alpha must be positive")
        if not 0 <= self.foreign_majority < 1:
            raise ParameterError("foreign_majority must lie in [0, 1)")


@dataclass(frozen=True)
class CleansePlan:
    relabels: tuple = ()          # (id, old_label, new_label)
    drops: frozenset = frozenset()
    edge_cases: frozenset = frozenset()
    stats: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        return {
            "relabels": [{"id": i, "old_label": o, "new_label": n} for i, o, n in self.relabels],
            "drops": sorted(self.drops),
            "edge_cases": sorted(self.edge_cases),
            "stats": self.stats,
        }

    @classmethod
    def from_json(cls, data: dict) -> CleansePlan:
        return cls(tuple((r["id"], r["old_label"], r["new_label"]) for r in data["relabels"]),
                   frozenset(data["drops"]), frozenset(data["edge_cases"]), data.get("stats", {}))


def _neighbor_labels(graph: NeighborGraph, labels) -> np.ndarray:
    lookup = {int(i): int(labels[int(i)]) for i in graph.ids}
    return np.vectorize(lookup.__getitem__, otypes=[np.int64])(graph.neighbors)


def _check(graph: NeighborGraph, cfg: CleanseConfig):
    cfg.validate()
    if graph.k != cfg.k:
        raise ParameterError(f"graph has k={graph.k} but config asks for k={cfg.k}")


def relabel_rule(graph: NeighborGraph, labels, cfg: CleanseConfig) -> list[tuple[int, int, int]]:
    """Relabel a point whose k neighbors unanimously carry one other label.

    ``labels`` maps sample id to class (a dict or anything indexable by id).
    """
    _check(graph, cfg)
    nl = _neighbor_labels(graph, labels)
    out = []
    for row, sid in enumerate(graph.ids):
        own = int(labels[int(sid)])
        first = nl[row, 0]
        if first != own and np.all(nl[row] == first):
            out.append((int(sid), own, int(first)))
    return out


def drop_rule(graph: NeighborGraph, labels, cfg: CleanseConfig,
              relabeled: set | None = None) -> set[int]:
    """Drop isolated points and points sitting in a foreign cluster.

    Isolation: nearest-neighbor distance above ``mean + drop_alpha * std``
    (population statistics over all points). Foreign: more than
    ``foreign_majority`` of the neighbors carry another label, unless the
    relabel rule claims the point.
    """
    _check(graph, cfg)
    if relabeled is None:
        relabeled = {i for i, _, _ in relabel_rule(graph, labels, cfg)}
    d1 = graph.distances[:, 0]
    limit = d1.mean() + cfg.drop_alpha * d1.std()
    nl = _neighbor_labels(graph, labels)
    drops = set()
    for row, sid in enumerate(graph.ids):
        sid = int(sid)
        if sid in relabeled:
            continue
        foreign = np.sum(nl[row] != int(labels[sid]))
        if d1[row] > limit or foreign > cfg.foreign_majority * cfg.k:
            drops.add(sid)
    return drops


def edge_case_rule(graph: NeighborGraph, labels, cfg: CleanseConfig,
                   relabeled: set | None = None, dropped: set | None = None) -> set[int]:
    """Flag in-cluster points that sit far from their nearest same-class neighbor.

    Among kept points, those with at least half their neighbors sharing their
    label are ranked by nearest same-label neighbor distance (ties by id);
    the ranks at or beyond ``floor(q * n_kept)`` are edge cases.
    """
    _check(graph, cfg)
    if relabeled is None:
        relabeled = {i for i, _, _ in relabel_rule(graph, labels, cfg)}
    if dropped is None:
        dropped = drop_rule(graph, labels, cfg, relabeled)
    nl = _neighbor_labels(graph, labels)
    stats = []
    for row, sid in enumerate(graph.ids):
        sid = int(sid)
        if sid in relabeled or sid in dropped:
            continue
        same = nl[row] == int(labels[sid])
        # the first same-label entry of a sorted k-NN list is the global nearest one
        d_same = graph.distances[row, np.argmax(same)] if same.any() else math.inf
        stats.append((d_same, sid, 2 * same.sum() >= cfg.k))
    stats.sort(key=lambda s: (s[0], s[1]))
    cut = int(math.floor(cfg.edge_quantile * len(stats)))
    return {sid for d, sid, eligible in stats[cut:] if eligible}


def plan(graph: NeighborGraph, labels, cfg: CleanseConfig, with_edges: bool = True) -> CleansePlan:
    relabels = relabel_rule(graph, labels, cfg)
    relabeled = {i for i, _, _ in relabels}
    drops = drop_rule(graph, labels, cfg, relabeled)
    edges = edge_case_rule(graph, labels, cfg, relabeled, drops) if with_edges else set()
    d1 = graph.distances[:, 0]
    stats = {
        "nodes": int(len(graph.ids)),
        "relabels": len(relabels),
        "drops": len(drops),
        "edge_cases": len(edges),
        "isolation_limit": float(d1.mean() + cfg.drop_alpha * d1.std()),
    }
    return CleansePlan(tuple(relabels), frozenset(drops), frozenset(edges), stats)


def apply_plan(ds: Dataset, plan: CleansePlan) -> Dataset:
    for sid in [i for i, _, _ in plan.relabels] + sorted(plan.drops) + sorted(plan.edge_cases):
        if sid not in ds:
            raise ParameterError(f"plan references unknown id {sid}")
    if not plan.relabels and not plan.drops:
        return ds
    new_label = {i: n for i, _, n in plan.relabels}
    out = []
    for s in ds.samples:
        if s.id in plan.drops:
            continue
        if s.id in new_label:
            s = replace(s, label=new_label[s.id], provenance="relabeled")
        out.append(s)
    return ds.with_samples(out)


def relabel_precision(ds: Dataset, plan: CleansePlan) -> float | None:
    """Fraction of relabels that restore the true label (synthetic data only)."""
    scored = [(ds.get(i).true_label, n) for i, _, n in plan.relabels
              if ds.get(i).true_label is not None]
    if not scored:
        return None
    return sum(t == n for t, n in scored) / len(scored)
