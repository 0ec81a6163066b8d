import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nearest_rank_upper_tail

from dcrefine.cleanse import (CleanseConfig, CleansePlan, apply_plan, drop_rule, edge_case_rule, plan,
                              relabel_precision, relabel_rule)
from dcrefine.dataset import inject_label_noise
from dcrefine.errors import ParameterError
from dcrefine.projection import Embedding, NeighborGraph, knn

K5 = CleanseConfig(k=5)


def _star(center_label, neighbor_labels):
    """Node 0 with neighbors 1..k at unit distance; the leaves point at each other."""
    k = len(neighbor_labels)
    ids = np.arange(k + 1)
    neighbors = np.array([[j for j in ids if j != i][:k] for i in ids])
    graph = NeighborGraph(ids, neighbors, np.ones((k + 1, k)))
    return graph, {0: center_label, **{i + 1: lab for i, lab in enumerate(neighbor_labels)}}


# --- relabel --------------------------------------------------------------------------------------

def test_relabel_unanimous_foreign():
    g, labels = _star(0, [1, 1, 1, 1, 1])
    assert (0, 0, 1) in relabel_rule(g, labels, K5)


def test_relabel_requires_unanimity():
    g, labels = _star(0, [1, 1, 1, 1, 2])
    assert all(r[0] != 0 for r in relabel_rule(g, labels, K5))
    g, labels = _star(1, [1, 1, 1, 1, 1])
    assert relabel_rule(g, labels, K5) == []


def test_relabel_k_mismatch():
    g, labels = _star(0, [1, 1, 1])
    with pytest.raises(ParameterError, match="k=3"):
        relabel_rule(g, labels, K5)


# --- drop -------------------------------------------------------------------------------------------

def test_drop_isolated_point():
    # ten nodes with d1 = 1 and one with d1 = 10; mu = 20/11, sigma ~ 2.587, limit ~ 6.99
    n = 11
    ids = np.arange(n)
    neighbors = np.array([[(i + 1) % n, (i + 2) % n] for i in ids])
    dist = np.ones((n, 2))
    dist[4] = [10.0, 10.0]
    g = NeighborGraph(ids, neighbors, dist)
    labels = {i: 0 for i in ids}
    d1 = dist[:, 0]
    assert 1.0 < d1.mean() + 2 * d1.std() < 10.0
    assert drop_rule(g, labels, CleanseConfig(k=2)) == {4}


def test_drop_strict_inequality():
    # equal d1 everywhere: sigma = 0 and no point exceeds the mean
    n = 6
    g = NeighborGraph(np.arange(n), np.array([[(i + 1) % n, (i + 2) % n] for i in range(n)]),
                      np.full((n, 2), 3.0))
    assert drop_rule(g, {i: 0 for i in range(n)}, CleanseConfig(k=2)) == set()


def test_drop_foreign_majority():
    g, labels = _star(0, [1, 1, 1, 2, 2])
    assert 0 in drop_rule(g, labels, K5)
    assert 0 not in relabel_rule(g, labels, K5)


def test_keep_majority_own():
    g, labels = _star(0, [0, 0, 0, 1, 1])
    assert 0 not in drop_rule(g, labels, K5)


def test_relabel_takes_precedence():
    g, labels = _star(0, [1, 1, 1, 1, 1])
    p = plan(g, labels, K5)
    assert 0 not in p.drops and p.relabels == ((0, 0, 1),)


# --- edge cases --------------------------------------------------------------------------------------

def test_edge_straggler():
    # nine points spaced 0.1 apart plus one same-label point 1.5 beyond the end
    xs = [0.1 * i for i in range(9)] + [0.8 + 1.5]
    emb = Embedding(np.array(xs)[:, None], np.arange(10))
    cfg = CleanseConfig(k=3, drop_alpha=10.0, edge_quantile=0.9)
    g = knn(emb, 3)
    labels = {i: 0 for i in range(10)}
    assert drop_rule(g, labels, cfg) == set()
    # ranks at or beyond floor(0.9 * 10) = 9: only the largest statistic
    assert edge_case_rule(g, labels, cfg) == {9}


@pytest.mark.parametrize("n,q", [(20, 0.9), (20, 0.75), (13, 0.5), (7, 0.3)])
def test_edge_lattice_count(n, q):
    g = knn(Embedding(np.arange(n, dtype=float)[:, None], np.arange(n)), 2)
    edges = edge_case_rule(g, {i: 0 for i in range(n)}, CleanseConfig(k=2, edge_quantile=q))
    assert len(edges) == nearest_rank_upper_tail(range(n), q) == math.ceil(round((1 - q) * n, 9))
    # equal statistics are ranked by id, so the highest ids are flagged
    assert edges == set(range(n - len(edges), n))


def test_edge_excludes_dropped_and_minority():
    g, labels = _star(0, [1, 1, 1, 2, 2])
    edges = edge_case_rule(g, labels, CleanseConfig(k=5, edge_quantile=0.01))
    assert 0 not in edges


def test_config_validation():
    for bad in (CleanseConfig(k=1), CleanseConfig(edge_quantile=1.0), CleanseConfig(edge_quantile=0.0),
                CleanseConfig(drop_alpha=0.0), CleanseConfig(foreign_majority=1.0)):
        with pytest.raises(ParameterError):
            bad.validate()


# --- plan-level properties ---------------------------------------------------------------------------

def _noisy_clusters(seed, n_per=15, flips=4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 8, size=(3, 4))
    rows = np.concatenate([c + rng.normal(0, 1.0, (n_per, 4)) for c in centers])
    labels = np.repeat([0, 1, 2], n_per)
    for i in rng.choice(len(labels), flips, replace=False):
        labels[i] = (labels[i] + 1) % 3
    return rows, {i: int(lab) for i, lab in enumerate(labels)}


@pytest.mark.parametrize("c", [0.5, 3.0])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_plan_scale_invariance(seed, c):
    rows, labels = _noisy_clusters(seed)
    ids = np.arange(len(rows))
    base = plan(knn(Embedding(rows, ids), 5), labels, K5)
    scaled = plan(knn(Embedding(rows * c, ids), 5), labels, K5)
    assert base == scaled
    assert base.relabels or base.drops


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 30), st.integers(2, 4))
def test_plan_disjoint(seed, n, k):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n, 2))
    labels = {i: int(v) for i, v in enumerate(rng.integers(0, 3, n))}
    p = plan(knn(Embedding(rows, np.arange(n)), k), labels, CleanseConfig(k=k))
    relabeled = {i for i, _, _ in p.relabels}
    assert not relabeled & p.drops and not relabeled & p.edge_cases and not p.drops & p.edge_cases
    assert all(old != new for _, old, new in p.relabels)


def test_plan_json_round_trip():
    rows, labels = _noisy_clusters(0)
    p = plan(knn(Embedding(rows, np.arange(len(rows))), 5), labels, K5)
    back = CleansePlan.from_json(json.loads(json.dumps(p.to_json())))
    assert back == p and back.stats == p.stats
    assert p.stats["nodes"] == len(rows)


# --- applying plans -------------------------------------------------------------------------------------

def test_apply_empty_plan_is_identity(small_glyphs):
    assert apply_plan(small_glyphs, CleansePlan()) is small_glyphs


def test_apply_drops_and_relabels(small_glyphs):
    ds = small_glyphs.subset(small_glyphs.ids[:10])
    noisy = inject_label_noise(ds, 0.3, 4)
    flipped = [s for s in noisy.samples if s.label != s.true_label]
    fix = flipped[0]
    p = CleansePlan(((fix.id, fix.label, fix.true_label),), frozenset(noisy.ids[-3:].tolist()))
    out = apply_plan(noisy, p)
    assert len(out) == 7
    got = out.get(fix.id)
    assert got.label == fix.true_label and got.true_label == fix.true_label
    assert got.provenance == "relabeled"
    for s in out.samples:
        assert s.image.pixels == noisy.get(s.id).image.pixels
    assert relabel_precision(noisy, p) == 1.0


def test_apply_unknown_id(small_glyphs):
    with pytest.raises(ParameterError, match="unknown id"):
        apply_plan(small_glyphs, CleansePlan(drops=frozenset({10_000})))


def test_relabel_precision_without_truth():
    from conftest import make_dataset
    ds = make_dataset([np.zeros((2, 2))] * 2, [0, 1])
    assert relabel_precision(ds, CleansePlan(((0, 0, 1),))) is None
