"""Seeded end-to-end measurements whose results are frozen in ``data/frozen.json``.

``python3 tests/oracle_runs.py`` recomputes every measurement and rewrites the
file; the tests recompute them and check both the acceptance threshold and
agreement with the committed numbers.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import SoftmaxRegression, blob_images, make_dataset  # noqa: E402

FROZEN = Path(__file__).parent / "data" / "frozen.json"

BENCH_SEED = 0
BENCH_PRESETS = ("baseline", "hydra", "hydra_random", "hydra_faa", "full")


def load_frozen() -> dict:
    return json.loads(FROZEN.read_text())


def blob_mislabel_run(mode: str = "fast") -> dict:
    """Influence filter on seeded 2-class blobs (N=120, 10% flips), convex model."""
    from dcrefine.dataset import inject_label_noise
    from dcrefine.nnet import TrainConfig
    from dcrefine.valuation import (InfluenceMatrix, hypergradients, influence_from_hypergradients,
                                    min_std_filter)

    arrays, labels = blob_images(60, side=4, seed=0, spread=60.0)
    noisy = inject_label_noise(make_dataset(arrays, labels, truth=True), 0.1, 1)
    va, vl = blob_images(10, side=4, seed=50, spread=60.0)
    val = make_dataset(va, vl, role="validation", first_id=1000)
    obj = SoftmaxRegression(noisy.features(), noisy.labels, 2)
    theta, p, _ = hypergradients(obj, np.zeros(obj.num_params()), TrainConfig(30, 16, 0.5, 0), mode)
    vobj = SoftmaxRegression(val.features(), val.labels, 2)
    vg = vobj.sample_grads(theta, np.arange(vobj.n))
    im = InfluenceMatrix(influence_from_hypergradients(p, vg, obj.n), noisy.ids, val.ids, mode)
    removed = min_std_filter(im).removed_ids
    flipped = {s.id for s in noisy.samples if s.label != s.true_label}
    hits = len(removed & flipped)
    return {"flipped": len(flipped), "removed": len(removed), "hits": hits,
            "precision": hits / len(removed) if removed else 0.0}


def loo_fixtures() -> dict:
    """Leave-one-out deltas: a duplicated 1-pixel point, and a mislabeled blob."""
    from dcrefine.nnet import Arch, TrainConfig
    from dcrefine.valuation import loo_delta

    rng = np.random.default_rng(0)
    v0 = np.clip(rng.normal(90, 40, 50), 0, 255)
    v1 = np.clip(rng.normal(160, 40, 50), 0, 255)
    arrays = [np.array([[v]]) for v in np.concatenate([v0, v1])]
    labels = [0] * 50 + [1] * 50
    arrays.append(arrays[3].copy())
    labels.append(0)
    ds = make_dataset(arrays, labels)
    vv = np.concatenate([np.clip(rng.normal(90, 40, 20), 0, 255), np.clip(rng.normal(160, 40, 20), 0, 255)])
    val = make_dataset([np.array([[v]]) for v in vv], [0] * 20 + [1] * 20, role="validation", first_id=1000)
    cfg = TrainConfig(500, len(ds), 0.5, 0)
    dup_last = loo_delta(ds, val, cfg, len(ds) - 1, arch=Arch(1, 4, 2))
    dup_first = loo_delta(ds, val, cfg, 3, arch=Arch(1, 4, 2))

    a, lab = blob_images(20, side=4, seed=0, spread=30.0)
    lab = list(lab)
    lab[0] = 1
    blobs = make_dataset(a, lab)
    va, vl = blob_images(10, side=4, seed=9, spread=30.0)
    bval = make_dataset(va, vl, role="validation", first_id=1000)
    mislabeled = loo_delta(blobs, bval, TrainConfig(50, 8, 0.1, 0), 0, arch=Arch(16, 8, 2))
    return {"duplicate": dup_last, "duplicate_twin": dup_first, "mislabeled": mislabeled}


def benchmark_runs(presets=BENCH_PRESETS, seed: int = BENCH_SEED) -> dict:
    """Every preset on the seeded synthetic benchmark, with holdout metrics."""
    from dcrefine.pipeline import PipelineConfig, evaluate, run, synthetic_benchmark

    b = synthetic_benchmark(seed)
    out = {}
    for preset in presets:
        cfg = PipelineConfig(seed=seed, preset=preset)
        t0 = time.perf_counter()
        ds, report = run(b.train, b.val, cfg)
        runtime = time.perf_counter() - t0
        m = evaluate(ds, b.holdout, cfg, source=b.train, perturbed_ids=b.pixel_noised_ids)
        out[preset] = {"holdout_accuracy": m["holdout_accuracy"], "size": len(ds),
                       "recovery": m["recovery"], "runtime": runtime,
                       "counts": report.counts, "stages": report.stages}
    return out


def main():
    t0 = time.perf_counter()
    frozen = {
        "blob_mislabel": blob_mislabel_run("fast"),
        "loo": loo_fixtures(),
        "benchmark": {p: {k: v for k, v in r.items() if k != "runtime"}
                      for p, r in benchmark_runs().items()},
    }
    FROZEN.parent.mkdir(exist_ok=True)
    FROZEN.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    print(f"wrote {FROZEN} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
