import json
import warnings

import numpy as np
import pytest

from dcrefine.errors import ParameterError, StageError
from dcrefine.pipeline import (PRESETS, EvalConfig, PipelineConfig, _propagate, _stage_seed, collapsed,
                               evaluate,
                               imbalanced_counts, load_config, recovery_metrics, run,
                               synthetic_benchmark, write_outputs)
from dcrefine.cleanse import CleansePlan
from dcrefine.dataset import LabeledSample, load_pgm_dir
from dcrefine.projection import Embedding

SMALL = {
    "seed": 3, "budget_cap": 200,
    "valuation": {"epochs": 60},
    "siamese": {"epochs": 5, "pairs_per_epoch": 100, "views_per_sample": 2, "hidden_dim": 16},
    "augment": {"budget": 3, "probe_size": 16},
    "eval": {"epochs": 20, "repeats": 1},
    "diagnostics": {"tsne_iters": 30},
}

STAGES = {
    "baseline": [],
    "hydra": ["valuation"],
    "hydra_random": ["valuation", "random_augment"],
    "hydra_faa": ["valuation", "policy_augment"],
    "hydra_faa_inv": ["valuation", "policy_augment", "invert_augment"],
    "full": ["valuation", "policy_augment", "cleanse_1", "cleanse_2", "edge_augment", "final_cleanse"],
}


def _cfg(**over):
    return PipelineConfig.from_dict({**SMALL, **over})


@pytest.fixture(scope="module")
def bench():
    return synthetic_benchmark(1, num_classes=3, train_size=120, side=16, holdout_per_class=10,
                               val_per_class=4)


@pytest.fixture(scope="module")
def preset_runs(bench):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {p: run(bench.train, bench.val, _cfg(preset=p)) for p in PRESETS}


def _lineage_root(ds_by_id, source, sid):
    while sid not in source:
        sid = ds_by_id[sid].parent_id
        assert sid is not None
    return sid


# --- presets ------------------------------------------------------------------------------------

def test_baseline_is_passthrough(bench, preset_runs):
    ds, report = preset_runs["baseline"]
    assert ds == bench.train
    assert report.stages == [] and report.counts == {"input": 120, "output": 120}


@pytest.mark.parametrize("preset", PRESETS)
def test_preset_stage_lists(preset_runs, preset):
    ds, report = preset_runs[preset]
    assert report.stages == STAGES[preset]
    assert report.counts["output"] == len(ds)
    if report.stages:
        assert report.counts[report.stages[-1]] == len(ds)


@pytest.mark.parametrize("preset", PRESETS)
def test_budget_invariant(preset_runs, preset):
    _, report = preset_runs[preset]
    assert all(n <= SMALL["budget_cap"] for n in report.counts.values())


def test_binding_cap_is_reported(preset_runs):
    _, report = preset_runs["hydra_faa_inv"]
    assert report.counts["invert_augment"] == 200
    assert any("budget cap" in n for n in report.notes)


def test_cap_below_input_fails(bench):
    with pytest.raises(StageError, match="input"):
        run(bench.train, bench.val, _cfg(budget_cap=100, preset="hydra"))


@pytest.mark.parametrize("preset", PRESETS)
def test_provenance_and_lineage(bench, preset_runs, preset):
    ds, _ = preset_runs[preset]
    source = set(bench.train.ids.tolist())
    by_id = {s.id: s for s in ds.samples}
    for s in ds.samples:
        assert s.provenance in ("original", "synthetic", "relabeled", "augmented")
        if s.id not in source:
            # copies may be relabeled by a later cleanse pass
            assert s.provenance in ("augmented", "relabeled") and s.parent_id is not None
            root = _lineage_root(by_id, source, s.id)
            assert root in source


def test_full_run_is_deterministic(bench, preset_runs, tmp_path):
    ds, report = preset_runs["full"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds2, report2 = run(bench.train, bench.val, _cfg(preset="full"))
    assert ds2 == ds
    assert report2.to_dict() == report.to_dict()
    write_outputs(tmp_path / "a", ds, report)
    write_outputs(tmp_path / "b", ds2, report2)
    for name in ("report.json", "dataset/manifest.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_written_outputs_match_report(preset_runs, tmp_path):
    ds, report = preset_runs["full"]
    write_outputs(tmp_path, ds, report)
    data = json.loads((tmp_path / "report.json").read_text())
    assert "timings" not in data
    back = load_pgm_dir(tmp_path / "dataset")
    assert len(back) == data["counts"]["output"] == len(ds)
    assert np.bincount(back.labels, minlength=3).tolist() == list(data["histograms"]["final_cleanse"])


def test_diagnostic_svgs(bench, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, report = run(bench.train, bench.val, _cfg(preset="full"), out_dir=tmp_path)
    ran = [c["stage"] for c in report.cleanse if "skipped" not in c]
    assert ran
    assert sorted(p.stem for p in (tmp_path / "diag").glob("*.svg")) == sorted(ran)
    assert sorted(p.stem for p in (tmp_path / "diag").glob("*.csv")) == sorted(ran)


def test_run_rejects_wrong_role(bench):
    with pytest.raises(ParameterError):
        run(bench.val, bench.val, _cfg(preset="baseline"))


# --- config --------------------------------------------------------------------------------------

def test_config_round_trip_and_validation(tmp_path):
    cfg = _cfg(preset="hydra_faa")
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ParameterError, match="unknown keys"):
        PipelineConfig.from_dict({"seeds": 1})
    with pytest.raises(ParameterError, match="config.siamese"):
        PipelineConfig.from_dict({"siamese": {"margins": 1}})
    for bad in ({"preset": "hydra_plus"}, {"budget_cap": 0}, {"cleanse_iters": 0}):
        with pytest.raises(ParameterError):
            PipelineConfig.from_dict(bad).validate()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    assert load_config(path) == PipelineConfig.from_dict(SMALL)


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.json"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{seed: 1")
    with pytest.raises(ParameterError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


# --- evaluation -----------------------------------------------------------------------------------

def test_recovery_on_perfect_dataset(bench):
    clean = bench.train.with_samples(s for s in bench.train.samples if s.label == s.true_label)
    rec = recovery_metrics(clean, clean)
    assert rec["flipped"] == 0 and rec["edits"] == 0 and rec["recall"] == 1.0
    assert rec["dropped"] == 0 and rec["relabeled"] == 0 and rec["false_edit_rate"] == 0.0


def test_recovery_counts_hand_fixture(bench):
    src = bench.train
    flipped = sorted(bench.flipped_ids)
    clean = [s for s in src.samples if s.id not in bench.flipped_ids and s.id not in bench.pixel_noised_ids]
    fixed = {flipped[0]: src.get(flipped[0]).true_label}
    dropped = {flipped[1], clean[0].id}
    out = []
    for s in src.samples:
        if s.id in dropped:
            continue
        if s.id in fixed:
            s = LabeledSample(s.id, s.image, fixed[s.id], "relabeled", s.true_label)
        out.append(s)
    rec = recovery_metrics(src, src.with_samples(out), bench.pixel_noised_ids)
    assert rec["flipped"] == len(flipped) and rec["recovered"] == 2
    assert rec["edits"] == 3 and rec["precision"] == pytest.approx(2 / 3)
    assert rec["false_edits"] == 1
    assert rec["clean"] == len(src) - len(bench.flipped_ids) - len(bench.pixel_noised_ids - bench.flipped_ids)


def test_evaluate_deterministic_and_disjoint(bench):
    ec = EvalConfig(epochs=5, repeats=2)
    a = evaluate(bench.train, bench.holdout, ec, source=bench.train)
    assert a == evaluate(bench.train, bench.holdout, ec, source=bench.train)
    assert len(a["holdout_accuracy_per_seed"]) == 2
    assert a["recovery"]["edits"] == 0
    with pytest.raises(ParameterError, match="shares"):
        evaluate(bench.train, bench.train, ec)
    with pytest.raises(ParameterError):
        evaluate(bench.train, bench.holdout, EvalConfig(repeats=0))


def test_holdout_metrics_in_report(bench):
    _, report = run(bench.train, bench.val, _cfg(preset="baseline"), holdout=bench.holdout)
    assert 0.0 <= report.metrics["holdout_accuracy"] <= 1.0
    assert report.metrics["recovery"]["flipped"] == len(bench.flipped_ids)


# --- helpers -------------------------------------------------------------------------------------

def test_stage_seed_mixing():
    assert _stage_seed(0, "valuation") == _stage_seed(0, "valuation")
    seeds = {_stage_seed(s, t) for s in range(3) for t in ("valuation", "balance", "cleanse_1")}
    assert len(seeds) == 9
    assert all(0 <= s < 2 ** 31 for s in seeds)


def test_imbalanced_counts():
    counts = imbalanced_counts(6, 600)
    assert sum(counts) == 600 and counts == sorted(counts, reverse=True)
    assert counts[0] > 2 * counts[-1]


def test_benchmark_noise_levels():
    b = synthetic_benchmark(0)
    assert len(b.train) == 600 and b.train.num_classes == 6
    assert len(b.flipped_ids) == 90 and len(b.pixel_noised_ids) == 60
    assert not set(b.train.ids.tolist()) & set(b.holdout.ids.tolist())
    assert not set(b.train.ids.tolist()) & set(b.val.ids.tolist())


def test_propagate_follows_lineage(small_glyphs):
    base = small_glyphs.subset(small_glyphs.ids[:3])
    a, b = base.samples[0], base.samples[1]
    nid = base.next_id()
    child = LabeledSample(nid, a.image, a.label, "augmented", a.true_label, a.id)
    grandchild = LabeledSample(nid + 1, a.image, a.label, "augmented", a.true_label, nid)
    kid_b = LabeledSample(nid + 2, b.image, b.label, "augmented", b.true_label, b.id)
    ds = base.with_samples(base.samples + (child, grandchild, kid_b))
    new = (a.label + 1) % 3
    plan = CleansePlan(((a.id, a.label, new),), frozenset({b.id}), frozenset({nid + 2}))
    out = _propagate(ds, plan)
    assert set(out.relabels) == {(a.id, a.label, new), (nid, a.label, new), (nid + 1, a.label, new)}
    assert out.drops == {b.id, nid + 2}
    assert out.edge_cases == frozenset()
    assert out.stats["propagated"] == 3


def test_collapsed_embedding_detection():
    rng = np.random.default_rng(0)
    assert not collapsed(Embedding(rng.normal(size=(10, 3)), np.arange(10)))
    # a few exact duplicates are normal data
    rows = rng.normal(size=(10, 3))
    rows[1] = rows[0]
    assert not collapsed(Embedding(rows, np.arange(10)))
    dead = np.zeros((10, 3))
    dead[0] = 1.0
    assert collapsed(Embedding(dead, np.arange(10)))
    assert collapsed(Embedding(np.ones((4, 2)), np.arange(4)))


def test_collapsed_encoder_skips_cleansing(bench, monkeypatch):
    import dcrefine.pipeline as pl

    def flat(enc, ds):
        return Embedding(np.zeros((len(ds), 2)), ds.ids)

    monkeypatch.setattr(pl.contrastive, "embed", flat)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds, report = run(bench.train, bench.val, _cfg(preset="full"))
    c = report.counts
    assert c["cleanse_1"] == c["cleanse_2"] == c["policy_augment"]
    assert c["final_cleanse"] == c["edge_augment"] == len(ds)
    assert [i["stage"] for i in report.cleanse if "skipped" in i] == ["cleanse_1", "cleanse_2", "final_cleanse"]
    assert sum("skipped" in n for n in report.notes) == 3
