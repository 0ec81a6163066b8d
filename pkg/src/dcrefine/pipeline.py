"""End-to-end refinement: valuation filter, policy augmentation, iterated
contrastive cleansing, edge-case augmentation and a final cleanse, with
ablation presets that switch stages on and off."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, cleanse, contrastive, nnet, projection, valuation
from .cleanse import CleanseConfig, CleansePlan
from .contrastive import SiameseConfig
from .dataset import (Dataset, SynthSpec, class_histogram, inject_label_noise,
                      inject_pixel_noise, synth_glyphs)
from .errors import ParameterError, StageError
from .nnet import Arch, TrainConfig
from .projection import Embedding, TsneConfig

log = logging.getLogger(__name__)

PRESETS = ("baseline", "hydra", "hydra_random", "hydra_faa", "hydra_faa_inv", "full")


@dataclass(frozen=True)
class ValuationConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 0.1
    hidden_dim: int = 32
    max_side: int = 16
    mode: str = "fast"
    require_negative: bool = True
    min_votes: int = 1


@dataclass(frozen=True)
class AugmentConfig:
    budget: int = 16
    diversity_floor: float = 0.02
    probe_size: int = 128
    num_sub_policies: int = 5


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 600
    batch_size: int = 32
    learning_rate: float = 0.05
    hidden_dim: int = 64
    max_side: int = 16
    seed: int = 0
    # holdout accuracy is averaged over this many classifier seeds
    repeats: int = 3


@dataclass(frozen=True)
class DiagConfig:
    enabled: bool = True
    max_points: int = 400
    tsne_iters: int = 500


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    budget_cap: int = 10000
    cleanse_iters: int = 2
    preset: str = "full"
    valuation: ValuationConfig = field(default_factory=ValuationConfig)
    siamese: SiameseConfig = field(default_factory=SiameseConfig)
    cleanse: CleanseConfig = field(default_factory=CleanseConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    diagnostics: DiagConfig = field(default_factory=DiagConfig)

    def validate(self):
        if self.budget_cap < 1:
            raise ParameterError("budget_cap must be >= 1")
        if self.cleanse_iters < 1:
            raise ParameterError("cleanse_iters must be >= 1")
        if self.preset not in PRESETS:
            raise ParameterError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        self.cleanse.validate()
        self.siamese.validate()

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        return _build(cls, data, "config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ParameterError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ParameterError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ParameterError(f"{path}: invalid JSON ({e})") from None
    return PipelineConfig.from_dict(data)


@dataclass
class RunReport:
    preset: str
    stages: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    valuation: dict | None = None
    policy: list | None = None
    policy_search: dict | None = None
    cleanse: list = field(default_factory=list)
    edge: dict | None = None
    notes: list = field(default_factory=list)
    metrics: dict | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, with_timings: bool = False) -> dict:
        out = dataclasses.asdict(self)
        if not with_timings:
            out.pop("timings")
        return out


# --- helpers --------------------------------------------------------------------

def _stage_seed(seed: int, stage: str) -> int:
    # deterministic, platform-independent mixing of the run seed with a stage tag
    h = 1469598103934665603
    for ch in f"{seed}:{stage}".encode():
        h = ((h ^ ch) * 1099511628211) % 2 ** 64
    return h % 2 ** 31


def _propagate(ds: Dataset, plan: CleansePlan) -> CleansePlan:
    """Extend drops and relabels of a sample to augmented copies derived from it."""
    by_id = {s.id: s for s in ds.samples}
    new_label = {i: n for i, _, n in plan.relabels}
    drops = set(plan.drops)
    relabels = list(plan.relabels)
    decided = set(new_label) | drops
    for s in ds.samples:
        if s.id in decided or s.parent_id is None:
            continue
        anc = s.parent_id
        while anc is not None:
            if anc in drops:
                drops.add(s.id)
                break
            if anc in new_label:
                if new_label[anc] != s.label:
                    relabels.append((s.id, s.label, new_label[anc]))
                break
            anc = by_id[anc].parent_id if anc in by_id else None
    edges = frozenset(plan.edge_cases - drops - {i for i, _, _ in relabels})
    stats = dict(plan.stats, propagated=len(drops) - len(plan.drops) + len(relabels) - len(plan.relabels))
    return CleansePlan(tuple(relabels), frozenset(drops), edges, stats)


def _check_budget(ds: Dataset, cap: int, stage: str):
    if len(ds) > cap:
        raise StageError(stage, f"dataset has {len(ds)} samples, above budget_cap {cap}")


def _siamese_cfg(cfg: PipelineConfig, stage: str) -> SiameseConfig:
    return dataclasses.replace(cfg.siamese, seed=_stage_seed(cfg.seed, stage))


def _diag_svg(out_dir, name, emb: Embedding, ds: Dataset, plan: CleansePlan | None,
              cfg: PipelineConfig):
    if out_dir is None or not cfg.diagnostics.enabled or len(ds) < 5:
        return
    rng = np.random.default_rng(_stage_seed(cfg.seed, "diag:" + name))
    n = len(ds)
    rows = np.arange(n) if n <= cfg.diagnostics.max_points else \
        np.sort(rng.choice(n, cfg.diagnostics.max_points, replace=False))
    x = emb.rows[rows]
    labels = ds.labels[rows]
    ids = ds.ids[rows]
    try:
        res = projection.tsne(x, TsneConfig(iters=cfg.diagnostics.tsne_iters,
                                            seed=_stage_seed(cfg.seed, "tsne:" + name)))
    except ParameterError as e:
        log.warning("skipping diagnostic %s: %s", name, e)
        return
    marks = {}
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        centroid = x[members].mean(0)
        marks[int(members[np.argmin(((x[members] - centroid) ** 2).sum(1))])] = "star"
    if plan is not None:
        relabeled = {i for i, _, _ in plan.relabels}
        for r, sid in enumerate(ids):
            if sid in plan.drops:
                marks[r] = "cross"
            elif sid in relabeled:
                marks[r] = "ring"
    diag = Path(out_dir) / "diag"
    diag.mkdir(parents=True, exist_ok=True)
    projection.scatter_svg(res.coords, labels, marks, diag / f"{name}.svg", title=name)
    projection.coords_csv(diag / f"{name}.csv", ids, res.coords, labels, marks)


def collapsed(emb: Embedding) -> bool:
    """True when most samples share an embedding row with another sample.

    A collapsed encoder (dead hidden units) maps many images to one point;
    neighbor lists then only reflect id tie-breaking and must not drive edits.
    """
    return len(np.unique(emb.rows, axis=0)) < max(2, len(emb) // 2)


def _cleanse_pass(ds: Dataset, cfg: PipelineConfig, stage: str, out_dir, with_edges=False):
    enc = contrastive.train_siamese(ds, _siamese_cfg(cfg, stage))
    emb = contrastive.embed(enc, ds)
    if collapsed(emb):
        log.warning("%s: encoder collapsed, pass skipped", stage)
        info = dict(CleansePlan().to_json(), stage=stage, relabel_precision=None,
                    skipped="encoder collapsed to near-constant embeddings")
        return ds, info, enc
    k = min(cfg.cleanse.k, len(ds) - 1)
    ccfg = dataclasses.replace(cfg.cleanse, k=k)
    graph = projection.knn(emb, k)
    labels = {s.id: s.label for s in ds.samples}
    p = _propagate(ds, cleanse.plan(graph, labels, ccfg, with_edges=with_edges))
    _diag_svg(out_dir, stage, emb, ds, p, cfg)
    info = p.to_json()
    info["stage"] = stage
    info["relabel_precision"] = cleanse.relabel_precision(ds, p)
    return cleanse.apply_plan(ds, dataclasses.replace(p, edge_cases=frozenset())), info, enc


# --- run ------------------------------------------------------------------------

def run(train: Dataset, val: Dataset, cfg: PipelineConfig, out_dir=None,
        holdout: Dataset | None = None) -> tuple[Dataset, RunReport]:
    """Run the preset's stages on ``train`` using ``val`` as the clean label book.

    With ``holdout`` given, the report also carries :func:`evaluate` metrics.
    ``out_dir`` receives per-cleanse-pass t-SNE scatter plots under ``diag/``.
    """
    cfg.validate()
    if train.role != "train":
        raise ParameterError("the first dataset must be a train split")
    report = RunReport(cfg.preset)
    report.counts["input"] = len(train)
    report.histograms["input"] = class_histogram(train)
    cap = cfg.budget_cap
    _check_budget(train, cap, "input")
    ds = train
    preset = cfg.preset

    def mark(stage, t0):
        report.stages.append(stage)
        report.counts[stage] = len(ds)
        report.histograms[stage] = class_histogram(ds)
        report.timings[stage] = round(time.perf_counter() - t0, 3)
        _check_budget(ds, cap, stage)
        log.info("%s: %d samples", stage, len(ds))

    if preset == "baseline":
        return ds, _finish(ds, train, holdout, cfg, report)

    # (1) valuation filter
    t0 = time.perf_counter()
    try:
        vc = cfg.valuation
        arch = Arch.for_dataset(ds, vc.hidden_dim, vc.max_side)
        tcfg = TrainConfig(vc.epochs, min(vc.batch_size, len(ds)), vc.learning_rate,
                           _stage_seed(cfg.seed, "valuation"))
        im, _ = valuation.hydra_influence(ds, val, tcfg, vc.mode, arch=arch)
        labels = {s.id: s.label for s in ds.samples}
        decision = valuation.min_std_filter(im, vc.require_negative, vc.min_votes, labels)
        report.valuation = valuation.influence_report(im, decision, labels, ds.classes, top_k=10)
        ds = ds.with_samples(s for s in ds.samples if s.id not in decision.removed_ids)
    except (ParameterError, ValueError, ArithmeticError) as e:
        raise StageError("valuation", str(e)) from e
    mark("valuation", t0)

    # (2) augmentation with class balancing
    if preset in ("hydra_random", "hydra_faa", "hydra_faa_inv", "full"):
        t0 = time.perf_counter()
        stage = "random_augment" if preset == "hydra_random" else "policy_augment"
        try:
            if preset == "hydra_random":
                policy = augment.random_policy(np.random.default_rng(_stage_seed(cfg.seed, stage)),
                                               augment.SEARCH_KINDS, cfg.augment.num_sub_policies)
            else:
                enc = contrastive.train_siamese(ds, _siamese_cfg(cfg, "policy_encoder"))
                search = augment.policy_search(
                    ds, enc, cfg.augment.budget, cfg.augment.diversity_floor,
                    _stage_seed(cfg.seed, "policy_search"), cfg.augment.probe_size,
                    cfg.augment.num_sub_policies)
                policy = search.policy
                report.policy_search = {
                    "chosen": search.chosen,
                    "warning": search.warning,
                    "candidates": [{"perturbation": c.perturbation, "distance": c.distance}
                                   for c in search.candidates],
                }
                if search.warning:
                    report.notes.append(search.warning)
            report.policy = policy.to_json()
            target, binds = augment.balance_targets(class_histogram(ds), cap)
            if binds:
                report.notes.append(f"budget cap {cap} stops class balancing short of target {target}")
            ds = augment.balance_classes(ds, policy, cap, _stage_seed(cfg.seed, "balance"))
        except (ParameterError, ValueError) as e:
            raise StageError(stage, str(e)) from e
        mark(stage, t0)

    if preset == "hydra_faa_inv":
        t0 = time.perf_counter()
        before = len(ds)
        ds = augment.invert_copies(ds, cap)
        if len(ds) - before < before:
            report.notes.append(f"budget cap allowed inverted copies of only {len(ds) - before} of {before} samples")
        report.notes.append("inverted copies are added for every sample (blanket inversion)")
        mark("invert_augment", t0)

    if preset == "full":
        # (3) iterated contrastive cleansing
        for it in range(1, cfg.cleanse_iters + 1):
            t0 = time.perf_counter()
            stage = f"cleanse_{it}"
            try:
                ds, info, _ = _cleanse_pass(ds, cfg, stage, out_dir)
            except (ParameterError, ValueError) as e:
                raise StageError(stage, str(e)) from e
            report.cleanse.append(info)
            if "skipped" in info:
                report.notes.append(f"{stage} skipped: {info['skipped']}")
            mark(stage, t0)

        # (4) edge cases on the retrained classifier's penultimate features
        t0 = time.perf_counter()
        try:
            ec = cfg.eval
            arch = Arch.for_dataset(ds, ec.hidden_dim, ec.max_side)
            params, _ = nnet.train_sgd(
                ds, TrainConfig(cfg.valuation.epochs, min(ec.batch_size, len(ds)), ec.learning_rate,
                                _stage_seed(cfg.seed, "edge_model")), arch=arch)
            emb = nnet.penultimate(params, ds)
            k = min(cfg.cleanse.k, len(ds) - 1)
            ccfg = dataclasses.replace(cfg.cleanse, k=k)
            graph = projection.knn(emb, k)
            labels = {s.id: s.label for s in ds.samples}
            full_plan = cleanse.plan(graph, labels, ccfg, with_edges=True)
            edges = sorted(full_plan.edge_cases)
            room = (cap - len(ds)) // len(augment.EDGE_KINDS)
            if len(edges) > room:
                report.notes.append(f"budget cap limits edge-case augmentation to {room} of {len(edges)} samples")
                edges = edges[:room]
            ds = augment.edge_augment(ds, edges, _stage_seed(cfg.seed, "edge_augment"))
            report.edge = {"edge_cases": edges, "copies": len(edges) * len(augment.EDGE_KINDS)}
        except (ParameterError, ValueError) as e:
            raise StageError("edge_augment", str(e)) from e
        mark("edge_augment", t0)

        # (5) final cleanse
        t0 = time.perf_counter()
        try:
            ds, info, _ = _cleanse_pass(ds, cfg, "final_cleanse", out_dir)
        except (ParameterError, ValueError) as e:
            raise StageError("final_cleanse", str(e)) from e
        report.cleanse.append(info)
        if "skipped" in info:
            report.notes.append(f"final_cleanse skipped: {info['skipped']}")
        mark("final_cleanse", t0)

    return ds, _finish(ds, train, holdout, cfg, report)


def _finish(ds, train, holdout, cfg, report):
    report.counts["output"] = len(ds)
    if holdout is not None:
        t0 = time.perf_counter()
        report.metrics = evaluate(ds, holdout, cfg, source=train)
        report.timings["evaluate"] = round(time.perf_counter() - t0, 3)
    return report


# --- evaluation -----------------------------------------------------------------

def recovery_metrics(source: Dataset, output: Dataset, perturbed_ids=()) -> dict | None:
    """How the pipeline's edits on ``source`` samples line up with the injected noise.

    A flipped sample (label != true_label) counts as recovered when it was
    dropped or relabeled to its true class. Clean samples exclude
    ``perturbed_ids`` (e.g. pixel-noised ones); a clean sample that was
    dropped or relabeled is a false edit.
    """
    if any(s.true_label is None for s in source.samples):
        return None
    out = {s.id: s for s in output.samples}
    perturbed = set(int(i) for i in perturbed_ids)
    flipped = [s for s in source.samples if s.label != s.true_label]
    clean = [s for s in source.samples if s.label == s.true_label and s.id not in perturbed]
    edited = [s for s in source.samples if s.id not in out or out[s.id].label != s.label]
    recovered = [s for s in flipped if s.id not in out or out[s.id].label == s.true_label]
    false_edits = [s for s in clean if s.id not in out or out[s.id].label != s.label]
    edits_on_flipped = [s for s in edited if s.label != s.true_label]
    return {
        "flipped": len(flipped),
        "recovered": len(recovered),
        "recall": len(recovered) / len(flipped) if flipped else 1.0,
        "edits": len(edited),
        "precision": len(edits_on_flipped) / len(edited) if edited else 1.0,
        "dropped": sum(1 for s in source.samples if s.id not in out),
        "relabeled": sum(1 for s in source.samples if s.id in out and out[s.id].label != s.label),
        "clean": len(clean),
        "false_edits": len(false_edits),
        "false_edit_rate": len(false_edits) / len(clean) if clean else 0.0,
    }


def evaluate(ds_out: Dataset, holdout: Dataset, cfg: PipelineConfig | EvalConfig = EvalConfig(),
             source: Dataset | None = None, perturbed_ids=()) -> dict:
    ec = cfg.eval if isinstance(cfg, PipelineConfig) else cfg
    overlap = set(ds_out.ids.tolist()) & set(holdout.ids.tolist())
    if overlap:
        raise ParameterError(f"holdout shares {len(overlap)} ids with the evaluated dataset")
    if ec.repeats < 1:
        raise ParameterError("eval repeats must be >= 1")
    arch = Arch.for_dataset(ds_out, ec.hidden_dim, ec.max_side)
    train_acc, holdout_acc = [], []
    for r in range(ec.repeats):
        tcfg = TrainConfig(ec.epochs, min(ec.batch_size, len(ds_out)), ec.learning_rate, ec.seed + r)
        params, _ = nnet.train_sgd(ds_out, tcfg, arch=arch)
        train_acc.append(nnet.accuracy(params, ds_out))
        holdout_acc.append(nnet.accuracy(params, holdout))
    metrics = {
        "train_size": len(ds_out),
        "train_accuracy": float(np.mean(train_acc)),
        "holdout_accuracy": float(np.mean(holdout_acc)),
        "holdout_accuracy_per_seed": holdout_acc,
    }
    if source is not None:
        rec = recovery_metrics(source, ds_out, perturbed_ids)
        if rec is not None:
            metrics["recovery"] = rec
    return metrics


# --- synthetic benchmark ------------------------------------------------------------

@dataclass(frozen=True)
class Benchmark:
    train: Dataset
    val: Dataset
    holdout: Dataset
    flipped_ids: frozenset
    pixel_noised_ids: frozenset


def imbalanced_counts(num_classes: int, total: int) -> list[int]:
    """Linearly decaying class sizes summing to ``total``."""
    weights = np.linspace(1.6, 0.5, num_classes)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[:total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def synthetic_benchmark(seed: int = 0, num_classes: int = 6, train_size: int = 600,
                        label_noise: float = 0.15, pixel_frac: float = 0.10,
                        pixel_sigma: float = 0.3, side: int = 32, jitter: float = 0.6,
                        val_per_class: int = 8, holdout_per_class: int = 100) -> Benchmark:
    """Imbalanced noisy glyph train split, a small clean label book and a clean holdout."""
    counts = imbalanced_counts(num_classes, train_size)
    pool = synth_glyphs(SynthSpec(num_classes, max(counts), side, jitter, seed))
    keep = []
    for c, n in enumerate(counts):
        keep.extend(pool.ids[pool.labels == c][:n].tolist())
    clean = pool.subset(keep)
    noisy = inject_label_noise(clean, label_noise, seed + 1)
    noisy = inject_pixel_noise(noisy, pixel_frac, pixel_sigma, seed + 2)
    flipped = frozenset(s.id for s in noisy.samples if s.label != s.true_label)
    before = {s.id: s.image.pixels for s in clean.samples}
    pixel = frozenset(s.id for s in noisy.samples if s.image.pixels != before[s.id])
    base = 10 ** (len(str(train_size)) + 1)
    val = synth_glyphs(SynthSpec(num_classes, val_per_class, side, jitter, seed + 100),
                       role="validation", first_id=base)
    holdout = synth_glyphs(SynthSpec(num_classes, holdout_per_class, side, jitter, seed + 200),
                           role="validation", first_id=10 * base)
    return Benchmark(noisy, val, holdout, flipped, pixel)


def write_outputs(out_dir, ds: Dataset, report: RunReport):
    from .dataset import save_pgm_dir
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm_dir(ds, out / "dataset")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = ["PipelineConfig", "RunReport", "run", "evaluate", "recovery_metrics",
           "synthetic_benchmark", "Benchmark", "PRESETS", "load_config", "write_outputs",
           "ValuationConfig", "AugmentConfig", "EvalConfig", "DiagConfig"]
