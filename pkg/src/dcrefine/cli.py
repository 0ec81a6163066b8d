"""Command-line interface: ``dcrefine <command> [--config cfg.json] [--seed N] [--out DIR]``.

Every command derives all randomness from the one seed (``--seed`` overrides
the config's ``seed``) and writes deterministic files, so two invocations
with the same inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__, augment, contrastive, projection, valuation
from . import cleanse as cleanse_mod
from . import pipeline as pl
from .dataset import (SynthSpec, inject_label_noise, inject_pixel_noise, load_pgm_dir,
                      save_pgm_dir, synth_glyphs)
from .errors import DcRefineError, ParameterError
from .nnet import Arch, TrainConfig

log = logging.getLogger("dcrefine")


def _dump(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config) if args.config else pl.PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _out(args) -> Path:
    if args.out is None:
        raise ParameterError("--out is required for this command")
    return Path(args.out)


def _seeded(cfg: pl.PipelineConfig, tag: str) -> int:
    return pl._stage_seed(cfg.seed, tag)


# --- commands ---------------------------------------------------------------------

def cmd_gen(args, cfg):
    out = _out(args)
    if args.benchmark:
        b = pl.synthetic_benchmark(cfg.seed, num_classes=args.classes or 6,
                                   side=args.side or 32, **({"jitter": args.jitter} if args.jitter is not None else {}))
        save_pgm_dir(b.train, out / "train")
        save_pgm_dir(b.val, out / "val")
        save_pgm_dir(b.holdout, out / "holdout")
        _dump(out / "benchmark.json", {"flipped_ids": sorted(b.flipped_ids),
                                       "pixel_noised_ids": sorted(b.pixel_noised_ids)})
        print(f"benchmark: train={len(b.train)} val={len(b.val)} holdout={len(b.holdout)} -> {out}")
        return
    if args.classes is None or args.per_class is None:
        raise ParameterError("gen needs --classes and --per-class (or --benchmark)")
    spec = SynthSpec(args.classes, args.per_class, args.side or 32,
                     0.3 if args.jitter is None else args.jitter, cfg.seed)
    ds = synth_glyphs(spec, role=args.role, first_id=args.first_id)
    save_pgm_dir(ds, out)
    print(f"generated {len(ds)} samples in {len(ds.classes)} classes -> {out}")


def cmd_noise(args, cfg):
    ds = load_pgm_dir(args.data)
    ds = inject_label_noise(ds, args.label_rate, _seeded(cfg, "label_noise"))
    ds = inject_pixel_noise(ds, args.pixel_frac, args.sigma, _seeded(cfg, "pixel_noise"))
    save_pgm_dir(ds, _out(args))
    flipped = sum(1 for s in ds.samples if s.true_label is not None and s.label != s.true_label)
    print(f"{len(ds)} samples, {flipped} labels differ from true_label -> {args.out}")


def cmd_value(args, cfg):
    train, val = load_pgm_dir(args.train), load_pgm_dir(args.val)
    out = _out(args)
    vc = cfg.valuation
    mode = args.mode or vc.mode
    arch = Arch.for_dataset(train, vc.hidden_dim, vc.max_side)
    tcfg = TrainConfig(vc.epochs, min(vc.batch_size, len(train)), vc.learning_rate,
                       _seeded(cfg, "valuation"))
    im, _ = valuation.hydra_influence(train, val, tcfg, mode, arch=arch)
    labels = {s.id: s.label for s in train.samples}
    decision = valuation.min_std_filter(im, vc.require_negative, vc.min_votes, labels)
    valuation.save_influence(im, out / "influence")
    _dump(out / "valuation.json", valuation.influence_report(im, decision, labels, train.classes))
    kept = train.with_samples(s for s in train.samples if s.id not in decision.removed_ids)
    save_pgm_dir(kept, out / "dataset")
    print(f"removed {len(decision.removed_ids)} of {len(train)} samples -> {out}")


def _encoder(args, cfg, ds, tag):
    if getattr(args, "encoder", None):
        return contrastive.load_encoder(args.encoder)
    return contrastive.train_siamese(ds, dataclasses.replace(cfg.siamese, seed=_seeded(cfg, tag)))


def cmd_embed(args, cfg):
    ds = load_pgm_dir(args.data)
    out = _out(args)
    enc = _encoder(args, cfg, ds, "embed")
    contrastive.save_encoder(enc, out / "encoder")
    emb = contrastive.embed(enc, ds)
    with open(out / "embedding.csv", "w", encoding="utf-8", newline="") as f:
        f.write("id,label," + ",".join(f"e{j}" for j in range(emb.rows.shape[1])) + "\n")
        for sid, lab, row in zip(ds.ids, ds.labels, emb.rows):
            f.write(f"{sid},{lab}," + ",".join(repr(float(v)) for v in row) + "\n")
    if args.tsne:
        res = projection.tsne(emb, projection.TsneConfig(seed=_seeded(cfg, "embed_tsne")))
        projection.scatter_svg(res.coords, ds.labels, None, out / "tsne.svg", title="embedding")
        projection.coords_csv(out / "tsne.csv", ds.ids, res.coords, ds.labels)
    print(f"embedded {len(ds)} samples into {enc.embed_dim} dims -> {out}")


def cmd_cleanse(args, cfg):
    ds = load_pgm_dir(args.data)
    out = _out(args)
    enc = _encoder(args, cfg, ds, "cleanse")
    k = min(cfg.cleanse.k, len(ds) - 1)
    ccfg = dataclasses.replace(cfg.cleanse, k=k)
    emb = contrastive.embed(enc, ds)
    if pl.collapsed(emb):
        raise ParameterError("the encoder collapsed to near-constant embeddings; "
                             "retrain with another seed or a smaller learning rate")
    graph = projection.knn(emb, k)
    plan = cleanse_mod.plan(graph, {s.id: s.label for s in ds.samples}, ccfg, with_edges=args.edges)
    _dump(out / "plan.json", plan.to_json())
    save_pgm_dir(cleanse_mod.apply_plan(ds, dataclasses.replace(plan, edge_cases=frozenset())),
                 out / "dataset")
    print(f"relabels={len(plan.relabels)} drops={len(plan.drops)} edge_cases={len(plan.edge_cases)} -> {out}")


def cmd_augment(args, cfg):
    ds = load_pgm_dir(args.data)
    out = _out(args)
    if args.policy:
        policy = augment.Policy.from_json(json.loads(Path(args.policy).read_text(encoding="utf-8")))
    else:
        enc = _encoder(args, cfg, ds, "policy_encoder")
        ac = cfg.augment
        search = augment.policy_search(ds, enc, ac.budget, ac.diversity_floor,
                                       _seeded(cfg, "policy_search"), ac.probe_size, ac.num_sub_policies)
        if search.warning:
            print(f"warning: {search.warning}", file=sys.stderr)
        policy = search.policy
    _dump(out / "policy.json", policy.to_json())
    if args.edges:
        plan = cleanse_mod.CleansePlan.from_json(json.loads(Path(args.edges).read_text(encoding="utf-8")))
        room = (cfg.budget_cap - len(ds)) // len(augment.EDGE_KINDS)
        ds = augment.edge_augment(ds, sorted(plan.edge_cases)[:max(room, 0)], _seeded(cfg, "edge_augment"))
    else:
        ds = augment.balance_classes(ds, policy, cfg.budget_cap, _seeded(cfg, "balance"))
    save_pgm_dir(ds, out / "dataset")
    print(f"{len(ds)} samples after augmentation -> {out}")


def cmd_pipeline(args, cfg):
    out = _out(args)
    holdout = None
    if args.train:
        if not args.val:
            raise ParameterError("--train needs --val (the clean label book)")
        train, val = load_pgm_dir(args.train), load_pgm_dir(args.val)
        if args.holdout:
            holdout = load_pgm_dir(args.holdout)
    else:
        b = pl.synthetic_benchmark(cfg.seed)
        train, val, holdout = b.train, b.val, b.holdout
    ds, report = pl.run(train, val, cfg, out_dir=out, holdout=holdout)
    pl.write_outputs(out, ds, report)
    if args.timings:
        _dump(out / "timings.json", report.timings)
    print(_summary(report.to_dict()))


def _summary(rep: dict) -> str:
    lines = [f"preset: {rep['preset']}"]
    counts = rep["counts"]
    lines.append(f"input: {counts['input']}")
    for stage in rep["stages"]:
        lines.append(f"{stage}: {counts[stage]}")
    lines.append(f"output: {counts['output']}")
    m = rep.get("metrics")
    if m:
        lines.append(f"holdout accuracy: {m['holdout_accuracy']:.4f}")
        r = m.get("recovery")
        if r:
            lines.append(f"flipped recovered: {r['recovered']}/{r['flipped']} (recall {r['recall']:.3f}), "
                         f"false edit rate {r['false_edit_rate']:.3f}")
    lines.extend(f"note: {n}" for n in rep.get("notes", []))
    return "\n".join(lines)


def cmd_report(args, cfg):
    if args.run:
        path = Path(args.run) / "report.json"
        if not path.is_file():
            raise FileNotFoundError(f"no report.json in {args.run}")
        print(_summary(json.loads(path.read_text(encoding="utf-8"))))
        return
    if not (args.data and args.holdout):
        raise ParameterError("report needs --run DIR or --data DIR --holdout DIR")
    ds, holdout = load_pgm_dir(args.data), load_pgm_dir(args.holdout)
    source = load_pgm_dir(args.source) if args.source else None
    metrics = pl.evaluate(ds, holdout, cfg, source=source)
    if args.out:
        _dump(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="PipelineConfig JSON file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="dcrefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", parents=[common], help="render synthetic glyph datasets")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--role", choices=("train", "validation"), default="train")
    p.add_argument("--first-id", type=int, default=0)
    p.add_argument("--benchmark", action="store_true",
                   help="write the noisy benchmark: train/, val/, holdout/ and benchmark.json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("noise", parents=[common], help="inject label and pixel noise")
    p.add_argument("--data", required=True)
    p.add_argument("--label-rate", type=float, default=0.15)
    p.add_argument("--pixel-frac", type=float, default=0.10)
    p.add_argument("--sigma", type=float, default=0.3)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("value", parents=[common], help="hypergradient valuation and min+std filter")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--mode", choices=("fast", "exact"))
    p.set_defaults(func=cmd_value)

    p = sub.add_parser("embed", parents=[common], help="train a Siamese encoder and embed a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", help="reuse a saved encoder instead of training one")
    p.add_argument("--tsne", action="store_true", help="also write a t-SNE scatter plot")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cleanse", parents=[common], help="one relabel/drop pass on a k-NN graph")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder")
    p.add_argument("--edges", action="store_true", help="also flag edge cases in plan.json")
    p.set_defaults(func=cmd_cleanse)

    p = sub.add_parser("augment", parents=[common], help="policy search and class balancing")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder")
    p.add_argument("--policy", help="policy JSON to apply instead of searching")
    p.add_argument("--edges", help="plan.json whose edge cases get targeted copies instead of balancing")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pipeline", parents=[common], help="run a preset end to end")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--holdout")
    p.add_argument("--timings", action="store_true", help="also write wall-clock timings.json")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", parents=[common], help="summarize a run or evaluate a dataset")
    p.add_argument("--run", help="pipeline output directory")
    p.add_argument("--data")
    p.add_argument("--holdout")
    p.add_argument("--source", help="the noisy input, for recovery metrics")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (DcRefineError, OSError, ValueError) as e:
        print(f"dcrefine {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
