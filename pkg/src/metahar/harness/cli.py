"""Command line entry point.

Every subcommand takes ``--config FILE`` and repeated ``--set key=value``
overrides, writes into a run directory (``--out``), and appends one JSON line per
event to ``events.jsonl`` there. Failures print a JSON error record to stderr and
exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .. import nn
from ..data import load_dataset, random_user_specs, synth_samples, write_canonical, write_manifest
from ..data.partition import apply_manifest
from ..data.loaders import load_canonical
from ..federation import LocalConfig, Scheme
from ..model import EMBED_PREFIX
from ..personalize import finetune_full, global_model, personalize
from ..training import derive_rng
from .config import ExperimentConfig, dump_config, load_config, parse_overrides
from .demo import demo_heterogeneity
from .experiment import (ExperimentError, ExperimentReport, _finetune, _score_models, build_split, federate,
                         load_users, prepare_seed, run_experiment, variant_name)

log = logging.getLogger("metahar")


class RunDir:
    """Append-only run directory: files are never overwritten, events are appended."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def event(self, kind: str, **fields) -> None:
        with open(self.path / "events.jsonl", "a") as fh:
            fh.write(json.dumps({"event": kind, **fields}, sort_keys=True, default=_plain) + "\n")

    def fresh(self, name: str) -> Path:
        """``name`` if unused, else ``stem-1.ext``, ``stem-2.ext``, ..."""
        p = self.path / name
        n = 0
        while p.exists():
            n += 1
            p = self.path / f"{Path(name).stem}-{n}{Path(name).suffix}"
        return p


def _plain(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj))


def _config(args) -> ExperimentConfig:
    return load_config(args.config, parse_overrides(args.set or []))


def _split_for(cfg: ExperimentConfig, seed: int, split_dir: Optional[str]):
    if split_dir is None:
        return build_split(cfg, seed)
    d = Path(split_dir)
    return apply_manifest(load_canonical(d / "samples.jsonl", length_gate=None), d / "manifest.json")


# ------------------------------------------------------------------ commands

def cmd_preprocess(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Convert a raw dataset (or the configured synthetic population) to canonical JSONL."""
    if cfg.format == "synthetic":
        specs = random_user_specs(cfg.synth_users, derive_rng(args.seed, "styles"), cfg.synth_heterogeneity,
                                  cfg.synth_noise, cadence_spread=cfg.synth_cadence_spread,
                                  tone_amp=cfg.synth_tone_amp)
        samples = synth_samples(specs, cfg.synth_per_class, derive_rng(args.seed, "data"),
                                n_classes=cfg.synth_classes)
    else:
        samples = load_dataset(cfg.dataset, cfg.format)
    out = run.fresh("samples.jsonl")
    n = write_canonical(samples, out)
    return {"samples": n, "users": len({s.user_id for s in samples}), "path": str(out)}


def cmd_partition(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Write the sample pool and a meta-train/meta-test manifest for one seed."""
    users, _ = load_users(cfg, args.seed)
    by_id = {i: s for u in users for i, s in zip(u.train_ids + u.test_ids, u.train + u.test)}
    pool = [by_id[i] for i in range(len(by_id))]
    split = build_split(cfg, args.seed)
    out = run.path / f"split-seed{args.seed}"
    out.mkdir(exist_ok=False)
    write_canonical(pool, out / "samples.jsonl")
    write_manifest(split, out / "manifest.json", seed=args.seed)
    return {"path": str(out), "meta_train": [u.user_id for u in split.meta_train],
            "meta_test": [u.user_id for u in split.meta_test], "vocabulary": list(split.vocabulary)}


def cmd_train(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Federated (or pooled) meta-training of one scheme; saves the central parameters."""
    scheme = Scheme(args.scheme or cfg.schemes[0])
    ctx = prepare_seed(cfg, args.seed, _split_for(cfg, args.seed, args.split))

    def on_round(rec):
        run.event("round", seed=args.seed, **rec.as_dict())

    def checkpoint(r, params):
        nn.save(params, run.fresh(f"{scheme.value}-seed{args.seed}-round{r}.npz"))

    params, clients, hist = federate(cfg, ctx, scheme, on_round=on_round, checkpoint=checkpoint)
    out = run.fresh(f"{scheme.value}-seed{args.seed}.npz")
    nn.save(params, out)
    heads = {c.user_id: c.head for c in clients if c.head is not None}
    for uid, head in heads.items():
        nn.save(head, run.fresh(f"{scheme.value}-seed{args.seed}-head-{uid}.npz"))
    return {"scheme": scheme.value, "rounds": len(hist), "params": str(out)}


def cmd_personalize(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Adapt saved central parameters to every user and score them per split."""
    scheme = Scheme(args.scheme or cfg.schemes[0])
    ctx = prepare_seed(cfg, args.seed, _split_for(cfg, args.seed, args.split))
    params = nn.load(args.params)
    report = ExperimentReport(config=cfg.as_dict(), seeds=[args.seed])
    vocab = ctx.split.vocabulary
    theta = params.select(EMBED_PREFIX)
    heads = {}
    if scheme is Scheme.META_HAR_CE:
        stem = Path(args.params).with_suffix("")
        heads = {d.user_id: nn.load(p) for d in ctx.all_users
                 if (p := Path(f"{stem}-head-{d.user_id}.npz")).exists()}
    strategies = {Scheme.META_HAR: cfg.finetune_strategies, Scheme.META_HAR_CE: ["merged"]}.get(scheme, [None])
    for ep in cfg.finetune_epochs:
        ft = _finetune(cfg, ep)
        for strategy in strategies:
            rng = lambda d: derive_rng(args.seed, "ft", d.user_id)
            if strategy is not None:
                models = {d.user_id: personalize(strategy, d, theta, ctx.hyper, ft, rng(d), heads.get(d.user_id))
                          for d in ctx.all_users}
                name = variant_name(scheme.value, strategy, ep)
            elif scheme is Scheme.FEDREPTILE:
                models = {d.user_id: finetune_full(d, params, ctx.hyper, vocab, ft, rng(d)) for d in ctx.all_users}
                name = variant_name(scheme.value, None, ep)
            else:
                model = global_model(params, ctx.hyper, vocab)
                models = {d.user_id: model for d in ctx.all_users}
                name = scheme.value
            report.add(name, args.seed, _score_models(models, ctx.data, ctx.split_of, name, args.seed, report))
    out = run.fresh("personalize.json")
    out.write_text(report.to_json())
    return {"report": str(out), "summary": report.summary()}


def cmd_evaluate(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Full protocol over all seeds and schemes; writes the report."""
    out = run.fresh("report.json")
    try:
        report = run_experiment(cfg)
    except ExperimentError as exc:
        if exc.partial is not None:
            run.fresh("report-partial.json").write_text(exc.partial.to_json())
        raise
    out.write_text(report.to_json())
    with open(run.fresh("rounds.jsonl"), "w") as fh:
        for rec in report.rounds:
            fh.write(json.dumps(rec, sort_keys=True, default=_plain) + "\n")
    return {"report": str(out), "summary": report.summary()}


def cmd_demo(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """PCA scatter data and Central / FedAvg-User / FedAvg-Shuffle traces as CSV."""
    users, _ = load_users(cfg, args.seed)
    hyper = cfg.hyper(tuple(t.n_axes for t in users[0].train[0].sensors))
    demo = demo_heterogeneity(users, hyper, cfg.rounds, cfg.central_epochs,
                              LocalConfig(cfg.local_epochs, cfg.batch, cfg.lr, cfg.slope, cfg.reset_optimizer),
                              cfg.subset_size, args.seed)
    out = run.fresh("demo")
    demo.write_csv(out)
    return {"path": str(out), "user_silhouette": demo.user_silhouette(),
            "final": {s: demo.final(s) for s in ("central", "fedavg_user", "fedavg_shuffle")}}


def cmd_report(args, cfg: ExperimentConfig, run: RunDir) -> Dict[str, Any]:
    """Print mean ± std per variant and split from one or more report files; also write a CSV."""
    rows = []
    for path in args.reports:
        doc = json.loads(Path(path).read_text())
        for variant, splits in sorted(doc["summary"].items()):
            for split, st in sorted(splits.items()):
                rows.append({"report": str(path), "variant": variant, "split": split, **st})
    out = run.fresh("summary.csv")
    with open(out, "w") as fh:
        fh.write("report,variant,split,mean,std,min,max,n\n")
        for r in rows:
            fh.write(f"{r['report']},{r['variant']},{r['split']},{r['mean']:.6f},{r['std']:.6f},"
                     f"{r['min']:.6f},{r['max']:.6f},{r['n']}\n")
    for r in rows:
        print(f"{r['variant']:<28} {r['split']:<10} {100 * r['mean']:6.2f} ± {100 * r['std']:5.2f}  (n={r['n']})")
    return {"csv": str(out), "rows": len(rows)}


COMMANDS = {
    "preprocess": cmd_preprocess,
    "partition": cmd_partition,
    "train": cmd_train,
    "personalize": cmd_personalize,
    "evaluate": cmd_evaluate,
    "demo-heterogeneity": cmd_demo,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metahar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="YAML file of flat config keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default="runs/default", help="run directory (append-only)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("preprocess", "partition", "train", "personalize", "demo-heterogeneity"):
            p.add_argument("--seed", type=int, default=0)
        if name in ("train", "personalize"):
            p.add_argument("--scheme", choices=[s.value for s in Scheme])
            p.add_argument("--split", help="directory written by `partition` (default: rebuild from config)")
        if name == "personalize":
            p.add_argument("--params", required=True, help=".npz written by `train`")
        if name == "report":
            p.add_argument("reports", nargs="+", help="report.json files")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = _config(args)
        run = RunDir(Path(args.out))
        dump_config(cfg, run.fresh("config.yaml"))
        run.event("start", command=args.command, config=cfg.as_dict())
        result = COMMANDS[args.command](args, cfg, run)
        run.event("done", command=args.command, result=result)
        print(json.dumps(result, indent=2, sort_keys=True, default=_plain))
        return 0
    except Exception as exc:
        record = {"event": "error", "command": args.command, "type": type(exc).__name__, "message": str(exc)}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        if run is not None:
            run.event("error", **{k: v for k, v in record.items() if k != "event"})
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
