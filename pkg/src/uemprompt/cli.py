"""Command-line entry point: ``uemprompt <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every ``RunConfig`` field has a flag ``--<section>-<key>`` (underscores
become dashes) that overrides the value from ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import MOVIELENS_VOCAB, DataError, ingest, make_dataset, write_shards
from .embedder import EmbeddingFileError
from .experiment import RunLockedError, write_atomic
from .model import NumericFailure
from .autodiff import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("uemprompt")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    group = p.add_argument_group("config overrides")
    for sec, cls in config_mod.SECTIONS.items():
        for f in dataclasses.fields(cls):
            flag = f"--{sec}-{f.name.replace('_', '-')}"
            group.add_argument(flag, dest=f"cfg__{sec}__{f.name}", metavar=type(f.default).__name__.upper(), default=None)


def _run_config(args) -> RunConfig:
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, sec, name = key.split("__", 2)
            overrides[f"{sec}.{name}"] = value
    if args.config is not None:
        return config_mod.load(args.config, overrides)
    return config_mod.from_dict({}, overrides)


def cmd_synth_data(args) -> int:
    cfg = _run_config(args)
    ds = experiment.load_dataset(cfg.replace(**{"data.source": "synthetic"}))
    write_shards(ds, args.out)
    print(json.dumps({"out": str(args.out), "users": len(ds.users), "movies": len(ds.movies)}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _run_config(args)
    res = ingest(args.ratings, args.movies, args.descriptions)
    ds = make_dataset(res.movies, res.users, MOVIELENS_VOCAB, cfg.data.salt, cfg.fractions, "movielens")
    ds.users = [u for u in ds.users if len(u.items) >= cfg.data.min_views]
    write_shards(ds, args.out)
    print(json.dumps({"out": str(args.out), "users": len(ds.users), **dataclasses.asdict(res.stats)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = experiment.train(cfg, args.out, resume=args.resume)
    summary = {"out": str(res.out_dir), "step": res.step, "final_loss": res.losses[-1] if res.losses else None}
    if res.report is not None:
        summary.update({"dev_precision": res.report.precision, "dev_recall": res.report.recall, "dev_f1": res.report.f1})
    print(json.dumps(summary))
    return EXIT_OK


def _emit_report(rep, args, name: str) -> None:
    line = rep.to_json()
    if args.out is not None:
        write_atomic(Path(args.out), line + "\n")
    if args.table:
        from .metrics import render_table

        print(render_table([(name, rep)]))
    else:
        print(line)


def cmd_evaluate(args) -> int:
    if args.mode == "baseline":
        cfg = experiment.load_run(args.checkpoint)[1] if args.checkpoint else _run_config(args)
        rep = experiment.evaluate_baseline(cfg, args.split)
        _emit_report(rep, args, "Counting baseline")
        return EXIT_OK
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required for embedding/text evaluation")
    rep = experiment.evaluate_model(args.checkpoint, args.split, args.mode)
    label = "Emb. Hist." if rep.meta["mode"] == "embedding" else "Text Hist."
    _emit_report(rep, args, f"{label} {rep.meta['p']}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _run_config(args)
    rep = experiment.evaluate_baseline(cfg, args.split)
    _emit_report(rep, args, "Counting baseline")
    return EXIT_OK


def _parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    if not sep or not values.strip(" ,"):
        raise ConfigError(f"--sweep must look like section.key=v1,v2,...; got {text!r}")
    key = {"p": "data.p", "uem_layers": "uem.layers"}.get(key, key)
    return key, [v.strip() for v in values.split(",") if v.strip()]


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    key, values = _parse_sweep(args.sweep)
    for value in values:  # validate every point before any run starts
        cfg.replace(**{key: value})
    rows = experiment.ablate(cfg, key, values, args.out, args.split)
    print(experiment.ablation_table(rows))
    return EXIT_OK


def cmd_cost_report(args) -> int:
    cfg = _run_config(args)
    rep = experiment.cost_report(cfg, split=args.split)
    text = json.dumps(rep, sort_keys=True, indent=2) + "\n"
    if args.out is not None:
        write_atomic(Path(args.out), text)
    if args.curve is not None:
        write_atomic(Path(args.curve), "".join(f"{n} {f}\n" for n, f in experiment.cost_curve(cfg)))
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uemprompt", description="User-history soft prompts for a text-to-text LM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus and write shards")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", help="join MovieLens-format CSVs and write shards")
    _add_config_flags(p)
    p.add_argument("--ratings", type=Path, required=True)
    p.add_argument("--movies", type=Path, required=True)
    p.add_argument("--descriptions", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="co-train UEM and LM")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train)

    for name, func, needs_ckpt in (("evaluate", cmd_evaluate, True), ("baseline", cmd_baseline, False)):
        p = sub.add_parser(name, help="score a checkpoint" if needs_ckpt else "score the counting baseline")
        _add_config_flags(p)
        if needs_ckpt:
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--mode", choices=("embedding", "text", "baseline"))
        p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
        p.add_argument("--out", type=Path, help="write the report record here")
        p.add_argument("--table", action="store_true", help="print a text table instead of JSON")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train+evaluate across a sweep")
    _add_config_flags(p)
    p.add_argument("--sweep", required=True, help="e.g. data.p=4,8,16 or uem.layers=1,2,3")
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost-report", help="attention FLOPs: text vs embedding prompts")
    _add_config_flags(p)
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--out", type=Path)
    p.add_argument("--curve", type=Path, help="two-column (n, flops) file")
    p.set_defaults(func=cmd_cost_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, RunLockedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmbeddingFileError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
