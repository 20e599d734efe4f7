"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""
from __future__ import annotations

import os

# single-threaded BLAS keeps runs byte-reproducible; must precede numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import RunConfig, load_config  # noqa: E402
from .errors import ConfigError, DataError, KGWalkError, TrainingError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which here means "data error"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", dest="data_dir", help="prepared dataset directory")
    p.add_argument("--work", dest="work_dir", help="directory for checkpoints and outputs")
    p.add_argument("--seed", type=int, help="master seed; run k uses seed + k")
    p.add_argument("-v", "--verbose", action="store_true")


def _flag(p, name, dest, help):
    p.add_argument(name, dest=dest, action="store_const", const=False, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgwalk", description="Explainable recommendation by policy-gradient graph walks.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="filter, split and summarize raw TSV inputs")
    _common(p)
    p.add_argument("--interactions")
    p.add_argument("--triplets")
    p.add_argument("--matches")
    p.add_argument("--out", dest="data_dir", help="output directory (same as --data)")

    p = sub.add_parser("train-kge", help="pre-train DistMult embeddings")
    _common(p)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", dest="kge_epochs", type=int)
    p.add_argument("--negatives", dest="kge_negatives", type=int)
    p.add_argument("--lr", dest="kge_lr", type=float)
    p.add_argument("--dropout", dest="kge_dropout", type=float)
    _flag(p, "--no-kg", "use_kg", "drop KG triplets from the graph")

    p = sub.add_parser("train-policy", help="train the walk policy with REINFORCE")
    _common(p)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--action-dropout", dest="action_dropout", type=float)
    p.add_argument("--embed-dropout", dest="embed_dropout", type=float)
    p.add_argument("--lr", type=float)
    _flag(p, "--no-kg", "use_kg", "drop KG triplets from the graph")
    _flag(p, "--no-reward-shaping", "reward_shaping", "reward 0 for unseen items")
    p.add_argument("--no-action-dropout", action="store_true", help="set the action dropout rate to 0")
    p.add_argument("--freeze-embeddings", action="store_const", const=True, default=None)

    for name, help in (("recommend", "beam search and rank items for test users"),
                       ("explain", "pretty-print one user's recommendation paths")):
        p = sub.add_parser(name, help=help)
        _common(p)
        p.add_argument("--run", type=int, default=0)
        p.add_argument("--k", type=int)
        p.add_argument("--beam", type=int)
        p.add_argument("--max-len", dest="max_len", type=int)
        p.add_argument("--strategy", choices=("path", "reward"))
        _flag(p, "--no-kg", "use_kg", "drop KG triplets from the graph")
        if name == "recommend":
            p.add_argument("--out", help="JSON Lines output (default: run directory)")
            p.add_argument("--report", action="store_true", help="also print readable paths")
        else:
            p.add_argument("--user", required=True, help="user label")

    p = sub.add_parser("evaluate", help="HR@k / NDCG@k over runs and path patterns")
    _common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--model", choices=("ekar", "ekar-star", "itemknn", "kge-rec"), default="ekar")
    p.add_argument("--out", help="metric TSV (default: work/metrics_<model>.tsv)")
    p.add_argument("--patterns", help="pattern TSV (default: work/patterns.tsv)")
    _flag(p, "--no-kg", "use_kg", "drop KG triplets from the graph")

    p = sub.add_parser("pipeline", help="run every out-of-date stage")
    _common(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--interactions")
    p.add_argument("--triplets")
    p.add_argument("--matches")
    return parser


_NON_CONFIG = {"command", "config", "verbose", "run", "out", "report", "user", "model", "patterns", "no_action_dropout"}


def _config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}
    if getattr(args, "no_action_dropout", False):
        overrides["action_dropout"] = 0.0
    return load_config(args.config, overrides)


def _run(args) -> int:
    from .inference import render_path, write_jsonl
    from .pipeline import Pipeline

    cfg = _config(args)
    pipe = Pipeline(cfg)
    cmd = args.command

    if cmd == "ingest":
        pipe.ingest(force=True)
        for k, v in pipe.dataset.stats.items():
            print(f"{k}\t{v}")
    elif cmd == "train-kge":
        pipe.train_kge(args.run, force=True)
        print(pipe.run_dir(args.run) / "kge.bin")
    elif cmd == "train-policy":
        pipe.train_policy(args.run, force=True)
        print(pipe.run_dir(args.run) / "policy.bin")
    elif cmd == "recommend":
        lists = pipe.recommendations(args.run)[cfg.strategy]
        out = Path(args.out) if args.out else pipe.run_dir(args.run) / f"recs_{cfg.strategy}.jsonl"
        write_jsonl(out, lists)
        if args.report:
            for rec in lists:
                for e in rec["items"]:
                    print(f"{e['score']:.4f}\t{render_path(rec['user'], e['path'])}")
        print(out)
    elif cmd == "explain":
        graph = pipe.graph(args.run)
        try:
            u = graph.entity_id(args.user)
        except KeyError:
            raise DataError(f"unknown user {args.user!r}") from None
        rec = pipe.recommendations(args.run, users=[u])[cfg.strategy][0]
        print(f"top-{cfg.k} for {rec['user']} ({cfg.strategy} ranking)")
        for n, e in enumerate(rec["items"], start=1):
            print(f"{n:>3}. {e['item']}  score={e['score']:.4f}")
            print(f"     {render_path(rec['user'], e['path'])}")
        if rec["short"]:
            print(f"(beam found only {len(rec['items'])} items)")
    elif cmd == "evaluate":
        report = pipe.evaluate_model(args.model)
        out = Path(args.out) if args.out else pipe.work / f"metrics_{args.model}.tsv"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_tsv(), encoding="utf-8")
        sys.stdout.write(report.to_tsv())
        if args.model in ("ekar", "ekar-star"):
            from .metrics import patterns_to_tsv

            pat = Path(args.patterns) if args.patterns else pipe.work / "patterns.tsv"
            pat.write_text(patterns_to_tsv(pipe.patterns(0, "path" if args.model == "ekar" else "reward")), encoding="utf-8")
    elif cmd == "pipeline":
        ran = pipe.run_all()
        print("executed: " + (", ".join(ran) if ran else "nothing (up to date)"))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FileNotFoundError as exc:
        print(f"data error: {exc.filename}: not found", file=sys.stderr)
        return EXIT_DATA
    except KGWalkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
