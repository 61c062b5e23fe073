"""Command line entry point.

Exit codes: 0 success, 1 user error (bad flags, bad input files), 2 internal
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .engine import MODES, CostModel, EngineConfig
from .exceptions import ConfigError, FormatError
from .model import ToyModelConfig, build_model
from .router import (
    build_labels, make_corpus, make_topic_datasets, profile, read_corpus, save_router,
    train_router, write_corpus,
)
from .store import generate_adapters, open_registry
from .workload import WorkloadConfig, generate_trace, read_trace, write_trace

logger = logging.getLogger("loraserve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _model_flags(p, with_dims=True):
    p.add_argument("--vocab", type=int, default=2048, help="toy model vocabulary size")
    p.add_argument("--model-seed", type=int, default=0)
    if with_dims:
        p.add_argument("--hidden", type=int, default=64)
        p.add_argument("--layers", type=int, default=4)


def build_parser():
    parser = _Parser(prog="loraserve", description="Multi-adapter LoRA serving testbed.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-adapters", help="write a registry of seeded adapters")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)

    p = sub.add_parser("gen-trace", help="write a synthetic request trace")
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--cv", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--input-bounds", type=_pair, default=(8, 64))
    p.add_argument("--output-bounds", type=_pair, default=(8, 64))
    p.add_argument("--explicit-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=2048)
    p.add_argument("--topic-size", type=int, default=4)
    p.add_argument("-o", "--output", required=True, type=Path)

    p = sub.add_parser("profile", help="score every adapter on per-topic evaluation sets")
    p.add_argument("--registry", required=True, type=Path)
    _model_flags(p, with_dims=False)
    p.add_argument("--examples", type=int, default=20, help="examples per dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus-out", type=Path, help="also write a labelled training corpus")
    p.add_argument("--corpus-per-dataset", type=int, default=200)
    p.add_argument("-o", "--output", required=True, type=Path)

    p = sub.add_parser("train-router", help="fit the adapter router on profiling labels")
    p.add_argument("--profile", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=20.0)
    p.add_argument("--features", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, type=Path)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", type=Path, help="JSON service config")
    p.add_argument("--registry", type=Path)
    p.add_argument("--router", type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--gamma", type=int, default=8)
    p.add_argument("--l", type=int, default=8, dest="cache_capacity")
    _model_flags(p, with_dims=False)

    p = sub.add_parser("bench", help="replay a trace and report serving metrics")
    p.add_argument("--mode", choices=MODES, default="edgelora")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--budget", type=int, default=50, help="baseline adapter memory budget")
    p.add_argument("--l", type=int, default=20, dest="cache_capacity")
    p.add_argument("--gamma", type=int, default=20)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--cv", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--input-bounds", type=_pair, default=(8, 64))
    p.add_argument("--output-bounds", type=_pair, default=(8, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slo", type=float, default=bench.DEFAULT_SLO_S, help="first-token SLO, seconds")
    p.add_argument("--trace", type=Path, help="replay this trace instead of generating one")
    p.add_argument("--sweep", help="NAME=V1,V2,... e.g. n=20,100,1000")
    p.add_argument("--adapter-dir", type=Path)
    p.add_argument("--rank", type=int, default=8)
    _model_flags(p)
    p.add_argument("-o", "--output", type=Path, help="results file (JSON) plus .txt table")

    p = sub.add_parser("report", help="print the table for a results file")
    p.add_argument("results", type=Path)
    return parser


def _cmd_gen_adapters(args):
    reg = generate_adapters(args.out, args.n, args.hidden, args.rank, args.layers, args.seed, args.scale)
    print(f"wrote {reg.n} adapters to {reg.root}")


def _cmd_gen_trace(args):
    cfg = WorkloadConfig(
        n=args.n, alpha=args.alpha, rate=args.rate, cv=args.cv, duration=args.duration,
        input_bounds=args.input_bounds, output_bounds=args.output_bounds,
        explicit_fraction=args.explicit_fraction, seed=args.seed,
        vocab_size=args.vocab, topic_size=args.topic_size,
    )
    events = generate_trace(cfg)
    write_trace(args.output, events)
    print(f"wrote {len(events)} events to {args.output}")


def _registry_model(registry, vocab, seed):
    return build_model(ToyModelConfig(vocab, registry.d, registry.num_layers, seed))


def _cmd_profile(args):
    registry = open_registry(args.registry)
    model = _registry_model(registry, args.vocab, args.model_seed)
    datasets = make_topic_datasets(model, registry, args.examples, seed=args.seed)
    P = profile(model, registry, datasets)
    args.output.write_text(json.dumps({"datasets": [d.id for d in datasets], "P": P.tolist()}) + "\n")
    print(f"profiled {registry.n} adapters on {len(datasets)} datasets -> {args.output}")
    if args.corpus_out:
        prompts, ids = make_corpus(len(datasets), args.corpus_per_dataset, seed=args.seed, vocab_size=args.vocab)
        write_corpus(args.corpus_out, prompts, ids)
        print(f"wrote {len(prompts)} training prompts to {args.corpus_out}")


def _cmd_train_router(args):
    try:
        P = np.asarray(json.loads(args.profile.read_text())["P"], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{args.profile}: {exc}") from None
    prompts, ids = read_corpus(args.corpus)
    if ids.size and ids.max() >= P.shape[0]:
        raise FormatError("corpus references a dataset missing from the profile")
    labels = build_labels(P, args.epsilon)
    router = train_router(prompts, ids, labels, args.epochs, args.lr, args.seed, args.features)
    save_router(router, args.output)
    hist = router.loss_history_
    if hist:
        print(f"loss {hist[0]:.4f} -> {hist[-1]:.4f}")
    print(f"router ({router.n_outputs_} outputs, {args.features} features) -> {args.output}")


def _cmd_serve(args):
    from .server import ServiceConfig, serve_http

    if args.config:
        cfg = ServiceConfig.from_file(args.config)
    elif args.registry:
        cfg = ServiceConfig(
            registry=str(args.registry), router=str(args.router) if args.router else None,
            host=args.host, port=args.port,
            model={"vocab_size": args.vocab, "seed": args.model_seed},
            engine={"gamma": args.gamma, "cache_capacity": args.cache_capacity},
        )
    else:
        raise UsageError("serve: need --config or --registry")
    if "hidden_dim" not in cfg.model or "num_layers" not in cfg.model:
        reg = open_registry(cfg.registry, validate=False)
        cfg.model = {"hidden_dim": reg.d, "num_layers": reg.num_layers, **cfg.model}
    serve_http(cfg)


def _bench_config(args):
    model = ToyModelConfig(args.vocab, args.hidden, args.layers, args.model_seed)
    workload = WorkloadConfig(
        n=args.n, alpha=args.alpha, rate=args.rate, cv=args.cv, duration=args.duration,
        input_bounds=args.input_bounds, output_bounds=args.output_bounds, seed=args.seed,
        vocab_size=args.vocab,
    )
    engine = EngineConfig(
        gamma=args.gamma, mode=args.mode, k=args.k, cache_capacity=args.cache_capacity,
        memory_budget_adapters=args.budget, slo_threshold_ms=args.slo * 1000.0, cost=CostModel(),
    )
    return bench.BenchConfig(
        model=model, rank=args.rank, workload=workload, engine=engine, slo_threshold_s=args.slo,
        adapter_dir=str(args.adapter_dir) if args.adapter_dir else None, label=args.mode,
    )


def _parse_sweep(text):
    name, _, values = text.partition("=")
    if not values or name not in bench.SWEEPABLE:
        raise UsageError(f"--sweep expects NAME=V1,V2 with NAME in {bench.SWEEPABLE}")
    caster = str if name == "mode" else (float if name in ("alpha", "cv", "rate") else int)
    try:
        return name, [caster(v) for v in values.split(",")]
    except ValueError:
        raise UsageError(f"bad sweep values {values!r}") from None


def _cmd_bench(args):
    cfg = _bench_config(args)
    if args.sweep:
        name, values = _parse_sweep(args.sweep)
        reports = bench.sweep(name, values, cfg)
    else:
        trace = read_trace(args.trace) if args.trace else None
        if trace is not None:
            cfg = dataclasses.replace(cfg, workload=dataclasses.replace(cfg.workload, duration=max(
                args.duration, max((e.arrival_ms for e in trace), default=0.0) / 1000.0)))
        reports = [bench.run_bench(cfg, trace)]
    print(bench.format_table(reports), end="")
    if args.output:
        bench.render_report(reports, args.output)


def _cmd_report(args):
    print(bench.format_table(bench.load_reports(args.results)), end="")


_COMMANDS = {
    "gen-adapters": _cmd_gen_adapters,
    "gen-trace": _cmd_gen_trace,
    "profile": _cmd_profile,
    "train-router": _cmd_train_router,
    "serve": _cmd_serve,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError, ValueError) as exc:
        print(f"loraserve {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
