"""Trace replay, serving metrics and parameter sweeps."""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import (
    EDGELORA, SEQUENTIAL_BASELINE, CompletionRecord, Engine, EngineConfig, requests_from_trace,
)
from .exceptions import CapacityExceeded, ConfigError
from .model import ToyModelConfig, build_model
from .router import make_corpus, train_router
from .store import generate_adapters, open_registry
from .workload import WorkloadConfig, generate_trace

logger = logging.getLogger(__name__)

#: First-token SLO used on the real edge hardware. Toy-scale runs use
#: ``DEFAULT_SLO_S`` instead since absolute latencies do not transfer.
EDGE_HARDWARE_SLO_S = 6.0
DEFAULT_SLO_S = 5.0

SWEEPABLE = ("n", "alpha", "cv", "rate", "gamma", "l", "k", "mode")


class UndefinedMetrics(ValueError):
    """No completed requests to average over."""


@dataclass(frozen=True)
class RouterParams:
    n_features: int = 256
    epochs: int = 200
    learning_rate: float = 20.0
    prompts_per_adapter: int = 4
    seed: int = 0


@dataclass(frozen=True)
class BenchConfig:
    model: ToyModelConfig = ToyModelConfig()
    rank: int = 8
    adapter_seed: int = 0
    workload: WorkloadConfig = WorkloadConfig()
    engine: EngineConfig = EngineConfig()
    router: RouterParams = RouterParams()
    slo_threshold_s: float = DEFAULT_SLO_S
    adapter_dir: str | None = None
    label: str = ""

    @property
    def n(self):
        return self.workload.n

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["workload"]["input_bounds"] = list(self.workload.input_bounds)
        d["workload"]["output_bounds"] = list(self.workload.output_bounds)
        return d


@dataclass
class MetricsReport:
    label: str = ""
    throughput: float | None = None  # req/s
    avg_request_latency: float | None = None  # s
    avg_first_token_latency: float | None = None  # s
    slo_attainment: float | None = None
    cache_hit_rate: float | None = None
    completed: int = 0
    failed: int = 0
    oom: bool = False
    undefined: bool = False
    config: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compute_metrics(records, slo_threshold, trace_duration, cache_hit_rate=None, label="", config=None):
    """Serving metrics over successful records.

    ``records`` carry millisecond timestamps; ``slo_threshold`` and
    ``trace_duration`` are seconds. Throughput divides by the serving span:
    the trace window, or the last completion if the drain ran past it.
    """
    done = [r for r in records if r.error is None]
    if not done:
        raise UndefinedMetrics("no completed requests")
    ftl = np.array([(r.first_token - r.arrival) / 1000.0 for r in done])
    latency = np.array([(r.completion - r.arrival) / 1000.0 for r in done])
    span = max(float(trace_duration), max(r.completion for r in done) / 1000.0)
    return MetricsReport(
        label=label,
        throughput=len(done) / span,
        avg_request_latency=float(latency.mean()),
        avg_first_token_latency=float(ftl.mean()),
        slo_attainment=float(np.count_nonzero(ftl <= slo_threshold)) / len(done),
        cache_hit_rate=cache_hit_rate,
        completed=len(done),
        failed=len(records) - len(done),
        config=config or {},
        records=[dataclasses.asdict(r) for r in records],
    )


# testbed -----------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _testbed(model_cfg, n, rank, adapter_seed, router_params, vocab_topic, adapter_dir):
    model = build_model(model_cfg)
    root = Path(adapter_dir) if adapter_dir else Path(tempfile.mkdtemp(prefix="loraserve-adapters-"))
    manifest = root / "manifest.json"
    if manifest.exists():
        registry = open_registry(root)
        if (registry.n, registry.r, registry.seed) != (n, rank, adapter_seed):
            raise ConfigError(f"{root} holds a different adapter set")
    else:
        registry = generate_adapters(root, n, model_cfg.hidden_dim, rank, model_cfg.num_layers, adapter_seed)
    # Topic datasets give each adapter a perfect score on its own topic, so the
    # profiling labels are the identity; train on those directly.
    prompts, ids = make_corpus(
        n, router_params.prompts_per_adapter, (4, 32), router_params.seed, *vocab_topic
    )
    router = train_router(
        prompts, ids, np.eye(n), router_params.epochs, router_params.learning_rate,
        router_params.seed, router_params.n_features,
    )
    return model, registry, router


def build_testbed(config: BenchConfig):
    """Model, adapter registry and trained router for a bench config (memoised)."""
    vocab_topic = (config.model.vocab_size, config.workload.topic_size)
    return _testbed(config.model, config.n, config.rank, config.adapter_seed, config.router, vocab_topic, config.adapter_dir)


# replay ------------------------------------------------------------------

@dataclass
class ReplayResult:
    records: list
    hit_rate: float | None = None
    oom: bool = False
    stats: dict = field(default_factory=dict)


def replay(trace, config: BenchConfig, testbed=None) -> ReplayResult:
    """Run a trace through a fresh engine under ``config.engine``.

    The sequential baseline addresses every request to its intended adapter,
    as a server without a router would.
    """
    model, registry, router = testbed or build_testbed(config)
    engine_cfg = dataclasses.replace(config.engine, queue_bound=None)
    try:
        engine = Engine(model, registry, router, engine_cfg)
    except CapacityExceeded as exc:
        logger.info("baseline out of memory: %s", exc)
        return ReplayResult([], None, oom=True)
    engine.prefill()
    baseline = engine_cfg.mode == SEQUENTIAL_BASELINE
    records = engine.run_until_drain(requests_from_trace(trace, explicit_all=baseline))
    hit = engine.cache.hit_rate if engine.cache is not None else None
    return ReplayResult(records, hit, stats=dict(engine.stats))


def run_bench(config: BenchConfig, trace=None) -> MetricsReport:
    trace = generate_trace(config.workload) if trace is None else trace
    result = replay(trace, config)
    cfg = config.to_dict()
    if result.oom:
        return MetricsReport(label=config.label, oom=True, config=cfg)
    try:
        return compute_metrics(
            result.records, config.slo_threshold_s, config.workload.duration,
            result.hit_rate, config.label, cfg,
        )
    except UndefinedMetrics:
        return MetricsReport(label=config.label, undefined=True, config=cfg,
                             records=[dataclasses.asdict(r) for r in result.records])


def with_param(config: BenchConfig, name, value) -> BenchConfig:
    if name in ("n", "alpha", "cv", "rate"):
        workload = dataclasses.replace(config.workload, **{name: value})
        return dataclasses.replace(config, workload=workload)
    engine_key = {"gamma": "gamma", "l": "cache_capacity", "k": "k", "mode": "mode"}.get(name)
    if engine_key is None:
        raise ConfigError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
    engine = dataclasses.replace(config.engine, **{engine_key: value})
    return dataclasses.replace(config, engine=engine)


def sweep(name, values, base: BenchConfig):
    """One report per value; the workload seed is shared so arrivals line up."""
    if name not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
    reports = []
    for value in values:
        cfg = with_param(base, name, value)
        cfg = dataclasses.replace(cfg, label=f"{name}={value}")
        reports.append(run_bench(cfg))
    return reports


# reporting ---------------------------------------------------------------

_COLUMNS = ("label", "mode", "n", "throughput", "avg_latency_s", "avg_ftl_s", "slo", "hit_rate")


def _row(rep: MetricsReport):
    eng = rep.config.get("engine", {})
    n = rep.config.get("workload", {}).get("n", "")
    head = [rep.label or "-", eng.get("mode", "-"), str(n)]
    if rep.oom:
        return head + ["OOM"] * 5
    if rep.undefined:
        return head + ["n/a"] * 5
    hit = "-" if rep.cache_hit_rate is None else f"{rep.cache_hit_rate:.3f}"
    return head + [
        f"{rep.throughput:.3f}", f"{rep.avg_request_latency:.3f}",
        f"{rep.avg_first_token_latency:.3f}", f"{rep.slo_attainment:.3f}", hit,
    ]


def format_table(reports):
    rows = [list(_COLUMNS)] + [_row(r) for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def render_report(reports, path):
    """Write ``path`` (JSON results) and ``path`` with a ``.txt`` suffix (table)."""
    if not reports:
        raise ValueError("need at least one report")
    path = Path(path)
    payload = {"reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".txt").write_text(format_table(reports))


def load_reports(path):
    data = json.loads(Path(path).read_text())
    return [MetricsReport.from_dict(d) for d in data["reports"]]


def records_from_dicts(items):
    return [CompletionRecord(**d) for d in items]


__all__ = [
    "BenchConfig", "RouterParams", "MetricsReport", "ReplayResult", "UndefinedMetrics",
    "compute_metrics", "build_testbed", "replay", "run_bench", "sweep", "with_param",
    "render_report", "load_reports", "format_table", "EDGE_HARDWARE_SLO_S", "DEFAULT_SLO_S",
    "EDGELORA", "SEQUENTIAL_BASELINE",
]
