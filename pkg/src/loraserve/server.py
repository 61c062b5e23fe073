"""HTTP JSON front end: ``POST /completion``, ``GET /metrics``, ``GET /health``.

The engine runs on a background thread with the real clock; request handlers
hand work over through :meth:`Engine.submit` and await the completion record.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import threading
import zlib
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request as HttpRequest
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .bench import UndefinedMetrics, compute_metrics
from .engine import CostModel, Engine, EngineConfig, Request
from .exceptions import ConfigError, EngineShutdown, QueueFull
from .model import ToyModelConfig, build_model
from .router import load_router
from .store import open_registry

logger = logging.getLogger(__name__)


def tokenize(text, vocab_size):
    """Whitespace split, each word hashed into ``[1, vocab_size)``."""
    return [1 + zlib.crc32(w.encode()) % (vocab_size - 1) for w in text.split()]


class CompletionBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prompt: list[int] | str
    adapter_id: int | None = None
    n_predict: int = 16

    @field_validator("n_predict")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("n_predict must be >= 1")
        return v


class EngineService:
    """Owns an engine and the thread that steps it."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self._ids = itertools.count()
        self._futures: dict[int, Future] = {}
        self._records = []
        self._records_lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="engine-loop", daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._wake.set()
        self.engine.shutdown()
        self._thread.join(timeout=5)

    def _loop(self):
        while not self._stop.is_set():
            if self.engine.idle:
                self._wake.wait(0.05)
                self._wake.clear()
                continue
            report = self.engine.step()
            if report.completions:
                with self._records_lock:
                    self._records.extend(report.completions)
                for rec in report.completions:
                    fut = self._futures.pop(rec.request_id, None)
                    if fut is not None:
                        fut.set_result(rec)

    def submit(self, prompt, adapter_id=None, n_predict=16) -> Future:
        rid = next(self._ids)
        fut = Future()
        self._futures[rid] = fut
        req = Request(rid, self.engine.clock.now(), tuple(prompt), adapter_id, n_predict)
        try:
            self.engine.submit(req)
        except BaseException:
            self._futures.pop(rid, None)
            raise
        self._wake.set()
        return fut

    def metrics(self):
        with self._records_lock:
            records = list(self._records)
        cache = self.engine.cache
        out = {
            "requests_completed": sum(r.error is None for r in records),
            "requests_failed": sum(r.error is not None for r in records),
            "tokens_generated": sum(len(r.tokens) for r in records),
            "h_cache": cache.h_cache if cache else 0,
            "h_total": cache.h_total if cache else 0,
            "hit_rate": cache.hit_rate if cache else 0.0,
            "throughput": 0.0,
            "avg_request_latency": 0.0,
            "avg_first_token_latency": 0.0,
            "slo_attainment": 0.0,
        }
        try:
            rep = compute_metrics(
                records, self.engine.config.slo_threshold_ms / 1000.0,
                self.engine.clock.now() / 1000.0,
            )
        except UndefinedMetrics:
            return out
        out.update(
            throughput=rep.throughput,
            avg_request_latency=rep.avg_request_latency,
            avg_first_token_latency=rep.avg_first_token_latency,
            slo_attainment=rep.slo_attainment,
        )
        return out


def create_app(service: EngineService) -> FastAPI:
    app = FastAPI(title="loraserve")
    engine = service.engine
    vocab = engine.model.vocab_size

    @app.post("/completion")
    async def completion(http_request: HttpRequest):
        try:
            body = CompletionBody.model_validate(json.loads(await http_request.body()))
        except (ValidationError, ValueError) as exc:
            return JSONResponse({"error": f"malformed request: {exc}"}, status_code=400)
        prompt = tokenize(body.prompt, vocab) if isinstance(body.prompt, str) else body.prompt
        if not prompt:
            return JSONResponse({"error": "prompt is empty"}, status_code=400)
        if any(not 0 <= t < vocab for t in prompt):
            return JSONResponse({"error": f"token ids must lie in [0, {vocab})"}, status_code=400)
        if body.adapter_id is not None and body.adapter_id not in engine.registry:
            return JSONResponse({"error": f"unknown adapter_id {body.adapter_id}"}, status_code=404)
        if body.adapter_id is None and engine.router is None:
            return JSONResponse({"error": "adapter_id required: no router loaded"}, status_code=400)
        try:
            fut = service.submit(prompt, body.adapter_id, body.n_predict)
        except QueueFull as exc:
            return JSONResponse({"error": str(exc)}, status_code=429)
        except EngineShutdown as exc:
            return JSONResponse({"error": str(exc)}, status_code=503)
        rec = await asyncio.wrap_future(fut)
        if rec.error is not None:
            return JSONResponse({"error": rec.error}, status_code=500)
        return {
            "tokens": rec.tokens,
            "adapter_used": rec.adapter_used,
            "selection_kind": rec.selection_kind,
            "first_token_ms": rec.first_token - rec.arrival,
            "total_ms": rec.completion - rec.arrival,
        }

    @app.get("/metrics")
    def metrics():
        return service.metrics()

    @app.get("/health")
    def health():
        return {"status": "ok", "slots": engine.occupancy()}

    return app


@dataclass
class ServiceConfig:
    """Keys of the JSON service config file."""

    registry: str
    router: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    model: dict = field(default_factory=dict)
    engine: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read service config {path}: {exc}") from None
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad service config: {exc}") from None

    def validate(self):
        if not Path(self.registry, "manifest.json").is_file():
            raise ConfigError(f"registry {self.registry} has no manifest")
        if self.router is not None and not Path(self.router).is_file():
            raise ConfigError(f"router file {self.router} not found")


def build_service(cfg: ServiceConfig) -> EngineService:
    cfg.validate()
    model = build_model(ToyModelConfig(**cfg.model))
    registry = open_registry(cfg.registry)
    router = load_router(cfg.router) if cfg.router else None
    engine_cfg = EngineConfig(**{**cfg.engine, "clock": "real", "cost": CostModel(**cfg.cost)})
    engine = Engine(model, registry, router, engine_cfg)
    engine.prefill()
    return EngineService(engine)


def serve_http(cfg: ServiceConfig):
    import uvicorn

    service = build_service(cfg).start()
    try:
        uvicorn.run(create_app(service), host=cfg.host, port=cfg.port, log_level="info")
    finally:
        service.stop()


__all__ = ["EngineService", "ServiceConfig", "create_app", "build_service", "serve_http", "tokenize"]
