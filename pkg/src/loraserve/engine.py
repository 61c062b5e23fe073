"""Slot-based serving loop with cross-slot multi-adapter batching.

Each slot walks ``IDLE -> ADAPTER_SELECTION -> PROMPT_PROCESSING ->
GENERATION -> IDLE``. One :meth:`Engine.step` feeds one token per active
slot through a single batched forward pass.

Time is kept in milliseconds. Under the virtual clock the compute is really
executed but the clock is advanced by a deterministic cost model, so replays
are reproducible; under the real clock timestamps come from
``time.monotonic``.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .exceptions import CapacityExceeded, ConfigError, EngineShutdown, FormatError, QueueFull
from .lora import merge_adapter, unmerge_adapter
from .model import forward_token_batch, process_prompt
from .router import EXPLICIT, SelectionConfig, select_adapter
from .store import AdapterCache

logger = logging.getLogger(__name__)

EDGELORA = "edgelora"
SEQUENTIAL_BASELINE = "sequential_baseline"
MODES = (EDGELORA, SEQUENTIAL_BASELINE)


class SlotState(enum.Enum):
    IDLE = "idle"
    ADAPTER_SELECTION = "adapter_selection"
    PROMPT_PROCESSING = "prompt_processing"
    GENERATION = "generation"


_ALLOWED = {
    SlotState.IDLE: {SlotState.ADAPTER_SELECTION},
    SlotState.ADAPTER_SELECTION: {SlotState.PROMPT_PROCESSING, SlotState.IDLE},
    SlotState.PROMPT_PROCESSING: {SlotState.GENERATION, SlotState.IDLE},
    SlotState.GENERATION: {SlotState.IDLE},
}


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float  # ms
    prompt: tuple
    explicit_adapter: int | None = None
    max_new_tokens: int = 16

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class CompletionRecord:
    request_id: int
    adapter_used: int | None
    selection_kind: str | None
    arrival: float
    first_token: float
    completion: float
    tokens: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class Slot:
    slot_id: int
    state: SlotState = SlotState.IDLE
    request: Request | None = None
    adapter_id: int | None = None
    selection_kind: str | None = None
    adapter: object = None
    cursor: int = 0
    next_input: int | None = None
    tokens: list = field(default_factory=list)
    bind_seq: int = -1
    selection_cursor: int | None = None
    selection_done: float | None = None
    first_token_time: float | None = None
    completion_time: float | None = None
    history: list = field(default_factory=list)

    def transition(self, new):
        if new not in _ALLOWED[self.state]:
            raise RuntimeError(f"illegal slot transition {self.state} -> {new}")
        self.history.append(new)
        self.state = new

    def reset(self):
        self.request = None
        self.adapter_id = None
        self.selection_kind = None
        self.adapter = None
        self.cursor = 0
        self.next_input = None
        self.selection_cursor = None
        self.tokens = []
        self.selection_done = None
        self.first_token_time = None
        self.completion_time = None

    @property
    def active(self):
        return self.state in (SlotState.PROMPT_PROCESSING, SlotState.GENERATION)


@dataclass(frozen=True)
class CostModel:
    """Roofline-style charge for the work a step actually performed.

    Streaming a weight element costs ``weight_ms`` whatever the batch size,
    each multiply-add costs ``flop_ms``; this is what makes batching pay off
    on memory-bound edge hardware.
    """

    weight_ms: float = 1e-4
    flop_ms: float = 2e-6
    pass_ms: float = 1.0
    disk_ms_per_byte: float = 6e-4

    def matmul_ms(self, rows, cols, batch):
        return self.weight_ms * rows * cols + self.flop_ms * rows * cols * batch

    def forward_ms(self, d, vocab, layers, batch, ubatch_sizes=(), rank=0):
        ms = self.pass_ms
        ms += layers * self.matmul_ms(d, d, batch)
        for size in ubatch_sizes:
            ms += layers * (self.matmul_ms(rank, d, size) + self.matmul_ms(d, rank, size))
        ms += self.matmul_ms(d, vocab, batch)
        return ms

    def merge_ms(self, d, rank, layers):
        # B @ A, then read-modify-write of W
        return layers * (self.flop_ms * d * d * rank + self.weight_ms * (2 * rank * d + 2 * d * d))

    def load_ms(self, nbytes):
        return self.disk_ms_per_byte * nbytes


class VirtualClock:
    def __init__(self, start=0.0):
        self._now = float(start)

    def now(self):
        return self._now

    def advance(self, ms):
        self._now += ms

    def wait_until(self, t):
        self._now = max(self._now, float(t))


class RealClock:
    def __init__(self):
        self._t0 = time.monotonic()

    def now(self):
        return (time.monotonic() - self._t0) * 1000.0

    def advance(self, ms):
        pass

    def wait_until(self, t):
        delay = (t - self.now()) / 1000.0
        if delay > 0:
            time.sleep(delay)


@dataclass(frozen=True)
class EngineConfig:
    gamma: int = 8
    mode: str = EDGELORA
    k: int = 3
    cache_capacity: int = 8
    memory_budget_adapters: int = 50
    slo_threshold_ms: float = 5000.0
    clock: str = "virtual"
    queue_bound: int | None = 1024
    prefill_seed: int = 0
    cost: CostModel = CostModel()

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError("gamma must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.k < 1 or self.cache_capacity < 1:
            raise ConfigError("k and cache_capacity must be >= 1")
        if self.clock not in ("virtual", "real"):
            raise ConfigError("clock must be 'virtual' or 'real'")


@dataclass
class StepReport:
    tokens_processed: int = 0
    ubatch_count: int = 0
    completions: list = field(default_factory=list)
    elapsed_ms: float = 0.0
    adapter_group: int | None = None


class Engine:
    """Server manager plus computing backend for one toy model.

    ``submit`` may be called from any thread; ``step`` and
    ``run_until_drain`` belong to a single scheduler thread.
    """

    def __init__(self, model, registry, router=None, config=EngineConfig(), clock=None):
        self.model = model
        self.registry = registry
        self.router = router
        self.config = config
        self.clock = clock or (VirtualClock() if config.clock == "virtual" else RealClock())
        self.selection = SelectionConfig(config.k)
        self.slots = [Slot(i) for i in range(config.gamma)]
        self.queue: deque[Request] = deque()
        self._lock = threading.RLock()
        self._closed = False
        self._bind_seq = 0
        self.stats = {
            "steps": 0, "tokens": 0, "ubatches": 0, "selection_ms": 0.0,
            "load_ms": 0.0, "merge_ms": 0.0, "compute_ms": 0.0, "switches": 0, "selection_tokens": 0,
            "completed": 0, "failed": 0,
        }
        self.cache = None
        if config.mode == EDGELORA:
            self.cache = AdapterCache(registry, config.cache_capacity)
        else:
            if registry.n > config.memory_budget_adapters:
                raise CapacityExceeded(registry.n, config.memory_budget_adapters)
            self._preloaded = {i: registry.load(i) for i in range(registry.n)}
            self._work_layers = [w.copy() for w in model.layers]
            self._merged = None

    # admission -----------------------------------------------------------

    def submit(self, request: Request):
        with self._lock:
            if self._closed:
                raise EngineShutdown("engine has been shut down")
            slot = self._idle_slot()
            if slot is not None:
                self._bind(slot, request)
            elif self.config.queue_bound is not None and len(self.queue) >= self.config.queue_bound:
                raise QueueFull(f"queue bound {self.config.queue_bound} reached")
            else:
                self.queue.append(request)
            return request.id

    def shutdown(self):
        with self._lock:
            self._closed = True

    def prefill(self, seed=None):
        if self.cache is not None:
            self.cache.prefill(self.config.prefill_seed if seed is None else seed)

    def _idle_slot(self):
        for s in self.slots:
            if s.state is SlotState.IDLE:
                return s
        return None

    def _bind(self, slot, request):
        slot.reset()
        slot.request = request
        slot.bind_seq = self._bind_seq
        self._bind_seq += 1
        slot.transition(SlotState.ADAPTER_SELECTION)

    def _rebind(self):
        while self.queue:
            slot = self._idle_slot()
            if slot is None:
                return
            self._bind(slot, self.queue.popleft())

    @property
    def idle(self):
        with self._lock:
            return not self.queue and all(s.state is SlotState.IDLE for s in self.slots)

    def occupancy(self):
        with self._lock:
            busy = sum(s.state is not SlotState.IDLE for s in self.slots)
            return {"slots": len(self.slots), "busy": busy, "idle": len(self.slots) - busy, "queued": len(self.queue)}

    @property
    def hit_rate(self):
        return self.cache.hit_rate if self.cache is not None else 1.0

    # cost helpers --------------------------------------------------------

    def _charge(self, key, ms):
        self.stats[key] += ms
        self.clock.advance(ms)

    def _forward_cost(self, batch, ubatch_sizes=()):
        m = self.model
        return self.config.cost.forward_ms(
            m.hidden_dim, m.vocab_size, m.num_layers, batch, ubatch_sizes, self.registry.r
        )

    def prompt_forward_ms(self, prompt_len):
        """Cost of running a prompt token-by-token through the base model alone."""
        return prompt_len * self._forward_cost(1)

    # adapter selection ---------------------------------------------------

    def _choose(self, slot):
        """Run the selection rule once the router pass over the prompt is done."""
        slot.adapter_id, slot.selection_kind = select_adapter(
            slot.request.prompt, None, self.router, self._resident(), self.selection, self.registry.n
        )
        slot.selection_done = self.clock.now()

    def _resident(self):
        return self.cache if self.cache is not None else self._preloaded

    def _begin_selection(self, slot):
        """Explicit ids resolve on the spot; otherwise start the router's prompt pass."""
        req = slot.request
        if req.explicit_adapter is not None:
            if req.explicit_adapter not in self.registry:
                raise KeyError(f"unknown adapter id {req.explicit_adapter}")
            slot.adapter_id, slot.selection_kind = int(req.explicit_adapter), EXPLICIT
            slot.selection_done = self.clock.now()
            return
        if self.router is None:
            raise KeyError("request has no explicit adapter and no router is configured")
        if self.config.mode == SEQUENTIAL_BASELINE:
            # no batching across adapters here, so the router pass runs alone
            process_prompt(self.model, None, req.prompt)
            self._charge("selection_ms", self.prompt_forward_ms(len(req.prompt)))
            self._choose(slot)
        else:
            slot.selection_cursor = 0

    def _resolve(self, slot, report):
        """Advance a slot out of ADAPTER_SELECTION if its adapter can be made resident."""
        try:
            if slot.adapter_id is None and slot.selection_cursor is None:
                self._begin_selection(slot)
            if slot.adapter_id is None:
                return  # router pass still in flight
            if self.cache is None:
                slot.adapter = self._preloaded[slot.adapter_id]
            else:
                if not self.cache.can_admit(slot.adapter_id):
                    return  # every resident adapter is pinned; retry next step
                miss = slot.adapter_id not in self.cache
                slot.adapter = self.cache.get(slot.adapter_id)
                self.cache.pin(slot.adapter_id)
                if miss:
                    self._charge("load_ms", self.config.cost.load_ms(self.registry.block_size))
        except (KeyError, FormatError, OSError) as exc:
            logger.warning("request %s failed during adapter resolution: %s", slot.request.id, exc)
            report.completions.append(self._fail(slot, str(exc)))
            return
        slot.cursor = 0
        slot.next_input = slot.request.prompt[0]
        slot.transition(SlotState.PROMPT_PROCESSING)

    def _fail(self, slot, message):
        now = self.clock.now()
        req = slot.request
        rec = CompletionRecord(req.id, slot.adapter_id, slot.selection_kind, req.arrival_time, now, now, [], message)
        self.stats["failed"] += 1
        slot.transition(SlotState.IDLE)
        slot.reset()
        return rec

    # stepping ------------------------------------------------------------

    def step(self) -> StepReport:
        with self._lock:
            t0 = self.clock.now()
            report = StepReport()
            for slot in self.slots:
                if slot.state is SlotState.ADAPTER_SELECTION:
                    self._resolve(slot, report)
            active = [s for s in self.slots if s.active]
            if self.config.mode == EDGELORA:
                selecting = [
                    s for s in self.slots
                    if s.state is SlotState.ADAPTER_SELECTION and s.selection_cursor is not None and s.adapter_id is None
                ]
                if active or selecting:
                    self._compute_unmerged(active, selecting, report)
            elif active:
                self._compute_merged(active, report)
            self._rebind()
            self.stats["steps"] += 1
            self.stats["tokens"] += report.tokens_processed
            self.stats["ubatches"] += report.ubatch_count
            report.elapsed_ms = self.clock.now() - t0
            return report

    def _compute_unmerged(self, active, selecting, report):
        """One batched pass: adapter tokens per u-batch plus base-only router tokens."""
        assignments = [s.adapter_id for s in active] + [None] * len(selecting)
        tokens = [s.next_input for s in active] + [s.request.prompt[s.selection_cursor] for s in selecting]
        adapters = {s.adapter_id: s.adapter for s in active}
        _, nxt = forward_token_batch(self.model, adapters, assignments, tokens)
        sizes = [assignments.count(a) for a in adapters]
        self._charge("compute_ms", self._forward_cost(len(tokens), sizes))
        report.tokens_processed = len(tokens)
        report.ubatch_count = len(adapters)
        self.stats["selection_tokens"] += len(selecting)
        for slot in selecting:
            slot.selection_cursor += 1
            if slot.selection_cursor == len(slot.request.prompt):
                self._choose(slot)
        self._advance(active, nxt[: len(active)], report)

    def _compute_merged(self, active, report):
        """Sequential baseline: only the oldest request's adapter group runs."""
        oldest = min(active, key=lambda s: (s.request.arrival_time, s.bind_seq))
        target = oldest.adapter_id
        group = [s for s in active if s.adapter_id == target]
        if self._merged != target:
            cost = self.config.cost.merge_ms(self.model.hidden_dim, self.registry.r, self.model.num_layers)
            if self._merged is not None:
                old = self._preloaded[self._merged]
                self._work_layers = [unmerge_adapter(w, p) for w, p in zip(self._work_layers, old.layers)]
                self._charge("merge_ms", cost)
            new = self._preloaded[target]
            self._work_layers = [merge_adapter(w, p) for w, p in zip(self._work_layers, new.layers)]
            self._charge("merge_ms", cost)
            self._merged = target
            self.stats["switches"] += 1
        merged_model = dataclasses.replace(self.model, layers=tuple(self._work_layers))
        _, nxt = forward_token_batch(merged_model, {}, [None] * len(group), [s.next_input for s in group])
        self._charge("compute_ms", self._forward_cost(len(group)))
        report.tokens_processed = len(group)
        report.ubatch_count = 1
        report.adapter_group = target
        self._advance(group, nxt, report)

    def _advance(self, slots, next_tokens, report):
        now = self.clock.now()
        eos = self.model.config.eos_token
        for slot, tok in zip(slots, next_tokens):
            tok = int(tok)
            if slot.state is SlotState.PROMPT_PROCESSING:
                slot.cursor += 1
                if slot.cursor < len(slot.request.prompt):
                    slot.next_input = slot.request.prompt[slot.cursor]
                    continue
                # output of the last prompt token is the first generated token
                slot.transition(SlotState.GENERATION)
            slot.tokens.append(tok)
            slot.next_input = tok
            if slot.first_token_time is None:
                slot.first_token_time = now
            if len(slot.tokens) >= slot.request.max_new_tokens or tok == eos:
                report.completions.append(self._complete(slot, now))

    def _complete(self, slot, now):
        req = slot.request
        slot.completion_time = now
        rec = CompletionRecord(
            req.id, slot.adapter_id, slot.selection_kind, req.arrival_time,
            slot.first_token_time, now, list(slot.tokens),
        )
        if self.cache is not None:
            self.cache.unpin(slot.adapter_id)
        self.stats["completed"] += 1
        slot.transition(SlotState.IDLE)
        slot.reset()
        return rec

    # driving -------------------------------------------------------------

    def run_until_drain(self, requests):
        """Inject requests at their arrival times and step until all finish.

        Returns records ordered by completion time.
        """
        pending = deque(sorted(requests, key=lambda r: r.arrival_time))
        records = []
        while True:
            now = self.clock.now()
            while pending and pending[0].arrival_time <= now:
                try:
                    self.submit(pending[0])
                except QueueFull:
                    break
                pending.popleft()
            if self.idle:
                if not pending:
                    break
                self.clock.wait_until(pending[0].arrival_time)
                continue
            report = self.step()
            records.extend(report.completions)
            if not report.tokens_processed and not report.completions and not report.elapsed_ms:
                raise RuntimeError("engine stalled: slots waiting with nothing running")
        records.sort(key=lambda r: r.completion)
        return records


def step_sequential_baseline(engine: Engine) -> StepReport:
    if engine.config.mode != SEQUENTIAL_BASELINE:
        raise ConfigError("engine is not in sequential_baseline mode")
    return engine.step()


def requests_from_trace(events, explicit_all=False):
    """Turn trace events into requests; ``explicit_all`` pins each to its intended adapter."""
    out = []
    for i, ev in enumerate(events):
        explicit = ev.intended_adapter if explicit_all else ev.explicit_adapter
        out.append(Request(i, ev.arrival_ms, ev.prompt, explicit, ev.target_output_len))
    return out
