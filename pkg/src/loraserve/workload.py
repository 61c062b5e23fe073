"""Synthetic request traces: Gamma arrivals, power-law adapter popularity,
uniform prompt/output lengths and topic-token prompts.

Every random quantity has its own seeded stream, so changing (say) ``n`` or
``alpha`` leaves the arrival process untouched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError

# Stream ids mixed into the seed for independent draws.
_ARRIVALS, _ADAPTERS, _IN_LEN, _OUT_LEN, _PROMPT, _EXPLICIT = range(6)


@dataclass(frozen=True)
class WorkloadConfig:
    n: int = 20
    alpha: float = 1.0
    rate: float = 0.5
    cv: float = 1.0
    duration: float = 60.0
    input_bounds: tuple = (8, 64)
    output_bounds: tuple = (8, 64)
    explicit_fraction: float = 0.0
    seed: int = 0
    vocab_size: int = 2048
    topic_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_bounds", tuple(int(v) for v in self.input_bounds))
        object.__setattr__(self, "output_bounds", tuple(int(v) for v in self.output_bounds))
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.rate <= 0:
            raise ConfigError("rate must be > 0")
        if self.cv <= 0:
            raise ConfigError("cv must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0")
        lo, hi = self.input_bounds
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid input bounds {self.input_bounds}")
        lo, hi = self.output_bounds
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid output bounds {self.output_bounds}")
        if not 0.0 <= self.explicit_fraction <= 1.0:
            raise ConfigError("explicit_fraction must lie in [0, 1]")
        if self.topic_size < 1 or self.vocab_size < 2:
            raise ConfigError("topic_size >= 1 and vocab_size >= 2 required")


@dataclass(frozen=True)
class TraceEvent:
    arrival_ms: float
    prompt: tuple
    intended_adapter: int
    target_output_len: int
    explicit_adapter: int | None = None

    def to_json(self):
        rec = {
            "arrival_ms": self.arrival_ms,
            "prompt": " ".join(str(t) for t in self.prompt),
            "intended_adapter": self.intended_adapter,
            "explicit_adapter": self.explicit_adapter,
            "target_output_len": self.target_output_len,
        }
        return json.dumps(rec, separators=(",", ":"))


def power_law_pmf(n, alpha):
    """``P(i) = i^-alpha / sum_j j^-alpha`` for ranks 1..n, indexed by id = rank - 1."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    weights = np.arange(1, n + 1, dtype=np.float64) ** -float(alpha)
    return weights / weights.sum()


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def sample_intervals(rate, cv, count, seed):
    """Gamma(shape=1/cv^2, scale=cv^2/rate) inter-arrival times in seconds.

    numpy's gamma sampler uses Marsaglia-Tsang, with the ``U^(1/shape)`` boost
    when shape < 1.
    """
    if rate <= 0 or cv <= 0:
        raise ConfigError("rate and cv must be > 0")
    shape = 1.0 / cv**2
    scale = cv**2 / rate
    return _rng(seed, _ARRIVALS).gamma(shape, scale, size=count)


def sample_adapters(n, alpha, count, seed):
    return _rng(seed, _ADAPTERS).choice(n, size=count, p=power_law_pmf(n, alpha))


def topic_tokens(adapter_id, vocab_size, topic_size=4):
    """Token ids forming an adapter's topic vocabulary (token 0 is reserved).

    Topics are disjoint while ``n * topic_size < vocab_size`` and wrap around
    otherwise.
    """
    span = vocab_size - 1
    start = adapter_id * topic_size
    return [1 + (start + t) % span for t in range(topic_size)]


def topic_prompt(adapter_id, length, rng, vocab_size, topic_size=4):
    """Topic token first, then fillers drawn from the same topic vocabulary."""
    vocab = topic_tokens(adapter_id, vocab_size, topic_size)
    fillers = rng.choice(vocab, size=length - 1) if length > 1 else []
    return [vocab[0], *(int(t) for t in fillers)]


def _arrival_times(config):
    """Cumulative arrival times (seconds) strictly inside ``duration``."""
    expected = config.rate * config.duration
    chunk = max(16, int(expected + 6 * np.sqrt(expected + 1) * max(config.cv, 1.0)) + 16)
    count = chunk
    while True:
        times = np.cumsum(sample_intervals(config.rate, config.cv, count, config.seed))
        if count and times[-1] >= config.duration:
            return times[times < config.duration]
        count *= 2


def generate_trace(config: WorkloadConfig) -> list[TraceEvent]:
    times = _arrival_times(config)
    m = len(times)
    adapters = sample_adapters(config.n, config.alpha, m, config.seed)
    in_lens = _rng(config.seed, _IN_LEN).integers(config.input_bounds[0], config.input_bounds[1], endpoint=True, size=m)
    out_lens = _rng(config.seed, _OUT_LEN).integers(config.output_bounds[0], config.output_bounds[1], endpoint=True, size=m)
    explicit = _rng(config.seed, _EXPLICIT).random(m) < config.explicit_fraction
    prompt_rng = _rng(config.seed, _PROMPT)
    events = []
    for i in range(m):
        aid = int(adapters[i])
        prompt = topic_prompt(aid, int(in_lens[i]), prompt_rng, config.vocab_size, config.topic_size)
        events.append(TraceEvent(
            arrival_ms=float(times[i] * 1000.0),
            prompt=tuple(prompt),
            intended_adapter=aid,
            target_output_len=int(out_lens[i]),
            explicit_adapter=aid if explicit[i] else None,
        ))
    return events


def write_trace(path, events):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def _parse_event(line):
    rec = json.loads(line)
    prompt = tuple(int(t) for t in rec["prompt"].split())
    if not prompt:
        raise ValueError("empty prompt")
    explicit = rec.get("explicit_adapter")
    return TraceEvent(
        arrival_ms=float(rec["arrival_ms"]),
        prompt=prompt,
        intended_adapter=int(rec["intended_adapter"]),
        target_output_len=int(rec["target_output_len"]),
        explicit_adapter=None if explicit is None else int(explicit),
    )


def read_trace(path):
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(_parse_event(line))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed trace record ({exc})") from None
    return events


def trace_config_dict(config: WorkloadConfig):
    return asdict(config)
