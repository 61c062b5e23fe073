"""Adapter files on disk, a fixed pool of adapter-sized blocks, and an LRU cache.

Binary adapter layout (all little-endian)::

    0   8s  magic  b"ELORADPT"
    8   u32 version (1)
    12  u32 d
    16  u32 r
    20  u32 L
    24  f64 scale
    32  L x (A[r, d] then B[d, r]) row-major f64

The header is 32 bytes, so every matrix view into a block stays 8-byte
aligned.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError
from .lora import LoraPair
from .model import FullAdapter

logger = logging.getLogger(__name__)

MAGIC = b"ELORADPT"
VERSION = 1
_HEADER = struct.Struct("<8sIIIId")
HEADER_SIZE = _HEADER.size
MANIFEST = "manifest.json"


def adapter_nbytes(d, r, num_layers):
    return HEADER_SIZE + num_layers * 2 * r * d * 8


def encode_adapter(adapter: FullAdapter) -> bytes:
    first = adapter.layers[0]
    parts = [_HEADER.pack(MAGIC, VERSION, first.dim, first.rank, len(adapter.layers), first.scale)]
    for p in adapter.layers:
        parts.append(np.ascontiguousarray(p.a, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.b, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_adapter(buf, adapter_id, expect=None) -> FullAdapter:
    """Build a FullAdapter whose matrices are views into ``buf``.

    ``expect`` is an optional ``(d, r, L)`` tuple checked against the header.
    """
    mv = memoryview(buf).cast("B")
    if len(mv) < HEADER_SIZE:
        raise FormatError(f"adapter {adapter_id}: truncated header ({len(mv)} bytes)")
    magic, version, d, r, num_layers, scale = _HEADER.unpack_from(mv, 0)
    if magic != MAGIC:
        raise FormatError(f"adapter {adapter_id}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"adapter {adapter_id}: unsupported version {version}")
    if expect is not None and (d, r, num_layers) != tuple(expect):
        raise FormatError(
            f"adapter {adapter_id}: dims {(d, r, num_layers)} do not match registry {tuple(expect)}"
        )
    size = adapter_nbytes(d, r, num_layers)
    if len(mv) != size:
        raise FormatError(f"adapter {adapter_id}: expected {size} bytes, got {len(mv)}")
    flat = np.frombuffer(mv, dtype="<f8", offset=HEADER_SIZE)
    step = r * d
    layers = []
    for i in range(num_layers):
        a = flat[2 * i * step:(2 * i + 1) * step].reshape(r, d)
        b = flat[(2 * i + 1) * step:(2 * i + 2) * step].reshape(d, r)
        layers.append(LoraPair(a, b, scale))
    return FullAdapter(adapter_id, tuple(layers))


def write_adapter_file(path, adapter: FullAdapter):
    Path(path).write_bytes(encode_adapter(adapter))


def read_adapter_file(path, adapter_id=0, expect=None) -> FullAdapter:
    data = bytearray(Path(path).read_bytes())
    return decode_adapter(data, adapter_id, expect)


@dataclass(frozen=True)
class AdapterRegistry:
    root: Path
    n: int
    d: int
    r: int
    num_layers: int
    seed: int
    scale: float = 1.0

    @property
    def block_size(self):
        return adapter_nbytes(self.d, self.r, self.num_layers)

    @property
    def shape(self):
        return (self.d, self.r, self.num_layers)

    def path(self, adapter_id):
        if not (isinstance(adapter_id, (int, np.integer)) and 0 <= adapter_id < self.n):
            raise KeyError(f"unknown adapter id {adapter_id!r}")
        return self.root / f"adapter_{int(adapter_id):05d}.bin"

    def __contains__(self, adapter_id):
        return isinstance(adapter_id, (int, np.integer)) and 0 <= adapter_id < self.n

    def load(self, adapter_id) -> FullAdapter:
        """Read an adapter into freshly allocated memory (bypasses the pool)."""
        return read_adapter_file(self.path(adapter_id), int(adapter_id), self.shape)

    def validate(self):
        for i in range(self.n):
            p = self.path(i)
            if not p.is_file() or p.stat().st_size != self.block_size:
                raise FormatError(f"adapter file {p} missing or wrong size")


def open_registry(root, validate=True) -> AdapterRegistry:
    root = Path(root)
    try:
        meta = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST} in {root}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / MANIFEST}: {exc}") from None
    try:
        reg = AdapterRegistry(
            root, int(meta["n"]), int(meta["d"]), int(meta["r"]),
            int(meta["L"]), int(meta["seed"]), float(meta.get("scale", 1.0)),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from None
    if validate:
        reg.validate()
    return reg


def make_adapter(adapter_id, d, r, num_layers, seed, scale=1.0, perturbation=0.5):
    """Seeded random adapter; ``B`` is non-zero so each adapter changes the model."""
    rng = np.random.default_rng([seed, adapter_id])
    a_bound = 1.0 / np.sqrt(d)
    b_bound = perturbation / np.sqrt(r)
    layers = tuple(
        LoraPair(
            rng.uniform(-a_bound, a_bound, size=(r, d)),
            rng.uniform(-b_bound, b_bound, size=(d, r)),
            scale,
        )
        for _ in range(num_layers)
    )
    return FullAdapter(adapter_id, layers)


def generate_adapters(root, n, d, r, num_layers, seed, scale=1.0, perturbation=0.5) -> AdapterRegistry:
    if n < 1:
        raise ConfigError("need at least one adapter")
    if not 0 < r < d:
        raise ConfigError(f"rank must satisfy 0 < r < d (r={r}, d={d})")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    reg = AdapterRegistry(root, n, d, r, num_layers, seed, scale)
    for i in range(n):
        write_adapter_file(reg.path(i), make_adapter(i, d, r, num_layers, seed, scale, perturbation))
    manifest = {"n": n, "d": d, "r": r, "L": num_layers, "seed": seed, "scale": scale}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return reg


class MemoryPool:
    """``capacity`` byte buffers allocated once; free blocks kept on a stack."""

    def __init__(self, block_size, capacity):
        if capacity < 1:
            raise ConfigError("pool capacity must be >= 1")
        self.block_size = block_size
        self.capacity = capacity
        self.allocations = 0
        self._blocks = []
        for _ in range(capacity):
            self._blocks.append(np.empty(block_size, dtype=np.uint8))
            self.allocations += 1
        self._free = list(range(capacity - 1, -1, -1))

    @property
    def free_count(self):
        return len(self._free)

    @property
    def in_use_count(self):
        return self.capacity - len(self._free)

    def acquire(self):
        if not self._free:
            raise RuntimeError("memory pool exhausted")
        return self._free.pop()

    def release(self, handle):
        if handle in self._free:
            raise RuntimeError(f"block {handle} released twice")
        self._free.append(handle)

    def buffer(self, handle):
        return self._blocks[handle]


class CacheFull(RuntimeError):
    """Every resident adapter is pinned, so nothing can be evicted."""


class AdapterCache:
    """LRU set of at most ``capacity`` adapters living in pool blocks.

    Recency order is kept by an ``OrderedDict`` (hash index over a doubly linked
    list); the last entry is the most recently used. Pinned adapters are never
    evicted.
    """

    def __init__(self, registry: AdapterRegistry, capacity, pool: MemoryPool | None = None):
        if capacity < 1:
            raise ConfigError("cache capacity must be >= 1")
        self.registry = registry
        self.capacity = capacity
        self.pool = pool if pool is not None else MemoryPool(registry.block_size, capacity)
        if self.pool.capacity != capacity or self.pool.block_size != registry.block_size:
            raise ConfigError("pool geometry does not match cache")
        self._entries: OrderedDict[int, tuple[int, FullAdapter]] = OrderedDict()
        self._pins: dict[int, int] = {}
        self.h_cache = 0
        self.h_total = 0
        self.disk_reads = 0
        self.evictions: list[int] = []

    def __len__(self):
        return len(self._entries)

    def __contains__(self, adapter_id):
        return adapter_id in self._entries

    def residents(self):
        """Resident ids, most recently used first."""
        return list(reversed(self._entries))

    @property
    def hit_rate(self):
        return self.h_cache / self.h_total if self.h_total else 0.0

    def _victim(self):
        for adapter_id in self._entries:
            if not self._pins.get(adapter_id):
                return adapter_id
        return None

    def can_admit(self, adapter_id):
        """True when ``get(adapter_id)`` would not raise CacheFull."""
        return adapter_id in self._entries or self.pool.free_count > 0 or self._victim() is not None

    def get(self, adapter_id) -> FullAdapter:
        if adapter_id not in self.registry:
            raise KeyError(f"unknown adapter id {adapter_id!r}")
        self.h_total += 1
        entry = self._entries.get(adapter_id)
        if entry is not None:
            self.h_cache += 1
            self._entries.move_to_end(adapter_id)
            return entry[1]
        return self._load(adapter_id)

    def _load(self, adapter_id):
        if self.pool.free_count == 0:
            victim = self._victim()
            if victim is None:
                raise CacheFull("all resident adapters are pinned")
            handle, _ = self._entries.pop(victim)
            self.pool.release(handle)
            self.evictions.append(victim)
            logger.debug("evicted adapter %d", victim)
        handle = self.pool.acquire()
        block = self.pool.buffer(handle)
        try:
            with open(self.registry.path(adapter_id), "rb") as fh:
                got = fh.readinto(block)
                extra = fh.read(1)
            if got != block.size or extra:
                raise FormatError(
                    f"adapter {adapter_id}: file size does not match block size {block.size}"
                )
            adapter = decode_adapter(block, int(adapter_id), self.registry.shape)
        except BaseException:
            self.pool.release(handle)
            raise
        self.disk_reads += 1
        self._entries[adapter_id] = (handle, adapter)
        return adapter

    def prefill(self, seed):
        """Load ``min(capacity, n)`` random distinct adapters without touching H."""
        if self._entries:
            raise RuntimeError("prefill requires an empty cache")
        count = min(self.capacity, self.registry.n)
        rng = np.random.default_rng(seed)
        for adapter_id in rng.choice(self.registry.n, size=count, replace=False):
            self._load(int(adapter_id))

    def pin(self, adapter_id):
        if adapter_id not in self._entries:
            raise KeyError(f"adapter {adapter_id} is not resident")
        self._pins[adapter_id] = self._pins.get(adapter_id, 0) + 1

    def unpin(self, adapter_id):
        count = self._pins.get(adapter_id, 0)
        if count <= 1:
            self._pins.pop(adapter_id, None)
        else:
            self._pins[adapter_id] = count - 1

    def check_invariants(self):
        assert len(self._entries) <= self.capacity
        assert self.pool.free_count + len(self._entries) == self.capacity
        assert self.h_cache <= self.h_total
        assert self.pool.allocations == self.capacity


def hit_rate(cache: AdapterCache) -> float:
    return cache.hit_rate


def prefill(cache: AdapterCache, seed):
    cache.prefill(seed)
