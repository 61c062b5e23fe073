"""Multi-tenant LoRA serving on a deterministic toy model.

Adaptive adapter selection, an LRU adapter cache over a pre-allocated block
pool, cross-adapter batched LoRA inference, synthetic workloads and serving
metrics.
"""

from .engine import CompletionRecord, CostModel, Engine, EngineConfig, Request, SlotState
from .lora import LoraPair, batch_lora_forward, group_by_adapter, matmul, merge_adapter, unmerged_forward
from .model import FullAdapter, ToyModelConfig, build_model, generate
from .router import AdapterRouter, HashedBagFeaturizer, SelectionConfig, select_adapter
from .store import AdapterCache, MemoryPool, generate_adapters, open_registry
from .workload import TraceEvent, WorkloadConfig, generate_trace, power_law_pmf

__version__ = "0.1.0"

__all__ = [
    "AdapterCache", "AdapterRouter", "CompletionRecord", "CostModel", "Engine", "EngineConfig",
    "FullAdapter", "HashedBagFeaturizer", "LoraPair", "MemoryPool", "Request", "SelectionConfig",
    "SlotState", "ToyModelConfig", "TraceEvent", "WorkloadConfig", "batch_lora_forward",
    "build_model", "generate", "generate_adapters", "generate_trace", "group_by_adapter",
    "matmul", "merge_adapter", "open_registry", "power_law_pmf", "select_adapter",
    "unmerged_forward",
]
