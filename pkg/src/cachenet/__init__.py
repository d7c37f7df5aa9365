"""Model caching for edge inference with knowledge-partitioned submodels."""
from .bundle import Bundle, load_bundle, save_bundle
from .cache import CacheState, Decision, belady_check, decide, run_trace_entropy, run_trace_index
from .harness import StreamConfig, gen_dataset, gen_stream
from .sinfovae import SInfoVAE, SInfoVAEConfig
from .submodels import CacheNet, SubmodelParams, predictive_entropy

__version__ = "0.1.0"

__all__ = [
    "Bundle", "CacheNet", "CacheState", "Decision", "SInfoVAE", "SInfoVAEConfig",
    "StreamConfig", "SubmodelParams", "belady_check", "decide", "gen_dataset",
    "gen_stream", "load_bundle", "predictive_entropy", "run_trace_entropy",
    "run_trace_index", "save_bundle",
]
