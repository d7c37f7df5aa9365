"""Device-side submodel cache: entropy-gated hits and LRU replacement.

Two simulator modes live here. ``run_trace_entropy`` drives real
submodels frame by frame against an edge (in-process or remote).
``run_trace_index`` is pure paging over a sequence of requested partition
indices and is what the Belady harness uses.
"""
from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .submodels import predictive_entropy, submodel_forward


class Decision(str, enum.Enum):
    HIT_LOCAL = "HIT_LOCAL"
    MISS_REMOTE = "MISS_REMOTE"


class EdgeUnavailable(ConnectionError):
    """The edge could not be reached after the allowed retries."""


def decide(entropy, threshold) -> Decision:
    """Local hit iff the active submodel's entropy is strictly below ``threshold``."""
    if entropy < 0:
        raise ValueError("entropy must be non-negative")
    return Decision.HIT_LOCAL if entropy < threshold else Decision.MISS_REMOTE


class CacheState:
    """LRU-ordered set of cached partition indices (LRU first, MRU last)."""

    def __init__(self, capacity=1, threshold=math.inf):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.threshold = float(threshold)
        self._entries: OrderedDict = OrderedDict()
        self.active = None

    @property
    def entries(self):
        return list(self._entries)

    def __contains__(self, index):
        return index in self._entries

    def __len__(self):
        return len(self._entries)

    def touch(self, index):
        if index not in self._entries:
            raise KeyError(f"partition {index} is not cached")
        self._entries.move_to_end(index)

    def replace_lru(self, index):
        """Insert ``index`` at MRU, evicting the LRU entry when full.

        The new entry becomes active. Returns the evicted index or ``None``.
        """
        if index in self._entries:
            raise ValueError(f"partition {index} is already cached")
        evicted = None
        if len(self._entries) >= self.capacity:
            evicted, _ = self._entries.popitem(last=False)
        self._entries[index] = None
        self.active = index
        return evicted

    def __repr__(self):
        return f"CacheState(capacity={self.capacity}, entries={self.entries}, active={self.active})"


class FIFOState(CacheState):
    """First-in first-out replacement; hits do not refresh recency."""

    def touch(self, index):
        if index not in self._entries:
            raise KeyError(f"partition {index} is not cached")


_POLICIES = {"lru": CacheState, "fifo": FIFOState}


def index_trace_states(requests, capacity, policy="lru"):
    """Yield ``(hit, frozenset(entries))`` after each request in index mode."""
    state = _POLICIES[policy](capacity)
    for r in requests:
        hit = r in state
        if hit:
            state.touch(r)
        else:
            state.replace_lru(r)
        yield hit, frozenset(state.entries)


def run_trace_index(requests, capacity, policy="lru") -> int:
    """Miss count of a request sequence under pure paging semantics."""
    return sum(not hit for hit, _ in index_trace_states(requests, capacity, policy))


def random_index_trace(K, length, locality, rng):
    """Requests that repeat the previous index with probability ``locality``."""
    out = np.empty(length, dtype=np.int64)
    for t in range(length):
        if t and rng.random() < locality:
            out[t] = out[t - 1]
        else:
            out[t] = rng.integers(1, K + 1)
    return out.tolist()


@dataclass
class BeladyReport:
    violations: int
    inclusion_failures: int
    traces: int
    misses: list = field(default_factory=list)


def belady_check(num_traces=100, K=8, max_capacity=None, trace_length=200,
                 locality=0.3, seed=0, policy="lru", traces=None) -> BeladyReport:
    """Count (trace, k) pairs whose misses grow from capacity k to k + 1.

    Also checks, step by step, that the cached set at capacity k is a subset
    of the set at k + 1 (the stack-inclusion property behind LRU's
    immunity). Supply ``traces`` to check specific sequences.
    """
    max_capacity = max_capacity or K
    if traces is None:
        rng = ad.make_rng(seed)
        traces = [random_index_trace(K, trace_length, locality, rng) for _ in range(num_traces)]
    violations = inclusion = 0
    all_misses = []
    for trace in traces:
        runs = [list(index_trace_states(trace, c, policy)) for c in range(1, max_capacity + 1)]
        misses = [sum(not h for h, _ in run) for run in runs]
        all_misses.append(misses)
        violations += sum(misses[i] < misses[i + 1] for i in range(len(misses) - 1))
        for small, big in zip(runs, runs[1:]):
            inclusion += sum(not s <= b for (_, s), (_, b) in zip(small, big))
    return BeladyReport(violations, inclusion, len(traces), all_misses)


# -- entropy mode --------------------------------------------------------------

@dataclass
class TraceRecord:
    frame_id: int
    decision: Decision
    entropy: float
    active: int | None
    selected: int | None
    evicted: int | None
    label: int
    predicted: int
    source: str = "local"  # local | edge | none
    degraded: bool = False
    fetched: bool = False


class InProcessEdge:
    """Edge interface backed directly by a trained bundle."""

    def __init__(self, bundle):
        self.bundle = bundle

    def infer(self, frame):
        return self.bundle.infer(frame)

    def fetch(self, k):
        if not 1 <= k <= self.bundle.K:
            raise KeyError(f"unknown partition {k}")
        return self.bundle.submodels[k - 1]


def run_trace_entropy(frames, labels, edge, state: CacheState, models=None):
    """Replay a stream through the device cache; returns one record per frame.

    Each frame is first scored by the active submodel. Below-threshold
    entropy is a local hit. Otherwise the edge classifies the frame and
    names the partition it should go to; a cached partition is simply
    re-activated, an absent one is fetched and installed under LRU.
    ``edge`` needs ``infer(frame) -> (label, partition, probs)`` and
    ``fetch(k) -> SubmodelParams`` and may raise :class:`EdgeUnavailable`.
    """
    models = {} if models is None else models
    records = []
    for i, (x, y) in enumerate(zip(frames, labels)):
        local_pred, H = -1, math.inf
        if state.active is not None:
            probs = submodel_forward(x, models[state.active])
            H = float(predictive_entropy(probs))
            local_pred = int(np.argmax(probs))
            if decide(H, state.threshold) is Decision.HIT_LOCAL:
                state.touch(state.active)
                records.append(TraceRecord(i, Decision.HIT_LOCAL, H, state.active, None,
                                           None, int(y), local_pred))
                continue
        try:
            edge_label, k, _ = edge.infer(x)
        except EdgeUnavailable:
            records.append(TraceRecord(i, Decision.MISS_REMOTE, H, state.active, None, None,
                                       int(y), local_pred,
                                       "local" if local_pred >= 0 else "none", True))
            continue
        evicted, degraded, fetched = None, False, False
        if k in state:
            state.touch(k)
            state.active = k
        else:
            try:
                params = edge.fetch(k)
            except EdgeUnavailable:
                degraded = True
            else:
                evicted = state.replace_lru(k)
                models[k] = params
                fetched = True
                if evicted is not None:
                    models.pop(evicted, None)
        records.append(TraceRecord(i, Decision.MISS_REMOTE, H, state.active, k, evicted,
                                   int(y), int(edge_label), "edge", degraded, fetched))
    return records


def summarize_trace(records):
    n = len(records)
    hits = sum(r.decision is Decision.HIT_LOCAL for r in records)
    local = sum(r.source == "local" for r in records)
    correct = sum(r.predicted == r.label for r in records)
    return {
        "frames": n,
        "hits": hits,
        "misses": n - hits,
        "hit_rate": hits / n if n else 0.0,
        "accuracy": correct / n if n else 0.0,
        "local_frac": local / n if n else 0.0,
        "degraded": sum(r.degraded for r in records),
        "fetches": sum(r.fetched for r in records),
    }
