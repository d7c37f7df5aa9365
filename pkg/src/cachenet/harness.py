"""Synthetic temporally-local streams, experiment runner and reports.

Classes are Gaussian clusters living near a random low-dimensional subspace
of the input space. A stream stays in its current class with probability
``1 - 1/L`` per frame and otherwise jumps to a different class chosen
uniformly, so run lengths are geometric with mean ``L``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cache import CacheState, InProcessEdge, run_trace_entropy, summarize_trace

# child seed streams derived from one root seed
_GEOMETRY, _TRAIN, _TEST, _STREAM = range(4)


@dataclass(frozen=True)
class StreamConfig:
    num_classes: int = 8
    input_dim: int = 32
    latent_dim: int = 6
    class_spread: float = 2.0
    within_std: float = 0.6
    ambient_std: float = 0.05
    samples_per_class: int = 250
    run_length: float = 50.0
    frames: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.run_length < 1:
            raise ValueError("mean run length L must be >= 1")
        if self.frames < 0 or self.samples_per_class < 1:
            raise ValueError("frames must be >= 0 and samples_per_class >= 1")
        if self.latent_dim < 1 or self.input_dim < 1:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class Stream:
    frames: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _rng(cfg: StreamConfig, which: int):
    return ad.make_rng(np.random.SeedSequence([cfg.seed, which]))


def cluster_geometry(cfg: StreamConfig):
    """``(centers, mixing)``: class centres in latent space and the embedding."""
    rng = _rng(cfg, _GEOMETRY)
    centers = rng.normal(0.0, cfg.class_spread, size=(cfg.num_classes, cfg.latent_dim))
    mixing, _ = np.linalg.qr(rng.normal(size=(cfg.input_dim, cfg.latent_dim)))
    return centers, mixing.T  # rows orthonormal


def sample_class(cfg: StreamConfig, labels, rng):
    centers, mixing = cluster_geometry(cfg)
    labels = np.asarray(labels, dtype=np.int64)
    lat = centers[labels] + rng.normal(0.0, cfg.within_std, size=(len(labels), cfg.latent_dim))
    x = lat @ mixing + rng.normal(0.0, cfg.ambient_std, size=(len(labels), cfg.input_dim))
    return x.astype(np.float32)


def gen_dataset(cfg: StreamConfig, split="train", samples_per_class=None):
    """Balanced labelled dataset; ``split`` picks an independent seed stream."""
    which = {"train": _TRAIN, "test": _TEST}[split]
    rng = _rng(cfg, which)
    n = samples_per_class or cfg.samples_per_class
    y = rng.permutation(np.repeat(np.arange(cfg.num_classes), n))
    return sample_class(cfg, y, rng), y


def class_sequence(num_classes, run_length, n, rng):
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    stay = 1.0 - 1.0 / run_length
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(num_classes)
    switches = rng.random(n) >= stay
    jumps = rng.integers(1, num_classes, size=n)
    for t in range(1, n):
        out[t] = (out[t - 1] + jumps[t]) % num_classes if switches[t] else out[t - 1]
    return out


def gen_stream(cfg: StreamConfig) -> Stream:
    rng = _rng(cfg, _STREAM)
    labels = class_sequence(cfg.num_classes, cfg.run_length, cfg.frames, rng)
    return Stream(sample_class(cfg, labels, rng), labels)


def run_lengths(labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return np.zeros(0, dtype=np.int64)
    cuts = np.flatnonzero(np.diff(labels)) + 1
    return np.diff(np.concatenate([[0], cuts, [len(labels)]]))


# -- experiments ---------------------------------------------------------------

DEFAULT_THRESHOLDS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0)


@dataclass
class ExperimentReport:
    thresholds: list
    rows: list  # one summarize_trace() dict per threshold
    edge_accuracy: float
    histogram: np.ndarray  # (K, C) counts of edge-side selections per class
    traces: dict = field(default_factory=dict)

    @property
    def hit_rates(self):
        return [r["hit_rate"] for r in self.rows]

    @property
    def accuracies(self):
        return [r["accuracy"] for r in self.rows]


def partition_histogram(selected, labels, K, C):
    hist = np.zeros((K, C), dtype=np.int64)
    np.add.at(hist, (np.asarray(selected) - 1, np.asarray(labels)), 1)
    return hist


def histogram_entropy(hist):
    """Mean over non-empty partitions of the class-distribution entropy (nats)."""
    hist = np.asarray(hist, dtype=np.float64)
    rows = hist[hist.sum(axis=1) > 0]
    p = rows / rows.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return float(H.mean())


def monotonicity_violation(values):
    """Total drop mass of a sequence that should be non-decreasing."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum(np.clip(v[:-1] - v[1:], 0, None)))


def run_experiment(bundle, stream: Stream, thresholds=DEFAULT_THRESHOLDS, capacity=1,
                   edge_factory=None, keep_traces=False) -> ExperimentReport:
    """Sweep entropy thresholds over one stream, one fresh cache per threshold.

    ``edge_factory`` builds the edge for each cell; the default is the
    in-process edge, a remote client gives protocol mode.
    """
    edge_factory = edge_factory or (lambda: InProcessEdge(bundle))
    rows, traces = [], {}
    for T in thresholds:
        recs = run_trace_entropy(stream.frames, stream.labels, edge_factory(),
                                 CacheState(capacity, T))
        rows.append(summarize_trace(recs))
        if keep_traces:
            traces[T] = recs
    selected = bundle.select(stream.frames) if len(stream) else np.zeros(0, dtype=np.int64)
    edge_pred = bundle.predict(stream.frames) if len(stream) else np.zeros(0, dtype=np.int64)
    edge_acc = float(np.mean(edge_pred == stream.labels)) if len(stream) else 0.0
    hist = partition_histogram(selected, stream.labels, bundle.K, len(bundle.classes))
    return ExperimentReport(list(thresholds), rows, edge_acc, hist, traces)


# -- CSV -----------------------------------------------------------------------

LOSS_COLUMNS = ("epoch", "J", "JF", "LVAE", "LVAE2")
TRACE_COLUMNS = ("frame_id", "decision", "entropy", "active", "evicted", "label", "pred")
REPORT_COLUMNS = ("threshold", "hit_rate", "accuracy", "local_frac")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def losses_csv(log):
    return _csv(LOSS_COLUMNS, ([r[c] for c in LOSS_COLUMNS] for r in log))


def trace_csv(records):
    return _csv(TRACE_COLUMNS, ((r.frame_id, r.decision.value, r.entropy, r.active,
                                 r.evicted, r.label, r.predicted) for r in records))


def report_csv(report: ExperimentReport):
    return _csv(REPORT_COLUMNS, ((T, r["hit_rate"], r["accuracy"], r["local_frac"])
                                 for T, r in zip(report.thresholds, report.rows)))


def histogram_csv(hist):
    hist = np.asarray(hist)
    cols = ("partition",) + tuple(f"class_{c}" for c in range(hist.shape[1]))
    return _csv(cols, ((k + 1, *row) for k, row in enumerate(hist.tolist())))


def read_trace_csv(text):
    """Parse a trace CSV back into dicts of typed values."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({
            "frame_id": int(row["frame_id"]), "decision": row["decision"],
            "entropy": float(row["entropy"]),
            "active": int(row["active"]) if row["active"] else None,
            "evicted": int(row["evicted"]) if row["evicted"] else None,
            "label": int(row["label"]), "pred": int(row["pred"]),
        })
    return out


def summarize_trace_rows(rows):
    """Hit rate and accuracy from parsed trace CSV rows (no source column, so
    local fraction counts hits only)."""
    n = len(rows)
    hits = sum(r["decision"] == "HIT_LOCAL" for r in rows)
    correct = sum(r["pred"] == r["label"] for r in rows)
    return {"frames": n, "hit_rate": hits / n if n else 0.0,
            "accuracy": correct / n if n else 0.0, "local_frac": hits / n if n else 0.0}
