"""Attention and residual-stream metrics over traces.

Attention metrics take row-stochastic ``T x T`` matrices (or stacks of them
along leading axes). Logs are natural throughout.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .errors import CaptureError, InvalidInputError, ZeroVectorWarning
from .kernels import active as _k
from .model import Trace

SINK_TAU = 0.3
ROW_SUM_TOL = 1e-6


class Grouping(str, Enum):
    NO_GROUPING = "NoGrouping"
    BY_RECURRENCE = "ByRecurrence"
    BY_LAYER = "ByLayer"


class AttentionMetric(str, Enum):
    COLSUM_CONCENTRATION = "colsum_concentration"
    SINK_RATE = "sink_rate"
    MIXING_SCORE = "mixing_score"
    MATRIX_ENTROPY = "matrix_entropy"
    RESIDUAL_NORM = "residual_norm"


CSV_COLUMNS = ("name", "grouping", "recurrence", "layer", "pct_depth", "value", "std")


def fmt(x) -> str:
    """17 significant digits: round-trips any float64."""
    if x is None:
        return ""
    x = float(x)
    if np.isnan(x):
        return "nan"
    return f"{x:.17g}"


@dataclass(frozen=True)
class MetricSeries:
    name: str
    grouping: Grouping
    index: np.ndarray  # n x 2 (recurrence, layer slot)
    values: np.ndarray
    dispersion: np.ndarray | None = None
    pct_depth: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "grouping", Grouping(self.grouping))
        idx = np.asarray(self.index, dtype=np.int64).reshape(-1, 2)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "index", idx)
        object.__setattr__(self, "values", vals)
        if idx.shape[0] != vals.shape[0]:
            raise InvalidInputError("values and index lengths differ")
        if self.dispersion is not None:
            disp = np.asarray(self.dispersion, dtype=np.float64).reshape(-1)
            if disp.shape != vals.shape or np.any(disp < 0):
                raise InvalidInputError("dispersion must match values and be non-negative")
            object.__setattr__(self, "dispersion", disp)
        if self.pct_depth is not None:
            object.__setattr__(self, "pct_depth", np.asarray(self.pct_depth, dtype=np.float64).reshape(-1))

    def __len__(self) -> int:
        return self.values.shape[0]

    def records(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            out.append(
                {
                    "name": self.name,
                    "grouping": self.grouping.value,
                    "recurrence": int(self.index[i, 0]),
                    "layer": int(self.index[i, 1]),
                    "pct_depth": None if self.pct_depth is None else float(self.pct_depth[i]),
                    "value": float(self.values[i]),
                    "std": None if self.dispersion is None else float(self.dispersion[i]),
                }
            )
        return out

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_COLUMNS)
        for r in self.records():
            w.writerow([r["name"], r["grouping"], r["recurrence"], r["layer"], fmt(r["pct_depth"]), fmt(r["value"]), fmt(r["std"])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=1)


# --- single-matrix metrics -------------------------------------------------


def _attn(attn, min_t: int = 1) -> np.ndarray:
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InvalidInputError(f"attention must be square in its last two axes, got {a.shape}")
    if a.shape[-1] < min_t:
        raise InvalidInputError(f"needs T >= {min_t}")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise InvalidInputError("attention must be finite and non-negative")
    if np.max(np.abs(a.sum(axis=-1) - 1.0)) > ROW_SUM_TOL:
        raise InvalidInputError("attention rows must sum to 1")
    return a


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def colsum_concentration(attn):
    """One minus the normalized entropy of the column-mass distribution c_j / T."""
    a = _attn(attn, min_t=2)
    return _scalar(_k.colsum_concentration(a))


def sink_scores(attn) -> np.ndarray:
    """Mean attention received by each key position (column means)."""
    return _k.sink_scores(_attn(attn))


def sink_score(attn, k: int):
    a = _attn(attn)
    if not 0 <= k < a.shape[-1]:
        raise IndexError(f"token {k} out of range for T={a.shape[-1]}")
    return _scalar(a[..., :, k].mean(axis=-1))


def sink_rate(per_head_scores, tau: float = SINK_TAU) -> float:
    """Fraction of heads whose sink score is at least ``tau``."""
    s = np.asarray(per_head_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise InvalidInputError("sink_rate needs at least one head")
    return float(np.count_nonzero(s >= tau)) / s.size


def head_sink_scores(attn_heads, k: int | None = None) -> np.ndarray:
    """Per-head sink score: at token ``k``, or at each head's strongest column when None."""
    scores = sink_scores(attn_heads)
    if k is None:
        return scores.max(axis=-1)
    if not 0 <= k < scores.shape[-1]:
        raise IndexError(f"token {k} out of range")
    return scores[..., k]


def mixing_score(attn):
    """Mean row entropy in nats."""
    return _scalar(_k.mixing_score(_attn(attn)))


def matrix_entropy(residual) -> float:
    """Von Neumann entropy of the trace-normalized cosine Gram matrix, over log T."""
    x = linalg.as_matrix(residual, "residual")
    norms = np.sqrt(np.sum(x * x, axis=1))
    keep = norms > 0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} zero rows", ZeroVectorWarning, stacklevel=2)
    x, norms = x[keep], norms[keep]
    t = x.shape[0]
    if t < 2:
        raise InvalidInputError("matrix_entropy needs at least 2 nonzero rows")
    u = x / norms[:, None]
    k = u @ u.T
    k = 0.5 * (k + k.T)
    lam = linalg.symmetric_eigenvalues(k / np.trace(k))
    lam = lam[lam > 0]
    h = -float(np.sum(lam * np.log(lam)))
    return float(np.clip(h / np.log(t), 0.0, 1.0))


# --- trace-level series ----------------------------------------------------


def pct_depth_for(index: np.ndarray, trace: Trace) -> np.ndarray:
    c = trace.config
    slots = c.prelude_layers + c.recurrent_layers + c.coda_layers
    return index[:, 1] / max(slots - 1, 1)


def _layout(trace: Trace, grouping: Grouping) -> np.ndarray:
    """Realized-order (recurrence, layer slot) index; ByLayer sorts by slot."""
    idx = np.array(trace.realized_index(), dtype=np.int64)
    if grouping is Grouping.BY_LAYER:
        order = np.lexsort((idx[:, 0], idx[:, 1]))
        return order
    return np.arange(idx.shape[0])


def _series(name, trace, grouping, per_depth, disp=None) -> MetricSeries:
    grouping = Grouping(grouping)
    idx = np.array(trace.realized_index(), dtype=np.int64)
    order = _layout(trace, grouping)
    idx = idx[order]
    vals = np.asarray(per_depth)[order]
    d = None if disp is None else np.asarray(disp)[order]
    return MetricSeries(name, grouping, idx, vals, d, pct_depth_for(idx, trace))


def residual_norms(trace: Trace, grouping: Grouping = Grouping.NO_GROUPING) -> MetricSeries:
    """Mean over tokens of the L2 norm of each residual vector, per realized block."""
    res = trace.realized_residuals()
    return _series("residual_norm", trace, grouping, np.sqrt(np.sum(res * res, axis=-1)).mean(axis=-1))


def _per_depth(trace: Trace, metric: AttentionMetric, sink_k: int | None) -> np.ndarray:
    if metric is AttentionMetric.RESIDUAL_NORM:
        res = trace.realized_residuals()
        return np.sqrt(np.sum(res * res, axis=-1)).mean(axis=-1)
    if metric is AttentionMetric.MATRIX_ENTROPY:
        return np.array([matrix_entropy(x) for x in trace.realized_residuals()])
    attn = trace.realized_attentions()  # depth x H x T x T
    if metric is AttentionMetric.COLSUM_CONCENTRATION:
        return np.asarray(colsum_concentration(attn)).mean(axis=-1)
    if metric is AttentionMetric.MIXING_SCORE:
        return np.asarray(mixing_score(attn)).mean(axis=-1)
    scores = head_sink_scores(attn, sink_k)
    return np.array([sink_rate(s) for s in scores])


def metric_over_trace(
    trace: Trace | list[Trace],
    metric: AttentionMetric,
    grouping: Grouping = Grouping.NO_GROUPING,
    sink_k: int | None = None,
) -> MetricSeries:
    """Per-depth metric (head-averaged), then mean and population std over the batch."""
    metric = AttentionMetric(metric)
    traces = trace if isinstance(trace, (list, tuple)) else [trace]
    if not traces:
        raise InvalidInputError("empty trace batch")
    needs_attn = metric in (AttentionMetric.COLSUM_CONCENTRATION, AttentionMetric.MIXING_SCORE, AttentionMetric.SINK_RATE)
    for t in traces:
        if needs_attn and t.attentions is None:
            raise CaptureError(f"{metric.value} needs captured attentions")
        if not needs_attn and t.recurrent is None:
            raise CaptureError(f"{metric.value} needs captured residuals")
    per = np.stack([_per_depth(t, metric, sink_k) for t in traces])
    return _series(metric.value, traces[0], grouping, per.mean(axis=0), per.std(axis=0))


def series_by_recurrence(series: MetricSeries) -> dict[int, MetricSeries]:
    """Split a ByRecurrence series into one line per recurrence."""
    out = {}
    for r in np.unique(series.index[:, 0]):
        m = series.index[:, 0] == r
        out[int(r)] = MetricSeries(
            series.name,
            series.grouping,
            series.index[m],
            series.values[m],
            None if series.dispersion is None else series.dispersion[m],
            None if series.pct_depth is None else series.pct_depth[m],
        )
    return out
