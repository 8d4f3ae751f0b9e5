"""Fixed points, similarity structure and attention-stability bounds over traces."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import linalg
from .errors import CaptureError, InsufficientRecurrencesError, InvalidInputError, RankDeficientWarning, RecurrenceRangeError
from .metrics import Grouping, MetricSeries, fmt, pct_depth_for
from .model import (
    ModelConfig,
    ModelWeights,
    Positional,
    Trace,
    _checked_block,
    attention_scores,
    inject,
    recurrence_step,
    shifted_recurrence_step,
)

DEFAULT_REFERENCE = 128
FINAL_WINDOW = 8
# convergence: final-window mean distance to the reference state, relative to the mean state norm
CONVERGENCE_TOL = 1e-4
DEGENERACY_EPS = 1e-3
SOFTMAX_LIPSCHITZ = 0.5
BOUND_SLACK = 1e-9


def _require_residuals(trace: Trace) -> np.ndarray:
    if trace.recurrent is None:
        raise CaptureError("trace did not capture residuals")
    return trace.recurrent


def _flat_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine over the last two axes (states flattened), broadcasting the rest."""
    num = np.sum(a * b, axis=(-2, -1))
    den = np.sqrt(np.sum(a * a, axis=(-2, -1)) * np.sum(b * b, axis=(-2, -1)))
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return np.clip(out, -1.0, 1.0)


# --- successive differences -------------------------------------------------


def _successive(trace: Trace, name: str, fn) -> MetricSeries:
    rec = _require_residuals(trace)
    loops, k = rec.shape[:2]
    if loops < 2:
        raise InsufficientRecurrencesError("successive differences need at least 2 recurrences")
    p = trace.config.prelude_layers
    idx, vals = [], []
    for j in range(k):
        v = fn(rec[1:, j], rec[:-1, j])
        for r in range(1, loops):
            idx.append((r, p + j))
            vals.append(v[r - 1])
    idx = np.array(idx, dtype=np.int64)
    return MetricSeries(name, Grouping.BY_LAYER, idx, np.array(vals), None, pct_depth_for(idx, trace))


def successive_differences(trace: Trace) -> MetricSeries:
    """Frobenius norm of X[l, r] - X[l, r-1] for every recurrent layer and r >= 1."""
    return _successive(trace, "successive_difference", lambda a, b: np.sqrt(np.sum((a - b) ** 2, axis=(-2, -1))))


def successive_cosines(trace: Trace) -> MetricSeries:
    return _successive(trace, "successive_cosine", _flat_cos)


# --- fixed points ------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointReport:
    layers: np.ndarray  # layer slots of the recurrent blocks
    reference: int  # 1-based recurrence used as the approximate fixed point
    distances: np.ndarray  # k x reference, Frobenius distance at recurrence r to the reference
    cosines: np.ndarray  # k x reference
    relative_window: np.ndarray  # k, final-window mean distance / mean state norm
    cosine_window: np.ndarray  # k, final-window mean (1 - cos)
    converged: np.ndarray  # k bools
    fixed_point_cosines: np.ndarray  # k x k cosines between layer fixed points
    degenerate: bool
    tol: float = CONVERGENCE_TOL
    eps_deg: float = DEGENERACY_EPS

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "tol": self.tol,
            "eps_deg": self.eps_deg,
            "degenerate": bool(self.degenerate),
            "layers": [
                {
                    "layer": int(self.layers[i]),
                    "converged": bool(self.converged[i]),
                    "relative_window": float(self.relative_window[i]),
                    "cosine_window": float(self.cosine_window[i]),
                    "distances": self.distances[i].tolist(),
                    "cosines": self.cosines[i].tolist(),
                }
                for i in range(len(self.layers))
            ],
            "fixed_point_cosines": self.fixed_point_cosines.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "recurrence", "distance", "cosine"))
        for i, layer in enumerate(self.layers):
            for r in range(self.reference):
                w.writerow((int(layer), r + 1, fmt(self.distances[i, r]), fmt(self.cosines[i, r])))
        return buf.getvalue()


def fixed_point_report(
    trace: Trace,
    reference: int = DEFAULT_REFERENCE,
    window: int = FINAL_WINDOW,
    tol: float = CONVERGENCE_TOL,
    eps_deg: float = DEGENERACY_EPS,
) -> FixedPointReport:
    """Distances and cosines of each recurrent layer's state to its state at ``reference``.

    A layer is converged when its mean Frobenius distance to the reference
    state over the ``window`` recurrences before the reference, divided by the
    mean state norm over the same window, is at most ``tol``. The matching
    mean cosine distance is reported alongside.
    The report is degenerate when every pair of layer fixed points has cosine
    at least ``1 - eps_deg``.
    """
    rec = _require_residuals(trace)
    loops, k = rec.shape[:2]
    if not 1 <= reference <= loops:
        raise RecurrenceRangeError(f"reference {reference} outside 1..{loops}")
    ref = rec[reference - 1]  # k x T x D
    states = rec[:reference].transpose(1, 0, 2, 3)  # k x R x T x D
    dist = np.sqrt(np.sum((states - ref[:, None]) ** 2, axis=(-2, -1)))
    cos = _flat_cos(states, ref[:, None])
    lo = max(0, reference - 1 - window)
    norms = np.sqrt(np.sum(states**2, axis=(-2, -1)))
    if reference > 1:
        w_dist = dist[:, lo : reference - 1].mean(axis=1)
        w_norm = norms[:, lo : reference - 1].mean(axis=1)
        rel = np.divide(w_dist, w_norm, out=np.zeros_like(w_dist), where=w_norm > 0)
        cwin = (1.0 - cos[:, lo : reference - 1]).mean(axis=1)
    else:
        rel = np.zeros(k)
        cwin = np.zeros(k)
    converged = rel <= tol
    fp_cos = _flat_cos(ref[:, None], ref[None, :])
    np.fill_diagonal(fp_cos, 1.0)
    degenerate = bool(fp_cos.min() >= 1.0 - eps_deg) if k > 1 else True
    layers = np.arange(k) + trace.config.prelude_layers
    return FixedPointReport(layers, reference, dist, cos, rel, cwin, converged, fp_cos, degenerate, tol, eps_deg)


# --- pairwise similarity ------------------------------------------------------


class SimilarityKind(str, Enum):
    ATTENTION_FROBENIUS = "AttentionFrobenius"
    RESIDUAL_COSINE = "ResidualCosine"


@dataclass(frozen=True)
class SimilarityMatrix:
    kind: SimilarityKind
    values: np.ndarray
    index: np.ndarray  # n x 2 (recurrence, layer slot)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def lag_mean(self, lag: int, start: int = 0) -> float:
        """Mean of entries (i, i + lag) with i >= start."""
        n = self.n
        i = np.arange(start, n - lag)
        if i.size == 0:
            raise InvalidInputError(f"no pairs at lag {lag}")
        return float(self.values[i, i + lag].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("kind", "i", "j", "value"))
        for i in range(self.n):
            for j in range(self.n):
                w.writerow((self.kind.value, i, j, fmt(self.values[i, j])))
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind.value, "n": self.n, "index": self.index.tolist(), "values": self.values.tolist()})


def _attention_frobenius(attn: np.ndarray) -> np.ndarray:
    # attn: n x H x T x T
    n = attn.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1):
        d = np.sqrt(np.sum((attn[i + 1 :] - attn[i]) ** 2, axis=(-2, -1)))  # (n-i-1) x H
        out[i, i + 1 :] = d.mean(axis=1)
    return out + out.T


def _residual_cosine(res: np.ndarray) -> np.ndarray:
    n = res.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1):
        out[i, i + 1 :] = linalg.rowwise_cosine(res[i + 1 :], res[i][None]).mean(axis=1)
    out = out + out.T
    np.fill_diagonal(out, 1.0)
    return out


def pairwise_similarity(trace: Trace | list[Trace], kind: SimilarityKind) -> SimilarityMatrix:
    """Realized-depth x realized-depth similarity, averaged over batch and heads (or tokens)."""
    kind = SimilarityKind(kind)
    traces = trace if isinstance(trace, (list, tuple)) else [trace]
    if not traces:
        raise InvalidInputError("empty trace batch")
    mats = []
    for t in traces:
        if kind is SimilarityKind.ATTENTION_FROBENIUS:
            mats.append(_attention_frobenius(t.realized_attentions()))
        else:
            mats.append(_residual_cosine(t.realized_residuals()))
    vals = np.mean(mats, axis=0)
    vals = 0.5 * (vals + vals.T)
    if kind is SimilarityKind.ATTENTION_FROBENIUS:
        np.fill_diagonal(vals, 0.0)
    else:
        np.fill_diagonal(vals, 1.0)
    return SimilarityMatrix(kind, vals, np.array(traces[0].realized_index(), dtype=np.int64))


# --- attention stability bound ----------------------------------------------------


def rotation_matrix(offset: int, d_head: int, base: float) -> np.ndarray:
    """d x d matrix of the rotate-half rotary map at relative position ``offset``."""
    half = d_head // 2
    ang = offset * base ** (-np.arange(half) / half)
    c, s = np.cos(ang), np.sin(ang)
    r = np.zeros((d_head, d_head))
    i = np.arange(half)
    r[i, i] = c
    r[i, i + half] = -s
    r[i + half, i] = s
    r[i + half, i + half] = c
    return r


def head_kappa(wq: np.ndarray, wk: np.ndarray, config: ModelConfig, n_tokens: int) -> float:
    """Frobenius norm of the bilinear score form of one head.

    Without rotary this is ||W_Q W_K^T||_F. With rotary the form depends on
    the relative offset, so the max over offsets is taken, evaluated through
    d x d Gram matrices.
    """
    if config.positional is Positional.NONE:
        return float(np.linalg.norm(wq @ wk.T))
    gq = wq.T @ wq
    gk = wk.T @ wk
    best = 0.0
    for off in range(-(n_tokens - 1), n_tokens):
        r = rotation_matrix(off, wq.shape[1], config.rope_base)
        best = max(best, float(np.sum((r @ gk @ r.T) * gq)))
    return float(np.sqrt(max(best, 0.0)))


def layer_kappas(weights: ModelWeights, layer: int, n_tokens: int) -> np.ndarray:
    cfg = weights.config
    lw = weights.layers[layer]
    return np.array(
        [head_kappa(lw.head_block("wq", h, cfg.d_head), lw.head_block("wk", h, cfg.d_head), cfg, n_tokens) for h in range(cfg.n_heads)]
    )


@dataclass(frozen=True)
class BoundRecord:
    layer: int
    recurrence: int
    lhs: float
    rhs: float
    holds: bool
    head_lhs: tuple = field(default=())
    head_rhs: tuple = field(default=())


def bound_terms(x_prev, x_next, a_prev, a_next, kappas, bound_b: float, d_head: int):
    """(lhs, rhs, per-head lhs, per-head rhs) for one pair of attention inputs."""
    dx = float(np.sqrt(np.sum((x_next - x_prev) ** 2)))
    head_lhs = np.sqrt(np.sum((a_next - a_prev) ** 2, axis=(-2, -1)))
    head_rhs = SOFTMAX_LIPSCHITZ * 2.0 * bound_b * kappas / np.sqrt(d_head) * dx
    return float(np.sqrt(np.sum(head_lhs**2))), float(np.sqrt(np.sum(head_rhs**2))), head_lhs, head_rhs


def prop2_pair(x_prev, x_next, weights: ModelWeights, layer: int, kappas=None, bound_b=None) -> BoundRecord:
    """Evaluate both sides of the bound for two arbitrary attention inputs."""
    cfg = weights.config
    lw = weights.layers[layer]
    x_prev = linalg.as_matrix(x_prev)
    x_next = linalg.as_matrix(x_next)
    if kappas is None:
        kappas = layer_kappas(weights, layer, x_prev.shape[0])
    if bound_b is None:
        bound_b = max(np.linalg.norm(x_prev), np.linalg.norm(x_next))
    a_prev = linalg.row_softmax(attention_scores(x_prev, lw, cfg), causal=True)
    a_next = linalg.row_softmax(attention_scores(x_next, lw, cfg), causal=True)
    lhs, rhs, hl, hr = bound_terms(x_prev, x_next, a_prev, a_next, kappas, bound_b, cfg.d_head)
    ok = bool(np.all(hl <= hr + BOUND_SLACK) and lhs <= rhs + BOUND_SLACK)
    return BoundRecord(layer, 0, lhs, rhs, ok, tuple(hl), tuple(hr))


def prop2_bound_check(trace: Trace, weights: ModelWeights, layer: int) -> list[BoundRecord]:
    """Bound audit at recurrent layer slot ``layer`` for every r >= 1.

    B is the running max of ||X||_F over the attention inputs seen so far.
    """
    if trace.attn_inputs is None or trace.attentions is None:
        raise CaptureError("bound audit needs captured attention inputs and attentions")
    cfg = trace.config
    j = layer - cfg.prelude_layers
    if not 0 <= j < cfg.recurrent_layers:
        raise IndexError(f"layer {layer} is not a recurrent block")
    xs = trace.attn_inputs[:, j]
    attn = trace.attentions[:, j]
    kappas = layer_kappas(weights, layer, xs.shape[1])
    out = []
    b = float(np.linalg.norm(xs[0]))
    for r in range(1, xs.shape[0]):
        b = max(b, float(np.linalg.norm(xs[r])))
        lhs, rhs, hl, hr = bound_terms(xs[r - 1], xs[r], attn[r - 1], attn[r], kappas, b, cfg.d_head)
        ok = bool(np.all(hl <= hr + BOUND_SLACK) and lhs <= rhs + BOUND_SLACK)
        out.append(BoundRecord(layer, r, lhs, rhs, ok, tuple(hl), tuple(hr)))
    return out


def bound_records_csv(records: list[BoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("layer", "recurrence", "lhs", "rhs", "holds"))
    for r in records:
        w.writerow((r.layer, r.recurrence, fmt(r.lhs), fmt(r.rhs), int(r.holds)))
    return buf.getvalue()


# --- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # realized depth x 2
    index: np.ndarray  # realized depth x 2 (recurrence, layer slot)
    token: int
    explained: np.ndarray
    rank_deficient: bool

    def segments(self) -> dict[int, np.ndarray]:
        """Points grouped by recurrence."""
        return {int(r): self.points[self.index[:, 0] == r] for r in np.unique(self.index[:, 0])}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("depth", "recurrence", "layer", "pc1", "pc2"))
        for i in range(self.points.shape[0]):
            w.writerow((i, int(self.index[i, 0]), int(self.index[i, 1]), fmt(self.points[i, 0]), fmt(self.points[i, 1])))
        return buf.getvalue()


def pca_trajectory(trace: Trace, token: int = -1) -> Trajectory:
    """2-D PCA path of one token's residual vector through every realized block."""
    res = trace.realized_residuals()
    t = res.shape[1]
    if not -t <= token < t:
        raise IndexError(f"token {token} out of range")
    tok = token % t
    pts = res[:, tok, :]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        pca = linalg.pca_2d(pts)
    return Trajectory(pca.projections, np.array(trace.realized_index(), dtype=np.int64), tok, pca.eigenvalues, pca.rank_deficient)


# --- cyclic fixed points ---------------------------------------------------------


@dataclass(frozen=True)
class CyclicShiftResult:
    residual: float  # ||S(Z) - Z||_F of the full stack
    shifted_residual: float  # ||S'(Y) - Y||_F for the stack rotated to start at block `shift`
    amplification: float  # empirical local gain of the stage mapping S(Z) to S'(Y)
    iterations: int
    shift: int


def cyclic_shift_check(
    weights: ModelWeights,
    prelude_out: np.ndarray,
    z: np.ndarray,
    shift: int = 1,
    target: float = 1e-6,
    max_iter: int = 512,
    probe_seed: int = 0,
) -> CyclicShiftResult:
    """Iterate the recurrence from ``z`` until its residual is at most ``target``,
    then measure how far the cyclically shifted stack moves Y = blocks[:shift](Z).

    The amplification is measured by a small random perturbation of the
    converged state, since the shifted residual is bounded by that gain times
    the unshifted residual.
    """
    cfg = weights.config
    z = np.array(z, dtype=np.float64)
    it = 0
    nxt = recurrence_step(z, prelude_out, weights)
    resid = float(np.linalg.norm(nxt - z))
    while resid > target and it < max_iter:
        z = nxt
        nxt = recurrence_step(z, prelude_out, weights)
        resid = float(np.linalg.norm(nxt - z))
        it += 1

    def head(u):
        # injection and the first `shift` blocks, as one stage
        v = inject(prelude_out, u, weights) if cfg.input_injection else u
        for j in range(shift):
            v = _checked_block(v, weights.recurrent[j], cfg, cfg.prelude_layers + j).out
        return v

    y = head(z)
    shifted = shifted_recurrence_step(y, prelude_out, weights, shift)
    rng = np.random.default_rng(probe_seed)
    e = rng.standard_normal(z.shape)
    e *= 1e-6 * max(float(np.linalg.norm(z)), 1.0) / np.linalg.norm(e)
    amp = float(np.linalg.norm(head(z + e) - y) / np.linalg.norm(e))
    return CyclicShiftResult(resid, float(np.linalg.norm(shifted - y)), amp, it, shift)
