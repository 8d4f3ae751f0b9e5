"""Limiting-behaviour classification of per-token similarity series.

Each series is labelled FixedPoint, Orbit, Slider or Unknown by a
first-match cascade: closeness count, then the dominant Hann-windowed
spectral bin, then the linear trend.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .errors import InsufficientRecurrencesError, InvalidInputError, SeriesTooShortError
from .metrics import fmt
from .model import Trace

MIN_LENGTH = 8


class LabelKind(str, Enum):
    FIXED_POINT = "FixedPoint"
    ORBIT = "Orbit"
    SLIDER = "Slider"
    UNKNOWN = "Unknown"


class SeriesKind(str, Enum):
    SIMILARITY = "Similarity"
    NORM = "Norm"


@dataclass(frozen=True)
class SeriesLabel:
    kind: LabelKind
    freq: float | None = None
    amp: float | None = None
    slope: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LabelKind(self.kind))
        is_orbit = self.kind is LabelKind.ORBIT
        if is_orbit != (self.freq is not None) or is_orbit != (self.amp is not None):
            raise InvalidInputError("freq and amp are set exactly for orbits")
        if (self.kind is LabelKind.SLIDER) != (self.slope is not None):
            raise InvalidInputError("slope is set exactly for sliders")
        if is_orbit and (self.amp < 0 or not 0 < self.freq <= 0.5):
            raise InvalidInputError("orbit needs amp >= 0 and freq in (0, 0.5]")


@dataclass(frozen=True)
class ClassifierParams:
    tau: float = 0.05
    rho: float = 0.9
    series_kind: SeriesKind = SeriesKind.SIMILARITY

    def __post_init__(self):
        object.__setattr__(self, "series_kind", SeriesKind(self.series_kind))
        if not 0 < self.tau < 1:
            raise InvalidInputError("tau must lie in (0, 1)")
        if not 0 < self.rho <= 1:
            raise InvalidInputError("rho must lie in (0, 1]")


def detrend_linear(s) -> tuple[np.ndarray, float, float]:
    """Subtract the least-squares line over t = 0..n-1; returns (residual, slope, intercept)."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    n = s.shape[0]
    if n < 2:
        raise SeriesTooShortError("detrending needs at least 2 samples")
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    slope = float(np.dot(tc, s - s.mean()) / np.dot(tc, tc))
    intercept = float(s.mean() - slope * t.mean())
    return s - (intercept + slope * t), slope, intercept


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann window with zero endpoints."""
    if n < 2:
        raise InvalidInputError("Hann window needs n >= 2")
    i = np.arange(n, dtype=np.float64)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n - 1)))
    return 0.5 * (w + w[::-1])


def windowed_spectrum(s) -> linalg.Spectrum:
    """Moduli of the detrended, Hann-windowed series at bins 1..n//2."""
    resid, _, _ = detrend_linear(s)
    return linalg.real_fft_magnitudes(resid * hann_window(resid.shape[0]))


def classify_series(s, params: ClassifierParams | None = None) -> SeriesLabel:
    params = params or ClassifierParams()
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    n = s.shape[0]
    if n < MIN_LENGTH:
        raise SeriesTooShortError(f"classification needs at least {MIN_LENGTH} samples, got {n}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("series contains non-finite values")
    tau, norm = params.tau, params.series_kind is SeriesKind.NORM

    close = np.count_nonzero(s <= tau) if norm else np.count_nonzero(s >= 1.0 - tau)
    if close >= params.rho * n:
        return SeriesLabel(LabelKind.FIXED_POINT)

    resid, slope, _ = detrend_linear(s)
    mags = linalg.real_fft_magnitudes(resid * hann_window(n)).magnitudes
    k_star = int(np.argmax(mags))  # first maximum, i.e. lowest bin on ties
    amp = 4.0 * float(mags[k_star]) / n
    freq = (k_star + 1) / n
    if amp >= tau / 2 and freq >= 2.0 / n:
        return SeriesLabel(LabelKind.ORBIT, freq=freq, amp=amp)

    g = -slope if norm else slope
    if g > tau / n:
        return SeriesLabel(LabelKind.SLIDER, slope=g)
    return SeriesLabel(LabelKind.UNKNOWN)


def build_token_series(trace: Trace, token: int, layer: int | None = None) -> np.ndarray:
    """Cosine of a token's state at recurrences 1..l-1 with its state at recurrence l.

    Uses the last recurrent block unless ``layer`` (a recurrent index) is given.
    """
    if trace.recurrent is None:
        from .errors import CaptureError

        raise CaptureError("trace did not capture residuals")
    loops, k, t, _ = trace.recurrent.shape
    if loops < MIN_LENGTH + 1:
        raise InsufficientRecurrencesError(f"need at least {MIN_LENGTH + 1} recurrences, got {loops}")
    if not -t <= token < t:
        raise IndexError(f"token {token} out of range")
    j = k - 1 if layer is None else layer
    if not 0 <= j < k:
        raise IndexError(f"recurrent layer {j} out of range")
    states = trace.recurrent[:, j, token, :]
    final = np.broadcast_to(states[-1], states[:-1].shape)
    return linalg.rowwise_cosine(states[:-1], final)


# --- corpus statistics ---------------------------------------------------------


@dataclass(frozen=True)
class LabelRecord:
    example: int
    token: int
    layer: int
    label: SeriesLabel


def labels_csv(records: Iterable[LabelRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("example", "token", "layer", "kind", "freq", "amp", "slope"))
    for r in records:
        lab = r.label
        w.writerow((r.example, r.token, r.layer, lab.kind.value, fmt(lab.freq), fmt(lab.amp), fmt(lab.slope)))
    return buf.getvalue()


KINDS = tuple(LabelKind)
STAT_COLUMNS = {
    LabelKind.ORBIT: "Orbit %",
    LabelKind.SLIDER: "Slider %",
    LabelKind.UNKNOWN: "Unknown %",
}


def label_statistics(records: Iterable[LabelRecord]) -> dict:
    """Per-token fractions, per-example incidence and co-occurrence conditionals.

    ``cooccurrence[a][b]`` is P(kind a at some layer | kind b at some layer),
    both for the same (example, token).
    """
    recs = list(records)
    if not recs:
        raise InvalidInputError("no labels")
    total = len(recs)
    counts = {k: 0 for k in KINDS}
    per_token: dict[tuple[int, int], set] = {}
    per_example: dict[int, set] = {}
    for r in recs:
        counts[r.label.kind] += 1
        per_token.setdefault((r.example, r.token), set()).add(r.label.kind)
        per_example.setdefault(r.example, set()).add(r.label.kind)

    def pct_block(frac: dict) -> dict:
        out = {"Non-Fixed-Point %": 100.0 * (1.0 - frac[LabelKind.FIXED_POINT])}
        for kind, col in STAT_COLUMNS.items():
            out[col] = 100.0 * frac[kind]
        return out

    fractions = {k: counts[k] / total for k in KINDS}
    n_ex = len(per_example)
    incidence = {k: sum(k in s for s in per_example.values()) / n_ex for k in KINDS}
    co = {}
    for a in KINDS:
        co[a.value] = {}
        for b in KINDS:
            with_b = [s for s in per_token.values() if b in s]
            co[a.value][b.value] = (sum(a in s for s in with_b) / len(with_b)) if with_b else None
    return {
        "n_labels": total,
        "n_tokens": len(per_token),
        "n_examples": n_ex,
        "fractions": {k.value: fractions[k] for k in KINDS},
        "table": pct_block(fractions),
        "example_incidence": {k.value: incidence[k] for k in KINDS},
        "cooccurrence": co,
    }


def statistics_json(stats: dict) -> str:
    return json.dumps(stats, indent=1, sort_keys=True)
