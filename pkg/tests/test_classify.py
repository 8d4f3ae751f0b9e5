import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopdyn import classify as C
from loopdyn import model as M
from loopdyn.errors import InsufficientRecurrencesError, InvalidInputError, SeriesTooShortError

from test_linalg import brute_dft

SIM = C.ClassifierParams()
NORM = C.ClassifierParams(series_kind="Norm")


def test_params_validation():
    with pytest.raises(InvalidInputError):
        C.ClassifierParams(tau=0)
    with pytest.raises(InvalidInputError):
        C.ClassifierParams(rho=1.5)


def test_label_invariants():
    with pytest.raises(InvalidInputError):
        C.SeriesLabel("Orbit")
    with pytest.raises(InvalidInputError):
        C.SeriesLabel("FixedPoint", slope=1.0)
    with pytest.raises(InvalidInputError):
        C.SeriesLabel("Orbit", freq=0.7, amp=1.0)


def test_detrend_examples():
    t = np.arange(10.0)
    r, a, b = C.detrend_linear(2 * t + 3)
    assert np.allclose(r, 0, atol=1e-12) and a == pytest.approx(2) and b == pytest.approx(3)
    r, a, _ = C.detrend_linear(np.full(6, 4.0))
    assert a == 0 and np.all(r == 0)
    t = np.arange(5.0)
    r, a, b = C.detrend_linear(t**2)
    assert a == pytest.approx(4) and b == pytest.approx(-2)
    assert np.allclose(r, t**2 - 4 * t + 2, atol=1e-12)
    with pytest.raises(SeriesTooShortError):
        C.detrend_linear([1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31))
def test_detrend_residual_orthogonal(n, seed):
    s = np.random.default_rng(seed).normal(size=n) * 10
    r, _, _ = C.detrend_linear(s)
    assert abs(r.sum()) <= 1e-9 * max(1, np.abs(s).sum())
    assert abs(r @ np.arange(n)) <= 1e-9 * max(1, np.abs(s).sum() * n)


def test_hann():
    assert np.allclose(C.hann_window(3), [0, 1, 0], atol=1e-15)
    assert np.allclose(C.hann_window(5), [0, 0.5, 1, 0.5, 0], atol=1e-15)
    for n in (2, 7, 64, 127):
        w = C.hann_window(n)
        assert np.array_equal(w, w[::-1]) and w[0] == 0


def test_canonical_series():
    n = 64
    i = np.arange(n)
    assert C.classify_series(np.ones(n)).kind is C.LabelKind.FIXED_POINT
    orbit = C.classify_series(0.9 + 0.05 * np.sin(2 * np.pi * 8 * i / n))
    assert orbit.kind is C.LabelKind.ORBIT and orbit.freq == 8 / 64
    assert 0.045 <= orbit.amp <= 0.055
    assert orbit.amp == pytest.approx(0.04922330616852548687, abs=1e-12)
    ramp = C.classify_series(0.5 + 0.4 * i / (n - 1))
    assert ramp.kind is C.LabelKind.SLIDER and ramp.slope == pytest.approx(0.4 / 63, rel=1e-12)
    noise = np.random.default_rng(0).uniform(0.45, 0.55, n)
    assert C.classify_series(noise).kind is C.LabelKind.UNKNOWN


def test_too_short_and_nonfinite():
    with pytest.raises(SeriesTooShortError):
        C.classify_series(np.ones(7))
    with pytest.raises(InvalidInputError):
        C.classify_series(np.array([np.nan] * 10))


def test_cascade_order():
    # 60 of 64 samples within tau of 1 plus a strong oscillation in the rest
    n = 64
    s = np.ones(n)
    s[::16] = 0.0
    assert C.classify_series(s).kind is C.LabelKind.FIXED_POINT
    detr, _, _ = C.detrend_linear(s)
    mags = np.abs(brute_dft(detr * C.hann_window(n)))[1 : n // 2 + 1]
    assert 4 * mags.max() / n >= SIM.tau / 2  # orbit rule would also fire


@pytest.mark.parametrize("n", [64, 127])
def test_orbit_frequency_recovery(n):
    i = np.arange(n)
    for a in (0.05, 0.1, 0.3):
        for f in range(2, n // 2):
            s = 0.5 + a * np.sin(2 * np.pi * f * i / n + 0.3)
            lab = C.classify_series(s)
            assert lab.kind is C.LabelKind.ORBIT, (f, a)
            assert lab.freq == f / n
            assert abs(lab.amp - a) <= 0.15 * a, (f, a, lab.amp)


def test_windowed_spectrum_matches_oracle():
    s = np.random.default_rng(1).normal(size=50)
    detr, _, _ = C.detrend_linear(s)
    ref = np.abs(brute_dft(detr * C.hann_window(50)))[1:26]
    assert np.allclose(C.windowed_spectrum(s).magnitudes, ref, rtol=1e-9, atol=1e-12)


def test_tie_breaks_to_lowest_bin(monkeypatch):
    from loopdyn import linalg

    def flat(series):
        m = np.ones(len(series) // 2)
        m[0] = 0.5  # bins 2.. tie for the maximum
        return linalg.Spectrum(m, len(series))

    monkeypatch.setattr(linalg, "real_fft_magnitudes", flat)
    lab = C.classify_series(np.r_[np.zeros(32), np.full(32, 0.5)])
    assert lab.kind is C.LabelKind.ORBIT and lab.freq == 2 / 64


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 80), st.integers(0, 2**31), st.sampled_from(["flat", "ramp", "noise"]))
def test_similarity_norm_duality(n, seed, shape):
    rng = np.random.default_rng(seed)
    i = np.arange(n)
    if shape == "flat":
        s = 1 - rng.uniform(0, 0.1, n)
    elif shape == "ramp":
        s = rng.uniform(0, 0.5) + rng.uniform(-0.01, 0.01) * i
    else:
        s = rng.uniform(0, 1, n)
    a = C.classify_series(s, SIM)
    b = C.classify_series(1 - s, NORM)
    if a.kind in (C.LabelKind.FIXED_POINT, C.LabelKind.SLIDER) or b.kind in (C.LabelKind.FIXED_POINT, C.LabelKind.SLIDER):
        assert a.kind == b.kind
        if a.slope is not None:
            assert a.slope == pytest.approx(b.slope, rel=1e-9)


def _rotation_trace(loops=128, period=16):
    t, d = 3, 4
    cfg = M.ModelConfig(d_model=d, n_heads=1, d_head=d, recurrent_layers=1, positional="None")
    tr = M.Trace(cfg, loops, M.CaptureFlags(), np.zeros((t, d)))
    ang = 2 * np.pi * np.arange(1, loops + 1) / period
    states = np.zeros((loops, 1, t, d))
    states[:, 0, :, 0] = np.cos(ang)[:, None]
    states[:, 0, :, 1] = np.sin(ang)[:, None]
    tr.recurrent = states
    return tr


def test_build_token_series():
    tr = _rotation_trace()
    s = C.build_token_series(tr, 0)
    assert s.shape == (127,)
    r = np.arange(1, 128)
    assert np.allclose(s, np.cos(2 * np.pi * (128 - r) / 16), atol=1e-12)
    conv = _rotation_trace(period=1)
    assert np.allclose(C.build_token_series(conv, 2), 1.0)
    with pytest.raises(InsufficientRecurrencesError):
        C.build_token_series(_rotation_trace(loops=8), 0)


def test_rotation_classifies_as_orbit():
    tr = _rotation_trace(loops=129, period=16)
    lab = C.classify_series(C.build_token_series(tr, 0))
    assert lab.kind is C.LabelKind.ORBIT and lab.freq == 8 / 128


def _recs(kinds):
    out = []
    for (ex, tok, layer), kind in kinds.items():
        lab = {
            "FixedPoint": C.SeriesLabel("FixedPoint"),
            "Orbit": C.SeriesLabel("Orbit", freq=0.25, amp=0.1),
            "Slider": C.SeriesLabel("Slider", slope=0.01),
            "Unknown": C.SeriesLabel("Unknown"),
        }[kind]
        out.append(C.LabelRecord(ex, tok, layer, lab))
    return out


def test_statistics_counts():
    recs = _recs({(0, t, 0): "FixedPoint" for t in range(1000)})
    st_ = C.label_statistics(recs)
    assert st_["table"]["Non-Fixed-Point %"] == 0.0
    recs = _recs({**{(0, t, 0): "FixedPoint" for t in range(1000)}, (0, 1000, 0): "Orbit"})
    st_ = C.label_statistics(recs)
    assert st_["fractions"]["Orbit"] == pytest.approx(1 / 1001)
    one_in_thousand = _recs({**{(0, t, 0): "FixedPoint" for t in range(999)}, (0, 999, 0): "Orbit"})
    assert C.label_statistics(one_in_thousand)["fractions"]["Orbit"] == 0.001
    assert sum(st_["fractions"].values()) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        C.label_statistics([])


def test_cooccurrence_ratios():
    # token a: Orbit + Slider; token b: Orbit + FixedPoint; token c: Slider only
    grid = {
        (0, 0, 0): "Orbit", (0, 0, 1): "Slider",
        (0, 1, 0): "Orbit", (0, 1, 1): "FixedPoint",
        (1, 0, 0): "Slider", (1, 0, 1): "Slider",
    }
    co = C.label_statistics(_recs(grid))["cooccurrence"]
    assert co["Slider"]["Orbit"] == 0.5  # of 2 orbit tokens, 1 has a slider
    assert co["Orbit"]["Slider"] == 0.5  # of 2 slider tokens, 1 has an orbit
    assert co["FixedPoint"]["Orbit"] == 0.5
    assert co["Orbit"]["FixedPoint"] == 1.0
    assert co["Unknown"]["Unknown"] is None
    inc = C.label_statistics(_recs(grid))["example_incidence"]
    assert inc["Orbit"] == 0.5 and inc["Slider"] == 1.0


def test_labels_csv():
    text = C.labels_csv(_recs({(0, 1, 2): "Orbit"}))
    assert text.splitlines()[1] == "0,1,2,Orbit,0.25,0.10000000000000001,"
