"""``@njit`` loop kernels. Import only when numba is available."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _softmax_batch(x, causal):
    nb, rows, cols = x.shape
    out = np.zeros((nb, rows, cols))
    for b in range(nb):
        for i in range(rows):
            stop = min(i + 1, cols) if causal else cols
            m = -np.inf
            for j in range(stop):
                if x[b, i, j] > m:
                    m = x[b, i, j]
            total = 0.0
            for j in range(stop):
                e = math.exp(x[b, i, j] - m)
                out[b, i, j] = e
                total += e
            for j in range(stop):
                out[b, i, j] /= total
    return out


def softmax_rows(logits, causal):
    x = np.ascontiguousarray(logits, dtype=np.float64)
    flat = x.reshape((-1,) + x.shape[-2:])
    return _softmax_batch(flat, causal).reshape(x.shape)


@njit(cache=True)
def _rms_norm_2d(x, gain, eps):
    rows, cols = x.shape
    out = np.empty_like(x)
    for i in range(rows):
        ms = 0.0
        for j in range(cols):
            ms += x[i, j] * x[i, j]
        ms /= cols
        inv = 1.0 / math.sqrt(max(ms, eps))
        for j in range(cols):
            out[i, j] = x[i, j] * inv * gain[j]
    return out


@njit(cache=True)
def _layer_norm_2d(x, gain, eps):
    rows, cols = x.shape
    out = np.empty_like(x)
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            var += (x[i, j] - mu) * (x[i, j] - mu)
        var /= cols
        inv = 1.0 / math.sqrt(max(var, eps))
        for j in range(cols):
            out[i, j] = (x[i, j] - mu) * inv * gain[j]
    return out


def rms_norm(x, gain, eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gain, dtype=np.float64)
    return _rms_norm_2d(x.reshape(-1, x.shape[-1]), g, eps).reshape(x.shape)


def layer_norm(x, gain, eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gain, dtype=np.float64)
    return _layer_norm_2d(x.reshape(-1, x.shape[-1]), g, eps).reshape(x.shape)


@njit(cache=True)
def _jacobi(a, rounds, tol, max_sweeps):
    # rounds: (n_rounds, n_pairs, 2), -1 marks padding; pairs in a round are disjoint
    n = a.shape[0]
    vt = np.eye(n)
    n_rounds, width, _ = rounds.shape
    cs = np.zeros(width)
    sn = np.zeros(width)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += a[i, j] * a[i, j]
    scale = math.sqrt(scale)
    sweeps = 0
    if n < 2 or scale == 0.0:
        return vt, sweeps
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        for r in range(n_rounds):
            any_active = False
            for m in range(width):
                p = rounds[r, m, 0]
                q = rounds[r, m, 1]
                cs[m] = 1.0
                sn[m] = 0.0
                if p < 0:
                    continue
                apq = a[p, q]
                if apq == 0.0:
                    continue
                any_active = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta > 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                cs[m] = 1.0 / math.sqrt(t * t + 1.0)
                sn[m] = t * cs[m]
            if not any_active:
                continue
            for i in range(n):
                for m in range(width):
                    p = rounds[r, m, 0]
                    if p < 0 or sn[m] == 0.0:
                        continue
                    q = rounds[r, m, 1]
                    ap = a[i, p]
                    aq = a[i, q]
                    a[i, p] = cs[m] * ap - sn[m] * aq
                    a[i, q] = sn[m] * ap + cs[m] * aq
            for m in range(width):
                p = rounds[r, m, 0]
                if p < 0 or sn[m] == 0.0:
                    continue
                q = rounds[r, m, 1]
                c = cs[m]
                s = sn[m]
                for k in range(n):
                    ap = a[p, k]
                    aq = a[q, k]
                    a[p, k] = c * ap - s * aq
                    a[q, k] = s * ap + c * aq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if math.sqrt(off) <= tol * scale:
            break
    return vt, sweeps


def jacobi_eigh(a, tol, max_sweeps):
    from .numpy_impl import round_robin_rounds

    work = np.array(a, dtype=np.float64, copy=True)
    vt, sweeps = _jacobi(work, round_robin_rounds(work.shape[0]), tol, max_sweeps)
    return np.diag(work).copy(), vt.T.copy(), sweeps


@njit(cache=True)
def _fft_inplace(re, im):
    n = re.shape[0]
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j ^= bit
        if i < j:
            re[i], re[j] = re[j], re[i]
            im[i], im[j] = im[j], im[i]
    size = 2
    while size <= n:
        half = size // 2
        step = -2.0 * math.pi / size
        for start in range(0, n, size):
            for k in range(half):
                wr = math.cos(step * k)
                wi = math.sin(step * k)
                a = start + k
                b = a + half
                tr = re[b] * wr - im[b] * wi
                ti = re[b] * wi + im[b] * wr
                re[b] = re[a] - tr
                im[b] = im[a] - ti
                re[a] += tr
                im[a] += ti
        size *= 2


def fft_radix2(x):
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    re = np.ascontiguousarray(x.real).copy()
    im = np.ascontiguousarray(x.imag).copy()
    _fft_inplace(re, im)
    return re + 1j * im


@njit(cache=True)
def _metrics_batch(a):
    nb, t, _ = a.shape
    conc = np.empty(nb)
    mix = np.empty(nb)
    col = np.zeros((nb, t))
    log_t = math.log(t) if t > 1 else 1.0
    for b in range(nb):
        h = 0.0
        for i in range(t):
            row = 0.0  # per-row partial sums keep the rounding error small
            for j in range(t):
                p = a[b, i, j]
                col[b, j] += p
                if p > 0.0:
                    row -= p * math.log(p)
            h += row
        mix[b] = h / t
        acc = 0.0
        for j in range(t):
            col[b, j] /= t
            c = col[b, j]
            if c > 0.0:
                acc += c * math.log(c)
        conc[b] = 1.0 + acc / log_t
    return conc, mix, col


def _batch(attn):
    a = np.ascontiguousarray(attn, dtype=np.float64)
    return _metrics_batch(a.reshape((-1,) + a.shape[-2:])), a.shape[:-2], a.shape[-1]


def colsum_concentration(attn):
    (conc, _, _), lead, _ = _batch(attn)
    return conc.reshape(lead)


def mixing_score(attn):
    (_, mix, _), lead, _ = _batch(attn)
    return mix.reshape(lead)


def sink_scores(attn):
    (_, _, col), lead, t = _batch(attn)
    return col.reshape(lead + (t,))
