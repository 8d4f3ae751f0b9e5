"""Vectorized numpy kernels (the fallback path)."""

from __future__ import annotations

import numpy as np


def softmax_rows(logits: np.ndarray, causal: bool) -> np.ndarray:
    x = np.array(logits, dtype=np.float64, copy=True)
    if causal:
        n = x.shape[-1]
        mask = np.triu(np.ones((x.shape[-2], n), dtype=bool), 1)
        x[..., mask] = -np.inf
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(np.maximum(ms, eps)) * gain


def layer_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(np.maximum(var, eps)) * gain


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (p, q) pair sets covering every pair once per sweep, p < q."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.int64), np.array(qs, dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def round_robin_rounds(n: int) -> np.ndarray:
    """(n_rounds, n_pairs, 2) schedule for the numba kernel; -1 pads odd n."""
    rounds = _round_robin(n)
    width = max((r[0].size for r in rounds), default=0)
    out = np.full((len(rounds), max(width, 1), 2), -1, dtype=np.int64)
    for i, (p, q) in enumerate(rounds):
        out[i, : p.size, 0] = p
        out[i, : q.size, 1] = q
    return out


def jacobi_eigh(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Cyclic Jacobi with the round-robin ordering, one round at a time.

    Pairs inside a round are disjoint, so their rotations commute and are
    applied together. Returns (diagonal, eigenvectors as columns, sweeps).
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a))
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v, 0
    rounds = [r for r in _round_robin(n) if r[0].size]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 0.0, theta)
            t = np.sign(safe) / (np.abs(safe) + np.sqrt(safe * safe + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        off = np.sqrt(np.sum(a * a, where=~np.eye(n, dtype=bool)))
        if off <= tol * scale:
            break
    return np.diag(a).copy(), v, sweeps


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT; len(x) must be a power of two."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    out = x[_bit_reverse(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(-1, size)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * tw
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        size *= 2
    return out


def column_sums(attn: np.ndarray) -> np.ndarray:
    return attn.sum(axis=-2)


def colsum_concentration(attn: np.ndarray) -> np.ndarray:
    t = attn.shape[-1]
    chat = attn.sum(axis=-2) / t
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(chat > 0.0, chat * np.log(chat), 0.0)
    return 1.0 + plogp.sum(axis=-1) / np.log(t)


def mixing_score(attn: np.ndarray) -> np.ndarray:
    t = attn.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(attn > 0.0, attn * np.log(attn), 0.0)
    return -plogp.sum(axis=-1).sum(axis=-1) / t


def sink_scores(attn: np.ndarray) -> np.ndarray:
    return attn.mean(axis=-2)
