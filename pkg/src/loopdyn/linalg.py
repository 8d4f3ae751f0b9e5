"""Dense float64 numerics used by the model and analysis modules.

Matrices are plain 2-D ``float64`` numpy arrays. Loop-heavy pieces (softmax,
norms, Jacobi rotations, the radix-2 FFT) dispatch to :mod:`loopdyn.kernels`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, RankDeficientWarning, SeriesTooShortError, ZeroVectorWarning
from .kernels import active as _k

RMS_EPS = 1e-6
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")


def row_softmax(logits, causal: bool = False) -> np.ndarray:
    """Softmax along the last axis; with ``causal`` keys j > i get exactly 0.

    Accepts any array with at least two dimensions (e.g. heads x T x T).
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim < 2:
        raise InvalidInputError("row_softmax needs at least a 2-D input")
    _check_finite(x, "logits")
    if causal and x.shape[-1] != x.shape[-2]:
        raise InvalidInputError("causal softmax requires square score matrices")
    return _k.softmax_rows(x, causal)


def rms_norm(x, gain, eps: float = RMS_EPS) -> np.ndarray:
    """Row-wise RMS normalization times ``gain``.

    The mean square is floored at ``eps`` so all-zero rows map to zero while
    every row with mean square >= eps comes out at exactly unit RMS.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[-1],):
        raise InvalidInputError(f"gain length {gain.shape} does not match width {x.shape[-1]}")
    return _k.rms_norm(x, gain, eps)


def layer_norm(x, gain, eps: float = RMS_EPS) -> np.ndarray:
    """Mean-centred variant of :func:`rms_norm` (no bias)."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[-1],):
        raise InvalidInputError(f"gain length {gain.shape} does not match width {x.shape[-1]}")
    return _k.layer_norm(x, gain, eps)


def frobenius_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two arrays treated as flat vectors.

    A zero vector gives 0.0 and a :class:`ZeroVectorWarning`.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero vector defined as 0", ZeroVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def rowwise_cosine(a, b) -> np.ndarray:
    """Cosine between matching rows of two equally shaped arrays (zero rows -> 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.sum(a * b, axis=-1)
    den = np.sqrt(np.sum(a * a, axis=-1) * np.sum(b * b, axis=-1))
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0.0)
    return np.clip(out, -1.0, 1.0)


# --- FFT -----------------------------------------------------------------


@dataclass(frozen=True)
class Spectrum:
    """DFT moduli at bins 1..n//2 of a real series of length ``n``."""

    magnitudes: np.ndarray
    n: int

    def __post_init__(self):
        if self.magnitudes.shape != (self.n // 2,):
            raise InvalidInputError("spectrum length must be n // 2")


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _ifft_radix2(x: np.ndarray) -> np.ndarray:
    return np.conj(_k.fft_radix2(np.conj(x))) / x.shape[0]


def dft(x) -> np.ndarray:
    """Full complex DFT of any length.

    Powers of two go straight through the radix-2 kernel. Other lengths use
    Bluestein's chirp-z identity, which evaluates the exact length-n DFT via
    zero-padded power-of-two transforms.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n == 0:
        return x.copy()
    if n & (n - 1) == 0:
        return _k.fft_radix2(x)
    j = np.arange(n)
    # j^2 mod 2n keeps the chirp phase argument small
    chirp = np.exp(-1j * np.pi * ((j * j) % (2 * n)) / n)
    m = _next_pow2(2 * n - 1)
    a = np.zeros(m, dtype=np.complex128)
    a[:n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1 :] = np.conj(chirp[1:][::-1])
    conv = _ifft_radix2(_k.fft_radix2(a) * _k.fft_radix2(b))
    return chirp * conv[:n]


def real_fft_magnitudes(series) -> Spectrum:
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInputError("series must be 1-D")
    n = s.shape[0]
    if n < 4:
        raise SeriesTooShortError(f"need at least 4 samples, got {n}")
    _check_finite(s, "series")
    full = dft(s)
    return Spectrum(np.abs(full[1 : n // 2 + 1]), n)


# --- eigen / PCA ----------------------------------------------------------


def _check_symmetric(m: np.ndarray) -> None:
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {m.shape}")
    _check_finite(m, "matrix")
    tol = SYMMETRY_TOL * max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if m.size and np.max(np.abs(m - m.T)) > tol:
        raise InvalidInputError("matrix is not symmetric")


def symmetric_eigh(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs by cyclic Jacobi, eigenvalues descending (stable on ties).

    Eigenvectors are the columns of the second result.
    """
    m = as_matrix(m)
    _check_symmetric(m)
    sym = 0.5 * (m + m.T)
    w, v, _ = _k.jacobi_eigh(sym, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def symmetric_eigenvalues(m) -> np.ndarray:
    return symmetric_eigh(m)[0]


@dataclass(frozen=True)
class PCAResult:
    """Two-component projection of row points."""

    projections: np.ndarray  # rows x 2
    components: np.ndarray  # dim x 2, unit columns
    eigenvalues: np.ndarray  # 2, population covariance
    mean: np.ndarray
    rank_deficient: bool


def _fix_sign(v: np.ndarray) -> np.ndarray:
    out = v.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        if col.size and col[np.argmax(np.abs(col))] < 0:
            out[:, c] = -col
    return out


def pca_2d(points, rank_tol: float = 1e-12) -> PCAResult:
    """Project rows onto the top two principal axes of the centred cloud.

    Covariance uses the 1/n normalization, so the variance of each projected
    column equals its eigenvalue. Each axis is signed so its largest-magnitude
    entry is positive. When there are fewer points than dimensions the
    (smaller) Gram matrix is decomposed instead.
    """
    x = as_matrix(points, "points")
    n, dim = x.shape
    if n < 3:
        raise InvalidInputError("pca_2d needs at least 3 points")
    _check_finite(x, "points")
    mean = x.mean(axis=0)
    xc = x - mean
    if n < dim:
        w, u = symmetric_eigh(xc @ xc.T / n)
        w = np.maximum(w[:2], 0.0)
        comps = np.zeros((dim, 2))
        for c in range(2):
            if w[c] > 0:
                vec = xc.T @ u[:, c]
                comps[:, c] = vec / np.linalg.norm(vec)
    else:
        w, v = symmetric_eigh(xc.T @ xc / n)
        w = np.maximum(np.pad(w, (0, max(0, 2 - dim)))[:2], 0.0)
        comps = np.zeros((dim, 2))
        comps[:, : min(dim, 2)] = v[:, :2]
    scale = max(float(w[0]), 0.0)
    rank_deficient = bool(dim < 2 or w[1] <= rank_tol * max(scale, 1e-300))
    if rank_deficient:
        w = np.array([w[0], 0.0])
    comps = _fix_sign(comps)
    proj = xc @ comps
    if rank_deficient:
        proj[:, 1] = 0.0
        warnings.warn("points span fewer than 2 dimensions", RankDeficientWarning, stacklevel=2)
    return PCAResult(proj, comps, w, mean, rank_deficient)
