"""Looped transformers with prelude / weight-tied recurrent stack / coda.

A ``(p, k x l, c)`` model runs ``p`` prelude blocks once, the same ``k``
recurrent blocks ``l`` times, then ``c`` coda blocks. With input injection the
prelude output ``X`` is concatenated with the carried state ``Z`` and
projected through ``W_I`` at the start of every recurrence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any

import numpy as np

from . import linalg
from .errors import DivergedForwardError, InvalidInputError, VocabularyError

# independent RNG streams derived from one seed
STREAM_WEIGHTS = 0
STREAM_Z0 = 1
STREAM_INPUT = 2


class NormScheme(str, Enum):
    PRE_NORM = "PreNorm"
    HUGINN_SANDWICH = "HuginnSandwich"
    OURO_SANDWICH = "OuroSandwich"


class Positional(str, Enum):
    NONE = "None"
    ROTARY = "Rotary"


class NormKind(str, Enum):
    RMS = "rms"
    LAYER = "layer"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_heads: int = 4
    d_head: int = 128
    prelude_layers: int = 0
    recurrent_layers: int = 12
    coda_layers: int = 0
    norm_scheme: NormScheme = NormScheme.PRE_NORM
    input_injection: bool = False
    injection_sigma: float = 1.0
    positional: Positional = Positional.ROTARY
    mlp_hidden: int | None = None
    mlp_gated: bool = False
    norm_kind: NormKind = NormKind.RMS
    init_std: float = 0.02
    rope_base: float = 10000.0
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "norm_scheme", NormScheme(self.norm_scheme))
        object.__setattr__(self, "positional", Positional(self.positional))
        object.__setattr__(self, "norm_kind", NormKind(self.norm_kind))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.d_model)
        for name in ("d_model", "n_heads", "d_head", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.n_heads * self.d_head != self.d_model:
            raise InvalidInputError("n_heads * d_head must equal d_model")
        if self.recurrent_layers < 1:
            raise InvalidInputError("recurrent_layers must be >= 1")
        if self.prelude_layers < 0 or self.coda_layers < 0 or self.vocab_size < 0:
            raise InvalidInputError("layer and vocabulary counts must be non-negative")
        if self.positional is Positional.ROTARY and self.d_head % 2:
            raise InvalidInputError("rotary embeddings need an even d_head")
        if not self.injection_sigma > 0 or not self.init_std > 0:
            raise InvalidInputError("injection_sigma and init_std must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must fit in 64 bits")

    @property
    def n_layers(self) -> int:
        """Distinct (untied) blocks: prelude + recurrent + coda."""
        return self.prelude_layers + self.recurrent_layers + self.coda_layers

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else v
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray
    mlp_gate: np.ndarray | None = None
    # n1: attention input, n2: MLP input, n3/n4: sandwich norms after each sublayer
    n1: np.ndarray = None
    n2: np.ndarray = None
    n3: np.ndarray = None
    n4: np.ndarray = None

    TENSORS = ("wq", "wk", "wv", "wo", "mlp_in", "mlp_out", "mlp_gate", "n1", "n2", "n3", "n4")

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.TENSORS if getattr(self, n) is not None}

    def head_block(self, name: str, head: int, d_head: int) -> np.ndarray:
        """D x d slice of a projection belonging to one head."""
        return getattr(self, name)[:, head * d_head : (head + 1) * d_head]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class ModelWeights:
    config: ModelConfig
    layers: list[LayerWeights]  # prelude, then recurrent, then coda
    w_inject: np.ndarray | None = None
    loop_norm: np.ndarray | None = None  # residual norm after each recurrence (Ouro)
    embedding: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise InvalidInputError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        if (self.w_inject is not None) != cfg.input_injection:
            raise InvalidInputError("W_I must be present exactly when input_injection is set")
        if self.w_inject is not None and self.w_inject.shape != (2 * cfg.d_model, cfg.d_model):
            raise InvalidInputError("W_I must be 2D x D")

    @property
    def prelude(self) -> list[LayerWeights]:
        return self.layers[: self.config.prelude_layers]

    @property
    def recurrent(self) -> list[LayerWeights]:
        p = self.config.prelude_layers
        return self.layers[p : p + self.config.recurrent_layers]

    @property
    def coda(self) -> list[LayerWeights]:
        return self.layers[self.config.prelude_layers + self.config.recurrent_layers :]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, lw in enumerate(self.layers):
            for name, t in lw.tensors().items():
                out[f"layers.{i}.{name}"] = t
        if self.w_inject is not None:
            out["w_inject"] = self.w_inject
        if self.loop_norm is not None:
            out["loop_norm"] = self.loop_norm
        if self.embedding is not None:
            out["embedding"] = self.embedding
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


def _f32_normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    # rounded through float32 so the on-disk format round-trips bit-exactly
    return rng.normal(0.0, std, shape).astype(np.float32).astype(np.float64)


def init_random(config: ModelConfig) -> ModelWeights:
    """Deterministic random weights: projections N(0, init_std^2), gains 1."""
    rng = np.random.default_rng([config.seed, STREAM_WEIGHTS])
    d, f, std = config.d_model, config.mlp_hidden, config.init_std
    layers = []
    for _ in range(config.n_layers):
        wq, wk, wv, wo = (_f32_normal(rng, std, (d, d)) for _ in range(4))
        mlp_in = _f32_normal(rng, std, (d, f))
        mlp_out = _f32_normal(rng, std, (f, d))
        gate = _f32_normal(rng, std, (d, f)) if config.mlp_gated else None
        layers.append(
            LayerWeights(wq, wk, wv, wo, mlp_in, mlp_out, gate, *(np.ones(d) for _ in range(4)))
        )
    w_inject = _f32_normal(rng, std, (2 * d, d)) if config.input_injection else None
    loop_norm = np.ones(d) if config.norm_scheme is NormScheme.OURO_SANDWICH else None
    embedding = None
    if config.vocab_size:
        embedding = _f32_normal(rng, 1.0 / np.sqrt(d), (config.vocab_size, d))
    return ModelWeights(config, layers, w_inject, loop_norm, embedding)


def ablate_mlp(weights: ModelWeights, layer: int) -> ModelWeights:
    """Copy of ``weights`` with the MLP output projection of ``layer`` zeroed.

    ``layer`` indexes distinct blocks (prelude first, 0-based). Other tensors
    are shared, not copied.
    """
    if not 0 <= layer < len(weights.layers):
        raise IndexError(f"layer {layer} out of range for {len(weights.layers)} layers")
    layers = list(weights.layers)
    layers[layer] = replace(layers[layer], mlp_out=np.zeros_like(layers[layer].mlp_out))
    return replace(weights, layers=layers)


def embed_tokens(ids, table) -> np.ndarray:
    table = linalg.as_matrix(table, "embedding table")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f"token id outside vocabulary of size {table.shape[0]}")
    return table[ids].copy()


def random_embeddings(n_tokens: int, d_model: int, seed: int) -> np.ndarray:
    """Unit-variance random input states (the default random-init input)."""
    rng = np.random.default_rng([seed, STREAM_INPUT])
    return rng.normal(0.0, 1.0, (n_tokens, d_model))


# --- forward -------------------------------------------------------------


def _norm(x: np.ndarray, gain: np.ndarray, kind: NormKind) -> np.ndarray:
    if kind is NormKind.RMS:
        return linalg.rms_norm(x, gain)
    return linalg.layer_norm(x, gain)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rope_tables(n_tokens: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(n_tokens, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate-half rotary embedding on the last axis of (..., T, d)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _split_heads(x: np.ndarray, n_heads: int, d_head: int) -> np.ndarray:
    return x.reshape(x.shape[0], n_heads, d_head).transpose(1, 0, 2)


def attention_scores(xn: np.ndarray, lw: LayerWeights, config: ModelConfig) -> np.ndarray:
    """Pre-softmax causal scores (heads x T x T) from normed inputs."""
    h, d = config.n_heads, config.d_head
    q = _split_heads(xn @ lw.wq, h, d)
    k = _split_heads(xn @ lw.wk, h, d)
    if config.positional is Positional.ROTARY:
        cos, sin = rope_tables(xn.shape[0], d, config.rope_base)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
    return q @ k.transpose(0, 2, 1) / np.sqrt(d)


def attention(xn: np.ndarray, lw: LayerWeights, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Causal multi-head attention. Returns (output T x D, probabilities H x T x T)."""
    probs = linalg.row_softmax(attention_scores(xn, lw, config), causal=True)
    v = _split_heads(xn @ lw.wv, config.n_heads, config.d_head)
    ctx = (probs @ v).transpose(1, 0, 2).reshape(xn.shape[0], config.d_model)
    return ctx @ lw.wo, probs


def mlp(x: np.ndarray, lw: LayerWeights, config: ModelConfig) -> np.ndarray:
    if lw.mlp_gate is not None:
        return (_silu(x @ lw.mlp_gate) * (x @ lw.mlp_in)) @ lw.mlp_out
    return _gelu(x @ lw.mlp_in) @ lw.mlp_out


@dataclass
class BlockOutput:
    out: np.ndarray
    probs: np.ndarray
    attn_input: np.ndarray


def _block(x: np.ndarray, lw: LayerWeights, config: ModelConfig) -> BlockOutput:
    kind = config.norm_scheme
    nk = config.norm_kind
    with np.errstate(over="ignore", invalid="ignore"):
        xn = _norm(x, lw.n1, nk)
        a, probs = attention(xn, lw, config)
        if kind is NormScheme.PRE_NORM:
            h = x + a
            out = h + mlp(_norm(h, lw.n2, nk), lw, config)
        elif kind is NormScheme.HUGINN_SANDWICH:
            h = _norm(x + a, lw.n3, nk)
            out = _norm(h + mlp(_norm(h, lw.n2, nk), lw, config), lw.n4, nk)
        else:
            h = x + _norm(a, lw.n3, nk)
            out = h + _norm(mlp(_norm(h, lw.n2, nk), lw, config), lw.n4, nk)
    return BlockOutput(out, probs, xn)


def _checked_block(x, lw, config, layer, recurrence=None, stage="recurrent") -> BlockOutput:
    if not np.all(np.isfinite(x)):
        raise DivergedForwardError(layer, recurrence, stage)
    try:
        res = _block(x, lw, config)
    except InvalidInputError as exc:  # non-finite scores inside softmax
        raise DivergedForwardError(layer, recurrence, stage) from exc
    if not np.all(np.isfinite(res.out)):
        raise DivergedForwardError(layer, recurrence, stage)
    return res


def block_forward(x, layer: int, weights: ModelWeights, config: ModelConfig | None = None):
    """Apply distinct block ``layer`` to a T x D state: returns (state, attention H x T x T)."""
    config = config or weights.config
    x = linalg.as_matrix(x, "x")
    if x.shape[1] != config.d_model:
        raise InvalidInputError(f"state width {x.shape[1]} != d_model {config.d_model}")
    if not 0 <= layer < len(weights.layers):
        raise IndexError(f"layer {layer} out of range")
    res = _checked_block(x, weights.layers[layer], config, layer, stage="block")
    return res.out, res.probs


def inject(x: np.ndarray, z: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return np.concatenate([x, z], axis=1) @ weights.w_inject


def loop_normalize(z: np.ndarray, weights: ModelWeights) -> np.ndarray:
    if weights.loop_norm is None:
        return z
    return _norm(z, weights.loop_norm, weights.config.norm_kind)


def initial_state(n_tokens: int, config: ModelConfig) -> np.ndarray:
    """Z_0 with every entry drawn from N(0, sigma^2)."""
    rng = np.random.default_rng([config.seed, STREAM_Z0])
    return rng.normal(0.0, config.injection_sigma, (n_tokens, config.d_model))


# --- traces ----------------------------------------------------------------


@dataclass(frozen=True)
class CaptureFlags:
    residuals: bool = True
    attentions: bool = True
    attn_inputs: bool = False  # normed states feeding Q/K, needed for the Prop-2 audit

    def to_dict(self) -> dict[str, bool]:
        return {"residuals": self.residuals, "attentions": self.attentions, "attn_inputs": self.attn_inputs}


@dataclass
class Trace:
    """Everything recorded during one recurrent run.

    ``recurrent`` is indexed [recurrence][layer][token][channel]; prelude and
    coda outputs live in their own arrays and are slotted into recurrence 0
    and the final recurrence by :meth:`realized_residuals`.
    """

    config: ModelConfig
    loops: int
    capture: CaptureFlags
    embedding: np.ndarray
    prelude: np.ndarray | None = None  # p x T x D
    recurrent: np.ndarray | None = None  # l x k x T x D
    coda: np.ndarray | None = None  # c x T x D
    carried: np.ndarray | None = None  # l x T x D, state handed to the next recurrence
    injected: np.ndarray | None = None  # l x T x D, output of W_I per recurrence
    prelude_attn: np.ndarray | None = None  # p x H x T x T
    attentions: np.ndarray | None = None  # l x k x H x T x T
    coda_attn: np.ndarray | None = None
    attn_inputs: np.ndarray | None = None  # l x k x T x D
    output: np.ndarray | None = None
    injection_count: int = 0
    weights_checksum: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.embedding.shape[0]

    @property
    def realized_depth(self) -> int:
        c = self.config
        return c.prelude_layers + self.loops * c.recurrent_layers + c.coda_layers

    def realized_index(self) -> list[tuple[int, int]]:
        """(recurrence, layer slot) per realized block, layer slot in 0..p+k+c-1."""
        c = self.config
        p, k = c.prelude_layers, c.recurrent_layers
        idx = [(0, j) for j in range(p)]
        idx += [(r, p + j) for r in range(self.loops) for j in range(k)]
        idx += [(self.loops - 1, p + k + j) for j in range(c.coda_layers)]
        return idx

    def realized_residuals(self) -> np.ndarray:
        if self.recurrent is None:
            from .errors import CaptureError

            raise CaptureError("trace did not capture residuals")
        parts = []
        if self.prelude is not None and len(self.prelude):
            parts.append(self.prelude)
        parts.append(self.recurrent.reshape((-1,) + self.recurrent.shape[2:]))
        if self.coda is not None and len(self.coda):
            parts.append(self.coda)
        return np.concatenate(parts, axis=0)

    def realized_attentions(self) -> np.ndarray:
        if self.attentions is None:
            from .errors import CaptureError

            raise CaptureError("trace did not capture attentions")
        parts = []
        if self.prelude_attn is not None and len(self.prelude_attn):
            parts.append(self.prelude_attn)
        parts.append(self.attentions.reshape((-1,) + self.attentions.shape[2:]))
        if self.coda_attn is not None and len(self.coda_attn):
            parts.append(self.coda_attn)
        return np.concatenate(parts, axis=0)


def run_recurrent(
    inputs,
    weights: ModelWeights,
    loops: int,
    capture: CaptureFlags | None = None,
    config: ModelConfig | None = None,
    z0: np.ndarray | None = None,
) -> Trace:
    """Prelude once, the recurrent stack ``loops`` times, coda once."""
    config = config or weights.config
    capture = capture or CaptureFlags()
    if loops < 1:
        raise InvalidInputError("loops must be >= 1")
    x = linalg.as_matrix(inputs, "inputs")
    if x.shape[1] != config.d_model:
        raise InvalidInputError(f"input width {x.shape[1]} != d_model {config.d_model}")
    t, d = x.shape
    p, k, c, h = config.prelude_layers, config.recurrent_layers, config.coda_layers, config.n_heads

    def buf(*shape):
        return np.zeros(shape)

    tr = Trace(config=config, loops=loops, capture=capture, embedding=x.copy())
    tr.weights_checksum = weights.checksum()
    if capture.residuals:
        tr.prelude, tr.recurrent, tr.coda = buf(p, t, d), buf(loops, k, t, d), buf(c, t, d)
        tr.carried = buf(loops, t, d)
    if capture.attentions:
        tr.prelude_attn, tr.attentions, tr.coda_attn = buf(p, h, t, t), buf(loops, k, h, t, t), buf(c, h, t, t)
    if capture.attn_inputs:
        tr.attn_inputs = buf(loops, k, t, d)

    state = x
    for j, lw in enumerate(weights.prelude):
        res = _checked_block(state, lw, config, j, stage="prelude")
        state = res.out
        if capture.residuals:
            tr.prelude[j] = state
        if capture.attentions:
            tr.prelude_attn[j] = res.probs

    prelude_out = state
    if config.input_injection:
        z = initial_state(t, config) if z0 is None else linalg.as_matrix(z0, "z0")
        if capture.residuals:
            tr.injected = buf(loops, t, d)
    else:
        z = prelude_out
    for r in range(loops):
        u = z
        if config.input_injection:
            u = inject(prelude_out, z, weights)
            tr.injection_count += 1
            if capture.residuals:
                tr.injected[r] = u
        for j, lw in enumerate(weights.recurrent):
            res = _checked_block(u, lw, config, p + j, recurrence=r)
            u = res.out
            if capture.residuals:
                tr.recurrent[r, j] = u
            if capture.attentions:
                tr.attentions[r, j] = res.probs
            if capture.attn_inputs:
                tr.attn_inputs[r, j] = res.attn_input
        z = loop_normalize(u, weights)
        if capture.residuals:
            tr.carried[r] = z

    state = z
    for j, lw in enumerate(weights.coda):
        res = _checked_block(state, lw, config, p + k + j, stage="coda")
        state = res.out
        if capture.residuals:
            tr.coda[j] = state
        if capture.attentions:
            tr.coda_attn[j] = res.probs
    tr.output = state
    return tr


# --- recurrence map helpers (fixed points, cyclic shifts) -------------------


def recurrence_step(z: np.ndarray, prelude_out: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """One full pass: injection (if any), k recurrent blocks, loop norm (if any)."""
    cfg = weights.config
    u = inject(prelude_out, z, weights) if cfg.input_injection else z
    for j, lw in enumerate(weights.recurrent):
        u = _checked_block(u, lw, cfg, cfg.prelude_layers + j).out
    return loop_normalize(u, weights)


def shifted_recurrence_step(y: np.ndarray, prelude_out: np.ndarray, weights: ModelWeights, shift: int = 1) -> np.ndarray:
    """The recurrence with its stages cyclically rotated to start at block ``shift``.

    ``y`` is a state sitting just after block ``shift - 1``; the map runs the
    remaining blocks, the loop norm, the injection and blocks ``0..shift-1``.
    """
    cfg = weights.config
    rec = weights.recurrent
    if not 1 <= shift <= len(rec):
        raise IndexError("shift must lie in 1..k")
    u = y
    for j in range(shift, len(rec)):
        u = _checked_block(u, rec[j], cfg, cfg.prelude_layers + j).out
    u = loop_normalize(u, weights)
    if cfg.input_injection:
        u = inject(prelude_out, u, weights)
    for j in range(shift):
        u = _checked_block(u, rec[j], cfg, cfg.prelude_layers + j).out
    return u


def head_projection_blocks(lw: LayerWeights, config: ModelConfig, head: int) -> tuple[np.ndarray, np.ndarray]:
    return lw.head_block("wq", head, config.d_head), lw.head_block("wk", head, config.d_head)
