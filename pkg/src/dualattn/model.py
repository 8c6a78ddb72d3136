"""Dual-encoder transformer with a parallel cross-attention decoder.

Two encoders (body and face) each embed their feature stream, add sinusoidal
positions and run ``enc_layers`` pre-norm self-attention/FFN blocks. Each of
the ``dec_layers`` decoder blocks runs causal self-attention, then attends to
both encoder outputs with the same normalised query, fuses the two results,
and applies an FFN.

Parameters live in a flat, ordered ``name -> Tensor`` mapping so optimiser and
checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import (FusionParams, MultiHeadParams, causal_mask, key_padding_mask,
                        parallel_cross_attention, multi_head)
from .errors import ConfigurationError, LengthError, VocabularyError
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3

STREAMS = ("body", "face")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``n_heads`` defaults to 12 (the decoder head count used in the original
    experiments), which forces ``d_model`` to be a multiple of 12; the default
    ``d_model=132`` satisfies that. Smaller synthetic setups typically use
    ``n_heads=4``.
    """

    d_in_body: int
    d_in_face: int
    vocab_size: int
    d_model: int = 132
    n_heads: int = 12
    enc_layers: int = 2
    dec_layers: int = 2
    d_ffn: int = 512
    dropout: float = 0.1
    max_src_len: int = 512
    max_tgt_len: int = 128
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_in_body", "d_in_face", "vocab_size", "d_model", "n_heads", "d_ffn",
                     "max_src_len", "max_tgt_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigurationError("layer counts must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size <= EOS:
            raise ConfigurationError("vocab_size must include the reserved tokens")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Ordered mapping of parameter names to tensors for one model."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()}, self.config)

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()}, self.config)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def mha(self, prefix: str) -> MultiHeadParams:
        g = self.tensors
        return MultiHeadParams(*(g[f"{prefix}.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
                               n_heads=self.config.n_heads)

    def fusion(self, prefix: str) -> FusionParams:
        g = self.tensors
        return FusionParams(g[f"{prefix}.w"], g[f"{prefix}.b"], g[f"{prefix}.gain"], g[f"{prefix}.bias"])


def is_decayed(name: str, t) -> bool:
    """Weight decay applies to matrices only, never to biases or norm parameters."""
    return np.ndim(t.data if isinstance(t, Tensor) else t) >= 2


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in canonical order."""
    d, f, V = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}

    def mha(p):
        for n in ("q", "k", "v", "o"):
            shapes[f"{p}.w{n}"] = (d, d)
            shapes[f"{p}.b{n}"] = (d,)

    def norm(p):
        shapes[f"{p}.gain"] = (d,)
        shapes[f"{p}.bias"] = (d,)

    def ffn(p):
        shapes[f"{p}.w1"] = (d, f)
        shapes[f"{p}.b1"] = (f,)
        shapes[f"{p}.w2"] = (f, d)
        shapes[f"{p}.b2"] = (d,)

    for stream, d_in in (("body", config.d_in_body), ("face", config.d_in_face)):
        shapes[f"enc_{stream}.embed.w"] = (d_in, d)
        shapes[f"enc_{stream}.embed.b"] = (d,)
        for i in range(config.enc_layers):
            p = f"enc_{stream}.{i}"
            norm(f"{p}.ln_attn")
            mha(f"{p}.self_attn")
            norm(f"{p}.ln_ffn")
            ffn(f"{p}.ffn")
        norm(f"enc_{stream}.ln_final")
    shapes["dec.embed"] = (V, d)
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        norm(f"{p}.ln_self")
        mha(f"{p}.self_attn")
        norm(f"{p}.ln_query")
        mha(f"{p}.cross_body")
        mha(f"{p}.cross_face")
        shapes[f"{p}.fusion.w"] = (2 * d, d)
        shapes[f"{p}.fusion.b"] = (d,)
        shapes[f"{p}.fusion.gain"] = (d,)
        shapes[f"{p}.fusion.bias"] = (d,)
        ffn(f"{p}.ffn")
    norm("dec.ln_final")
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


def init_params(config: ModelConfig, dtype=np.float32) -> ModelParams:
    """Glorot-uniform matrices, zero biases, unit norm gains; seeded by ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelParams(tensors, config)


@lru_cache(maxsize=32)
def _sinusoid(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def positional_table(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal position encodings ``[length, d_model]``; shared by all streams."""
    return _sinusoid(length, d_model).astype(dtype)


def _ffn(x: Tensor, params: ModelParams, prefix: str, config: ModelConfig, rng, training: bool) -> Tensor:
    h = T.relu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    h = T.dropout(h, config.dropout, rng, training)
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _batched(x, dtype) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim == 2:
        return T.reshape(t, (1,) + t.shape), True
    return t, False


def encode_stream(X, stream: str, params: ModelParams, pad=None, *,
                  training: bool = False, rng=None) -> Tensor:
    """Encode one feature stream ``[B, T, d_in]`` (or ``[T, d_in]``) to ``[B, T, d_model]``.

    ``pad`` is a boolean ``[B, T]`` array with ``True`` on padded frames;
    padded frames are never attended to.
    """
    config = params.config
    if stream not in STREAMS:
        raise ConfigurationError(f"unknown stream {stream!r}")
    x, squeeze = _batched(X, params.dtype)
    B, L, d_in = x.shape
    expected = config.d_in_body if stream == "body" else config.d_in_face
    if d_in != expected:
        raise ConfigurationError(f"{stream} features have width {d_in}, model expects {expected}")
    if L > config.max_src_len:
        raise LengthError(f"{stream} sequence of {L} frames exceeds max_src_len={config.max_src_len}")
    pad = np.zeros((B, L), bool) if pad is None else np.asarray(pad, bool).reshape(B, L)
    p = f"enc_{stream}"
    h = T.linear(x, params[f"{p}.embed.w"], params[f"{p}.embed.b"])
    h = T.add(h, Tensor(positional_table(L, config.d_model, params.dtype)))
    mask = key_padding_mask(pad, L)
    for i in range(config.enc_layers):
        lp = f"{p}.{i}"
        x = _norm(h, params, f"{lp}.ln_attn")
        a, _ = multi_head(x, x, params.mha(f"{lp}.self_attn"), mask,
                          dropout=config.dropout, rng=rng, training=training)
        h = T.add(h, a)
        h = T.add(h, _ffn(_norm(h, params, f"{lp}.ln_ffn"), params, f"{lp}.ffn", config, rng, training))
    z = _norm(h, params, f"{p}.ln_final")
    return T.reshape(z, z.shape[1:]) if squeeze else z


@dataclass
class DecoderTrace:
    """Attention weights and pre-merge contribution norms of one decoder pass.

    Arrays carry a leading batch axis: ``w_body`` is ``[B, layers, heads, t, T_b]``,
    ``w_face`` ``[B, layers, heads, t, T_f]``, ``norm_body`` / ``norm_face`` are
    ``[B, layers, t]`` Euclidean norms of each stream's attention output.
    """

    w_body: np.ndarray
    w_face: np.ndarray
    norm_body: np.ndarray
    norm_face: np.ndarray


def decode_teacher_forced(z_b: Tensor, z_f: Tensor, tokens, params: ModelParams,
                          body_pad=None, face_pad=None, *, training: bool = False,
                          rng=None) -> tuple[Tensor, DecoderTrace]:
    """Run the decoder on ``tokens`` ``[B, t]`` (each row starting with BOS).

    Returns logits ``[B, t, vocab_size]``; position ``i`` depends only on
    tokens ``<= i`` and on both encoder outputs.
    """
    config = params.config
    tok = np.asarray(tokens)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None, :]
        z_b = T.reshape(z_b, (1,) + z_b.shape) if z_b.ndim == 2 else z_b
        z_f = T.reshape(z_f, (1,) + z_f.shape) if z_f.ndim == 2 else z_f
    B, t = tok.shape
    if t > config.max_tgt_len:
        raise LengthError(f"target length {t} exceeds max_tgt_len={config.max_tgt_len}")
    if tok.size and (tok.min() < 0 or tok.max() >= config.vocab_size):
        raise VocabularyError(f"token id outside [0, {config.vocab_size})")
    if t and not np.all(tok[:, 0] == BOS):
        raise VocabularyError("decoder input must start with BOS")
    T_b, T_f = z_b.shape[1], z_f.shape[1]
    body_pad = np.zeros((B, T_b), bool) if body_pad is None else np.asarray(body_pad, bool)
    face_pad = np.zeros((B, T_f), bool) if face_pad is None else np.asarray(face_pad, bool)
    body_mask = key_padding_mask(body_pad, t)
    face_mask = key_padding_mask(face_pad, t)
    self_mask = causal_mask(t)

    h = T.embedding_lookup(params["dec.embed"], tok)
    h = T.add(h, Tensor(positional_table(t, config.d_model, params.dtype)))
    kw = dict(dropout=config.dropout, rng=rng, training=training)
    w_b, w_f, n_b, n_f = [], [], [], []
    for i in range(config.dec_layers):
        lp = f"dec.{i}"
        x = _norm(h, params, f"{lp}.ln_self")
        a, _ = multi_head(x, x, params.mha(f"{lp}.self_attn"), self_mask, **kw)
        h = T.add(h, a)
        s = _norm(h, params, f"{lp}.ln_query")
        out = parallel_cross_attention(s, z_b, z_f, params.mha(f"{lp}.cross_body"),
                                       params.mha(f"{lp}.cross_face"), params.fusion(f"{lp}.fusion"),
                                       body_mask, face_mask, **kw)
        h = T.add(out.fused, _ffn(out.fused, params, f"{lp}.ffn", config, rng, training))
        w_b.append(out.w_body.data)
        w_f.append(out.w_face.data)
        n_b.append(np.linalg.norm(out.attn_body.data, axis=-1))
        n_f.append(np.linalg.norm(out.attn_face.data, axis=-1))
    h = _norm(h, params, "dec.ln_final")
    logits = T.linear(h, params["out.w"], params["out.b"])

    def stack(xs, shape):
        return np.stack(xs, axis=1) if xs else np.zeros(shape)

    trace = DecoderTrace(
        stack(w_b, (B, 0, config.n_heads, t, T_b)), stack(w_f, (B, 0, config.n_heads, t, T_f)),
        stack(n_b, (B, 0, t)), stack(n_f, (B, 0, t)))
    if squeeze:
        logits = T.reshape(logits, logits.shape[1:])
    return logits, trace


def encode(params: ModelParams, body, face, body_pad=None, face_pad=None, *,
           training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    z_b = encode_stream(body, "body", params, body_pad, training=training, rng=rng)
    z_f = encode_stream(face, "face", params, face_pad, training=training, rng=rng)
    return z_b, z_f


def forward(params: ModelParams, batch, *, training: bool = False, rng=None) -> tuple[Tensor, DecoderTrace]:
    """Teacher-forced logits for a padded :class:`~dualattn.data.Batch`.

    The decoder sees ``tokens[:, :-1]``; logits predict ``tokens[:, 1:]``.
    """
    z_b, z_f = encode(params, batch.body, batch.face, batch.body_pad, batch.face_pad,
                      training=training, rng=rng)
    return decode_teacher_forced(z_b, z_f, batch.tokens[:, :-1], params, batch.body_pad, batch.face_pad,
                                 training=training, rng=rng)
