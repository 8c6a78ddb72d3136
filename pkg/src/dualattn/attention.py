"""Scaled dot-product, multi-head and parallel cross-attention.

Masks are boolean arrays where ``True`` means *may attend*. Their last two
axes are ``[query_len, key_len]``; leading axes broadcast against the batch
axes of the inputs (a head axis is inserted by :func:`multi_head`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor

# Large finite negative logit for disallowed positions: exp() underflows to
# exactly zero in both precisions without producing inf - inf.
MASK_LOGIT = -1e9


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular ``[length, length]`` mask."""
    return np.tril(np.ones((length, length), dtype=bool))


def key_padding_mask(pad: np.ndarray, query_len: int) -> np.ndarray:
    """Turn a ``[B, T]`` pad indicator (True = padded) into a ``[B, q, T]`` mask."""
    pad = np.asarray(pad, dtype=bool)
    allowed = ~pad[..., None, :]
    return np.broadcast_to(allowed, pad.shape[:-1] + (query_len, pad.shape[-1]))


def check_mask(mask: np.ndarray, scores_shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, scores_shape)
    except ValueError:
        raise DimensionError(f"mask of shape {mask.shape} does not cover scores {scores_shape}") from None
    if not full.any(axis=-1).all():
        raise UsageError("attention mask leaves a query row with no allowed key")
    return mask


@dataclass
class MultiHeadParams:
    """Projections for one multi-head attention layer.

    ``wq``, ``wk``, ``wv`` are ``[d_model, n_heads * d_k]``: columns
    ``h*d_k:(h+1)*d_k`` are head ``h``'s projection. ``wo`` maps the
    concatenated heads back to ``d_model``.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.wq.shape[1] // self.n_heads


@dataclass
class FusionParams:
    """Merge projection ``[2*d_model, d_model]`` and the post-fusion norm."""

    w_merge: Tensor
    b_merge: Tensor
    gain: Tensor
    bias: Tensor


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, mask=None, *,
                       dropout: float = 0.0, rng=None, training: bool = False) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    Returns ``(output, weights)``; masked weights are exactly zero. Dropout,
    when active, is applied to the weights used for the output only.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} differs from key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = check_mask(mask, scores.shape)
        scores = T.masked_fill(scores, ~mask, MASK_LOGIT)
    weights = T.softmax_lastaxis(scores)
    return T.matmul(T.dropout(weights, dropout, rng, training), v), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., L, H*dk] -> [..., H, L, dk]
    *lead, L, width = x.shape
    return T.swapaxes(T.reshape(x, (*lead, L, n_heads, width // n_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, L, dk] -> [..., L, H*dk]
    *lead, H, L, dk = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), (*lead, L, H * dk))


def multi_head(x_q: Tensor, x_kv: Tensor, params: MultiHeadParams, mask=None, *,
               dropout: float = 0.0, rng=None, training: bool = False) -> tuple[Tensor, Tensor]:
    """Multi-head attention of ``x_q`` over ``x_kv``.

    Returns ``(output [..., q, d_model], weights [..., n_heads, q, k])``. The
    returned weights are taken before dropout.
    """
    d_model = params.d_model
    if params.wq.shape[1] % params.n_heads:
        raise ConfigurationError(f"projection width {params.wq.shape[1]} not divisible by {params.n_heads} heads")
    if x_q.shape[-1] != d_model or x_kv.shape[-1] != d_model:
        raise DimensionError(f"inputs {x_q.shape}, {x_kv.shape} do not have width d_model={d_model}")
    h = params.n_heads
    q = _split_heads(T.linear(x_q, params.wq, params.bq), h)
    k = _split_heads(T.linear(x_kv, params.wk, params.bk), h)
    v = _split_heads(T.linear(x_kv, params.wv, params.bv), h)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :, :]
    heads, weights = scaled_dot_product(q, k, v, mask, dropout=dropout, rng=rng, training=training)
    return T.linear(_merge_heads(heads), params.wo, params.bo), weights


class CrossAttentionOutput(NamedTuple):
    fused: Tensor
    w_body: Tensor
    w_face: Tensor
    attn_body: Tensor
    attn_face: Tensor


def parallel_cross_attention(s: Tensor, z_b: Tensor, z_f: Tensor,
                             body_params: MultiHeadParams, face_params: MultiHeadParams,
                             fusion: FusionParams, body_mask=None, face_mask=None, *,
                             dropout: float = 0.0, rng=None, training: bool = False,
                             eps: float = 1e-5) -> CrossAttentionOutput:
    """Attend from one query stream ``s`` to both encoder streams in parallel.

    Each stream gets its own multi-head attention with the same query. The two
    outputs are concatenated (body first), merged by a linear map, added to
    ``s`` and layer-normalised. ``w_body`` / ``w_face`` are the post-softmax
    weights of each stream, ``[..., n_heads, t, T]``; ``attn_body`` /
    ``attn_face`` are the per-stream outputs before the merge.
    """
    if not (s.shape[-1] == z_b.shape[-1] == z_f.shape[-1]):
        raise DimensionError(f"streams disagree on d_model: {s.shape}, {z_b.shape}, {z_f.shape}")
    if fusion.w_merge.shape[0] != 2 * s.shape[-1]:
        raise ConfigurationError(f"merge projection expects {fusion.w_merge.shape[0]} inputs, "
                                 f"need {2 * s.shape[-1]}")
    kw = dict(dropout=dropout, rng=rng, training=training)
    attn_body, w_body = multi_head(s, z_b, body_params, body_mask, **kw)
    attn_face, w_face = multi_head(s, z_f, face_params, face_mask, **kw)
    merged = T.linear(T.concat_lastaxis(attn_body, attn_face), fusion.w_merge, fusion.b_merge)
    fused = T.layer_norm(T.add(s, merged), fusion.gain, fusion.bias, eps)
    return CrossAttentionOutput(fused, w_body, w_face, attn_body, attn_face)
