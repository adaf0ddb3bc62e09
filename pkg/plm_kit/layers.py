"""
Transformer building blocks shared by the encoder and the decoder.

Parameters live in flat ``{name: Tensor}`` dicts so optimizers and
checkpoints can treat every model the same way. Blocks are pre-LN:
``x + attn(ln1(x))`` then ``x + ffn(ln2(x))``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from plm_kit import tensor as T
from plm_kit.errors import ShapeError
from plm_kit.tensor import Tensor

Params = dict[str, Tensor]

INIT_STD = 0.02
LN_EPS = 1e-5


# ── Initialization ────────────────────────────────────────


def trunc_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD
) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by resampling."""
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_linear(rng: np.random.Generator, params: Params, name: str, d_in: int, d_out: int) -> None:
    params[f"{name}.w"] = param(trunc_normal(rng, (d_in, d_out)))
    params[f"{name}.b"] = param(np.zeros(d_out))


def init_layer_norm(params: Params, name: str, d: int) -> None:
    params[f"{name}.g"] = param(np.ones(d))
    params[f"{name}.b"] = param(np.zeros(d))


def init_block(rng: np.random.Generator, params: Params, prefix: str, d: int, ffn: int) -> None:
    init_layer_norm(params, f"{prefix}.ln1", d)
    for proj in ("q", "k", "v", "o"):
        init_linear(rng, params, f"{prefix}.attn.{proj}", d, d)
    init_layer_norm(params, f"{prefix}.ln2", d)
    init_linear(rng, params, f"{prefix}.ffn.in", d, ffn)
    init_linear(rng, params, f"{prefix}.ffn.out", ffn, d)


def block_param_count(d: int, ffn: int) -> int:
    """Four d×d projections with biases, two layer norms, and the d→ffn→d feed-forward."""
    return 4 * (d * d + d) + 2 * (2 * d) + (d * ffn + ffn) + (ffn * d + d)


# ── Forward ───────────────────────────────────────────────


def apply_linear(params: Params, name: str, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def apply_layer_norm(params: Params, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], LN_EPS)


def attention_mask(key_valid: np.ndarray, num_heads: int, causal: bool) -> np.ndarray:
    """Boolean (B*H, L, L) mask, True where a query may NOT look at a key."""
    b, length = key_valid.shape
    pad = ~key_valid.astype(bool)[:, None, None, :]
    blocked = np.broadcast_to(pad, (b, num_heads, length, length))
    if causal:
        blocked = blocked | np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.ascontiguousarray(blocked).reshape(b * num_heads, length, length)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, length, d = x.shape
    x = T.reshape(x, (b, length, num_heads, d // num_heads))
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * num_heads, length, d // num_heads))


def _merge_heads(x: Tensor, batch: int, num_heads: int) -> Tensor:
    _, length, dh = x.shape
    x = T.reshape(x, (batch, num_heads, length, dh))
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (batch, length, num_heads * dh))


def self_attention(
    params: Params,
    prefix: str,
    x: Tensor,
    blocked: np.ndarray,
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
    attention_maps: Optional[list] = None,
) -> Tensor:
    batch, length, d = x.shape
    dh = d // num_heads
    q = _split_heads(apply_linear(params, f"{prefix}.q", x), num_heads)
    k = _split_heads(apply_linear(params, f"{prefix}.k", x), num_heads)
    v = _split_heads(apply_linear(params, f"{prefix}.v", x), num_heads)

    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    scores = T.masked_fill(scores, blocked, -np.inf)
    probs = T.softmax(scores, axis=-1)
    if attention_maps is not None:
        attention_maps.append(probs.data.reshape(batch, num_heads, length, length).copy())
    probs = T.dropout(probs, dropout_rate, rng, train)

    context = _merge_heads(T.matmul(probs, v), batch, num_heads)
    return apply_linear(params, f"{prefix}.o", context)


def block_forward(
    params: Params,
    prefix: str,
    x: Tensor,
    blocked: np.ndarray,
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
    attention_maps: Optional[list] = None,
) -> Tensor:
    h = apply_layer_norm(params, f"{prefix}.ln1", x)
    h = self_attention(
        params, f"{prefix}.attn", h, blocked, num_heads, dropout_rate, rng, train, attention_maps
    )
    x = x + T.dropout(h, dropout_rate, rng, train)

    h = apply_layer_norm(params, f"{prefix}.ln2", x)
    h = T.gelu(apply_linear(params, f"{prefix}.ffn.in", h))
    h = apply_linear(params, f"{prefix}.ffn.out", h)
    return x + T.dropout(h, dropout_rate, rng, train)


def add_positions(x: Tensor, pos_emb: Tensor, offset: int = 0) -> Tensor:
    """Add rows ``offset..offset+L`` of a learned (max_len, d) table to x (B, L, d)."""
    b, length, d = x.shape
    if offset + length > pos_emb.shape[0]:
        raise ShapeError(
            f"sequence length {offset + length} exceeds model max_len {pos_emb.shape[0]}"
        )
    pos = T.reshape(T.narrow(pos_emb, 0, offset, length), (length * d,))
    return T.reshape(T.reshape(x, (b, length * d)) + pos, (b, length, d))


def embed_tokens(params: Params, ids: np.ndarray) -> Tensor:
    """Token plus positional embeddings for a (B, L) id array."""
    return add_positions(T.embedding(params["tok_emb"], ids), params["pos_emb"])
