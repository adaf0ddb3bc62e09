"""
BERT-style masked-LM encoder and one-hidden-layer task heads.

Parameter names (also the checkpoint tensor names):

    tok_emb                      (30, d)
    pos_emb                      (max_len, d)
    layers.<i>.ln1.{g,b}         (d,)
    layers.<i>.attn.{q,k,v,o}.w  (d, d)   and .b (d,)
    layers.<i>.ln2.{g,b}         (d,)
    layers.<i>.ffn.in.w          (d, ffn) and .b (ffn,)
    layers.<i>.ffn.out.w         (ffn, d) and .b (d,)
    final_ln.{g,b}               (d,)
    mlm.w                        (d, 30)  and mlm.b (30,)

Task heads are stored next to the encoder under ``head.hidden.*`` and
``head.out.*``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from plm_kit import layers
from plm_kit import tensor as T
from plm_kit.config import EncoderConfig
from plm_kit.data_io import TaskKind, TaskSpec
from plm_kit.errors import ShapeError
from plm_kit.layers import Params
from plm_kit.tensor import Tensor
from plm_kit.tokenizer import TokenBatch, TokenSequence, encode_many


@dataclass
class TaskHead:
    kind: TaskKind
    num_classes: int
    hidden: int
    params: Params = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return 1 if self.kind is TaskKind.SEQUENCE_REGRESSION else self.num_classes

    def parameters(self) -> Params:
        return self.params


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: Params
    head: Optional[TaskHead] = None
    task: Optional[TaskSpec] = None

    def parameters(self) -> Params:
        """Encoder parameters only (the head keeps its own)."""
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def encoder_param_count(config: EncoderConfig) -> int:
    """Closed-form parameter count: embeddings, blocks, final norm and MLM head.

    V·d + max_len·d + layers·(4(d²+d) + 4d + 2·d·ffn + ffn + d) + 2d + d·V + V
    """
    d, v = config.hidden_dim, config.vocab_size
    return (
        v * d
        + config.max_len * d
        + config.num_layers * layers.block_param_count(d, config.ffn_dim)
        + 2 * d
        + d * v
        + v
    )


def init_encoder(config: EncoderConfig) -> EncoderModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.hidden_dim
    params: Params = {
        "tok_emb": layers.param(layers.trunc_normal(rng, (config.vocab_size, d))),
        "pos_emb": layers.param(layers.trunc_normal(rng, (config.max_len, d))),
    }
    for i in range(config.num_layers):
        layers.init_block(rng, params, f"layers.{i}", d, config.ffn_dim)
    layers.init_layer_norm(params, "final_ln", d)
    layers.init_linear(rng, params, "mlm", d, config.vocab_size)
    return EncoderModel(config=config, params=params)


# ── Forward ───────────────────────────────────────────────


def _as_batch(batch: Union[TokenBatch, Sequence[TokenSequence]]) -> TokenBatch:
    return batch if isinstance(batch, TokenBatch) else TokenBatch.from_sequences(list(batch))


def encode_ids(
    model: EncoderModel,
    ids: np.ndarray,
    attention_mask: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    attention_maps: Optional[list] = None,
) -> Tensor:
    """Hidden states (B, L, d) for raw (possibly corrupted) ids."""
    cfg = model.config
    ids = np.asarray(ids)
    if ids.ndim != 2 or np.shape(attention_mask) != ids.shape:
        raise ShapeError(
            f"ids {ids.shape} and attention_mask {np.shape(attention_mask)} must be (B, L)"
        )
    if ids.shape[1] > cfg.max_len:
        raise ShapeError(f"batch length {ids.shape[1]} exceeds encoder max_len {cfg.max_len}")
    if train_mode and cfg.dropout_rate > 0 and rng is None:
        rng = np.random.default_rng(cfg.seed)

    blocked = layers.attention_mask(np.asarray(attention_mask) == 1, cfg.num_heads, causal=False)
    x = layers.embed_tokens(model.params, ids)
    x = T.dropout(x, cfg.dropout_rate, rng, train_mode)
    for i in range(cfg.num_layers):
        x = layers.block_forward(
            model.params,
            f"layers.{i}",
            x,
            blocked,
            cfg.num_heads,
            cfg.dropout_rate,
            rng,
            train_mode,
            attention_maps,
        )
    return layers.apply_layer_norm(model.params, "final_ln", x)


def encode_batch(
    model: EncoderModel,
    batch: Union[TokenBatch, Sequence[TokenSequence]],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    attention_maps: Optional[list] = None,
) -> Tensor:
    batch = _as_batch(batch)
    return encode_ids(model, batch.ids, batch.attention_mask, train_mode, rng, attention_maps)


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    if hidden.ndim != 3 or hidden.shape[-1] != model.config.hidden_dim:
        raise ShapeError(
            f"expected hidden states (B, L, {model.config.hidden_dim}), got {hidden.shape}"
        )
    return layers.apply_linear(model.params, "mlm", hidden)


def pool(hidden: Tensor, attention_mask: np.ndarray) -> Tensor:
    """Mean over positions with attention_mask == 1, specials included."""
    mask = np.asarray(attention_mask, dtype=np.float64)
    if hidden.ndim != 3 or mask.shape != hidden.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match hidden states {hidden.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError("cannot pool a row whose attention mask is all zeros")
    weights = Tensor((mask / counts[:, None])[:, None, :])
    pooled = T.matmul(weights, hidden)
    return T.reshape(pooled, (hidden.shape[0], hidden.shape[2]))


# ── Task heads ────────────────────────────────────────────


def init_head(
    kind: Union[TaskKind, str],
    input_dim: int,
    num_classes: int = 2,
    hidden: int = 0,
    seed: int = 0,
) -> TaskHead:
    """One hidden layer (width ``hidden``, default input_dim) with GELU, then the output layer."""
    kind = TaskKind.parse(kind)
    hidden = hidden or input_dim
    if kind is TaskKind.TOKEN_CLASSIFICATION:
        num_classes = 2
    head = TaskHead(kind=kind, num_classes=num_classes, hidden=hidden)
    rng = np.random.default_rng(seed)
    layers.init_linear(rng, head.params, "head.hidden", input_dim, hidden)
    layers.init_linear(rng, head.params, "head.out", hidden, head.out_dim)
    return head


def head_forward(head: TaskHead, x: Tensor) -> Tensor:
    """Logits (B, C), per-token logits (B, L, C), or raw regression outputs (B,)."""
    expected = 3 if head.kind is TaskKind.TOKEN_CLASSIFICATION else 2
    if x.ndim != expected:
        raise ShapeError(
            f"{head.kind.value} head expects a {expected}-d input, got shape {x.shape}"
        )
    h = T.gelu(layers.apply_linear(head.params, "head.hidden", x))
    out = layers.apply_linear(head.params, "head.out", h)
    if head.kind is TaskKind.SEQUENCE_REGRESSION:
        return T.reshape(out, (x.shape[0],))
    return out


def features_for_head(head: TaskHead, hidden: Tensor, attention_mask) -> Tensor:
    if head.kind is TaskKind.TOKEN_CLASSIFICATION:
        return hidden
    return pool(hidden, attention_mask)


# ── Embeddings ────────────────────────────────────────────


def embed_sequences(
    model: EncoderModel, sequences: Sequence[str], batch_size: int = 32
) -> np.ndarray:
    """Pooled (N, d) embeddings, eval mode, in input order."""
    out = []
    with T.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = encode_many(sequences[start : start + batch_size], model.config.max_len)
            out.append(pool(encode_batch(model, batch), batch.attention_mask).data)
    if not out:
        return np.zeros((0, model.config.hidden_dim), dtype=np.float32)
    return np.concatenate(out, axis=0)
