"""Multi-head attention encoder/decoder blocks.

The encoder self-attends over fixed-image tokens and its output (the
memory) feeds the decoder's cross-attention, whose queries come from the
moving-image token stream. Every sub-layer is post-norm: residual add,
then layer normalization, then ReLU.
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .errors import NonFiniteError, ShapeMismatchError


@dataclass
class AttentionParams:
    w_q: Tensor  # (heads, d, k)
    w_k: Tensor  # (heads, d, k)
    w_v: Tensor  # (heads, d, k)
    w_c: Tensor  # (d, d) output projection over concatenated heads
    norm_gain: Tensor  # (d,)
    norm_bias: Tensor  # (d,)

    @property
    def heads(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.w_q.shape[2]


@dataclass
class BlockParams:
    self_attention: AttentionParams
    cross_attention: AttentionParams | None
    ff_w1: Tensor  # (d, hidden)
    ff_b1: Tensor  # (hidden,)
    ff_w2: Tensor  # (hidden, d)
    ff_b2: Tensor  # (d,)
    ff_norm_gain: Tensor  # (d,)
    ff_norm_bias: Tensor  # (d,)
    dropout_rate: float = 0.5


@dataclass
class TransformerParams:
    encoder_blocks: list[BlockParams] = field(default_factory=list)
    decoder_blocks: list[BlockParams] = field(default_factory=list)

    @property
    def num_blocks(self):
        return len(self.encoder_blocks)


def init_attention_params(dim, heads, rng, dtype=np.float32):
    if dim % heads:
        raise ShapeMismatchError(f"heads {heads} must divide dim {dim}")
    k = dim // heads
    bound = 1.0 / np.sqrt(dim)

    def proj(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    return AttentionParams(
        w_q=proj((heads, dim, k)),
        w_k=proj((heads, dim, k)),
        w_v=proj((heads, dim, k)),
        w_c=proj((dim, dim)),
        norm_gain=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        norm_bias=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


def init_block_params(dim, heads, rng, dtype=np.float32, cross=False, dropout_rate=0.5, hidden=None):
    hidden = 4 * dim if hidden is None else hidden
    bound_in = 1.0 / np.sqrt(dim)
    bound_hidden = 1.0 / np.sqrt(hidden)
    return BlockParams(
        self_attention=init_attention_params(dim, heads, rng, dtype),
        cross_attention=init_attention_params(dim, heads, rng, dtype) if cross else None,
        ff_w1=Tensor(rng.uniform(-bound_in, bound_in, (dim, hidden)).astype(dtype), requires_grad=True),
        ff_b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        ff_w2=Tensor(rng.uniform(-bound_hidden, bound_hidden, (hidden, dim)).astype(dtype), requires_grad=True),
        ff_b2=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        ff_norm_gain=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        ff_norm_bias=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        dropout_rate=dropout_rate,
    )


def init_transformer_params(dim, heads, blocks, rng, dtype=np.float32, dropout_rate=0.5, hidden=None):
    return TransformerParams(
        encoder_blocks=[
            init_block_params(dim, heads, rng, dtype, cross=False, dropout_rate=dropout_rate, hidden=hidden)
            for _ in range(blocks)
        ],
        decoder_blocks=[
            init_block_params(dim, heads, rng, dtype, cross=True, dropout_rate=dropout_rate, hidden=hidden)
            for _ in range(blocks)
        ],
    )


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _per_head(x, w):
    """(…, n, d) @ (heads, d, k) -> (…, heads, n, k)."""
    if x.ndim == 2:
        return engine.matmul(x, w)
    b, n, d = x.shape
    return engine.matmul(engine.reshape(x, (b, 1, n, d)), w)


def attention_weights(queries_from, keys_values_from, params):
    """Row-stochastic attention matrix from scaled query-key dot products."""
    q_src, kv_src = _as_tensor(queries_from), _as_tensor(keys_values_from)
    _check_inputs(q_src, kv_src, params)
    # scale queries rather than the much larger score matrix
    q = engine.mul(_per_head(q_src, params.w_q), 1.0 / np.sqrt(params.head_dim))
    k = _per_head(kv_src, params.w_k)
    k_t = engine.transpose(k, _swap_last_two(k.ndim))
    alpha = engine.softmax(engine.matmul(q, k_t))
    if np.isnan(alpha.data.min()):  # min propagates any NaN without a temp array
        raise NonFiniteError("attention weights contain NaN (logit overflow)")
    return alpha


def multi_head_attention(queries_from, keys_values_from, params, dropout=0.0, training=False, rng=None):
    """Attention-weighted value mixture, heads concatenated then projected.

    Dropout applies to the attention weights, only in training mode.
    """
    q_src, kv_src = _as_tensor(queries_from), _as_tensor(keys_values_from)
    alpha = attention_weights(q_src, kv_src, params)
    if training and dropout > 0.0:
        alpha = engine.dropout(alpha, dropout, rng)
    v = _per_head(kv_src, params.w_v)
    ctx = engine.matmul(alpha, v)  # (…, heads, n_q, k)
    ctx = engine.transpose(ctx, _heads_to_last(ctx.ndim))
    lead = ctx.shape[:-2]
    merged = engine.reshape(ctx, lead + (params.heads * params.head_dim,))
    return engine.matmul(merged, params.w_c)


def _check_inputs(q_src, kv_src, params):
    d = params.w_q.shape[1]
    if q_src.shape[-1] != d or kv_src.shape[-1] != d:
        raise ShapeMismatchError(
            f"token dim mismatch: queries {q_src.shape}, keys/values {kv_src.shape}, "
            f"params expect d={d}"
        )
    if kv_src.shape[-2] == 0:
        raise ShapeMismatchError("key/value sequence is empty")


def _swap_last_two(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _heads_to_last(ndim):
    # (…, heads, n, k) -> (…, n, heads, k)
    axes = list(range(ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return tuple(axes)


def norm_relu(x, gain, bias):
    """Per-row layer normalization followed by ReLU (entries end up >= 0)."""
    return engine.relu(engine.layer_norm(_as_tensor(x), gain, bias))


def _feedforward(x, block, training, rng):
    h = engine.relu(engine.add(engine.matmul(x, block.ff_w1), block.ff_b1))
    if training and block.dropout_rate > 0.0:
        h = engine.dropout(h, block.dropout_rate, rng)
    return engine.add(engine.matmul(h, block.ff_w2), block.ff_b2)


def _encoder_block(x, block, training, rng):
    attn = multi_head_attention(x, x, block.self_attention, block.dropout_rate, training, rng)
    x = norm_relu(engine.add(x, attn), block.self_attention.norm_gain, block.self_attention.norm_bias)
    x = norm_relu(engine.add(x, _feedforward(x, block, training, rng)), block.ff_norm_gain, block.ff_norm_bias)
    return x


def _decoder_block(x, memory, block, training, rng):
    attn = multi_head_attention(x, x, block.self_attention, block.dropout_rate, training, rng)
    x = norm_relu(engine.add(x, attn), block.self_attention.norm_gain, block.self_attention.norm_bias)
    cross = multi_head_attention(x, memory, block.cross_attention, block.dropout_rate, training, rng)
    x = norm_relu(engine.add(x, cross), block.cross_attention.norm_gain, block.cross_attention.norm_bias)
    x = norm_relu(engine.add(x, _feedforward(x, block, training, rng)), block.ff_norm_gain, block.ff_norm_bias)
    return x


def encode(fixed_tokens, params, training=False, rng=None):
    """Self-attention stack over fixed-image tokens; output is the memory."""
    x = _as_tensor(fixed_tokens)
    for block in params.encoder_blocks:
        x = _encoder_block(x, block, training, rng)
    return x


def decode(moving_tokens, memory, params, training=False, rng=None):
    """Decoder stack: self-attention on the moving stream, cross-attention
    into the encoder memory, then feedforward; shape follows the moving stream."""
    x = _as_tensor(moving_tokens)
    memory = _as_tensor(memory)
    if x.shape[-1] != memory.shape[-1]:
        raise ShapeMismatchError(
            f"moving tokens dim {x.shape[-1]} != memory dim {memory.shape[-1]}"
        )
    for block in params.decoder_blocks:
        x = _decoder_block(x, memory, block, training, rng)
    return x
