"""Transformer building blocks: embeddings, causal attention, timestep MLP.

All modules are plain containers of Tensors plus a forward ``__call__``;
``named_parameters`` walks them in a fixed order for the optimizer and
the checkpoint writer. Initialization follows the usual transformer
recipe: truncated-normal(0.02) affine weights, zero biases, unit
layer-norm gains, normal(0.02) embedding rows with a zeroed padding row.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float64) -> np.ndarray:
    """Normal(0, std^2) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng, d_in: int, d_out: int, dtype=np.float64) -> "Linear":
        w = Tensor(truncated_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class LayerNorm:
    def __init__(self, gain: Tensor, bias: Tensor, eps: float = 1e-5):
        self.gain = gain
        self.bias = bias
        self.eps = eps

    @classmethod
    def create(cls, dim: int, dtype=np.float64) -> "LayerNorm":
        return cls(
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}gain", self.gain
        yield f"{prefix}bias", self.bias


class EmbeddingTable:
    """(N+1) x D item embeddings; row 0 is the padding row and stays zero."""

    def __init__(self, table: Tensor, n_items: int, frozen: bool = False):
        self.table = table
        self.n_items = n_items
        self.frozen = frozen

    @classmethod
    def create(cls, rng, n_items: int, dim: int, dtype=np.float64) -> "EmbeddingTable":
        rows = rng.normal(0.0, INIT_STD, size=(n_items + 1, dim)).astype(dtype)
        rows[0] = 0.0
        return cls(Tensor(rows, requires_grad=True), n_items)

    @property
    def dim(self) -> int:
        return self.table.data.shape[1]

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding_gather(self.table, ids)

    def item_rows(self) -> np.ndarray:
        """The N real item rows (padding row excluded), as a plain array."""
        return self.table.data[1:]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}table", self.table


def causal_attention_bias(pad_mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive (B, 1, L, L) bias: position i sees keys j <= i that are not padding.

    The diagonal stays open even at padded queries so no softmax row is
    fully masked; padded positions are never used as keys by real queries
    and their outputs are dropped by the loss masks.
    """
    pad_mask = np.asarray(pad_mask)
    b, length = pad_mask.shape
    causal = np.tril(np.ones((length, length), dtype=bool))
    allowed = causal[None] & (pad_mask[:, None, :] > 0)
    allowed |= np.eye(length, dtype=bool)[None]
    bias = np.where(allowed, 0.0, T.MASK_BIAS).astype(dtype)
    return bias[:, None]


class MultiHeadCausalSelfAttention:
    def __init__(self, wq: Linear, wk: Linear, wv: Linear, wo: Linear, heads: int, dropout_rate: float):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.heads = heads
        self.dropout_rate = dropout_rate

    @classmethod
    def create(cls, rng, dim: int, heads: int, dropout_rate: float, dtype=np.float64):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by heads {heads}")
        make = lambda: Linear.create(rng, dim, dim, dtype=dtype)
        return cls(make(), make(), make(), make(), heads, dropout_rate)

    def __call__(self, x: Tensor, bias: np.ndarray, rng=None, train: bool = False) -> Tensor:
        b, length, dim = x.shape
        dh = dim // self.heads

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (b, length, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.add(T.mul(scores, 1.0 / math.sqrt(dh)), bias)
        probs = T.softmax_lastdim(scores)
        probs = T.dropout(probs, self.dropout_rate, rng, train=train)
        ctx = T.matmul(probs, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, length, dim))
        return self.wo(merged)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from lin.named_parameters(f"{prefix}{tag}.")


class EncoderLayer:
    """Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, ln1: LayerNorm, attn: MultiHeadCausalSelfAttention,
                 ln2: LayerNorm, ffn_in: Linear, ffn_out: Linear, dropout_rate: float):
        self.ln1, self.attn, self.ln2 = ln1, attn, ln2
        self.ffn_in, self.ffn_out = ffn_in, ffn_out
        self.dropout_rate = dropout_rate

    @classmethod
    def create(cls, rng, dim: int, heads: int, ffn_dim: int, dropout_rate: float, dtype=np.float64):
        return cls(
            LayerNorm.create(dim, dtype=dtype),
            MultiHeadCausalSelfAttention.create(rng, dim, heads, dropout_rate, dtype=dtype),
            LayerNorm.create(dim, dtype=dtype),
            Linear.create(rng, dim, ffn_dim, dtype=dtype),
            Linear.create(rng, ffn_dim, dim, dtype=dtype),
            dropout_rate,
        )

    def __call__(self, x: Tensor, bias: np.ndarray, rng=None, train: bool = False) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), bias, rng=rng, train=train))
        h = self.ffn_out(T.gelu(self.ffn_in(self.ln2(x))))
        h = T.dropout(h, self.dropout_rate, rng, train=train)
        return T.add(x, h)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.ln1.named_parameters(f"{prefix}ln1.")
        yield from self.attn.named_parameters(f"{prefix}attn.")
        yield from self.ln2.named_parameters(f"{prefix}ln2.")
        yield from self.ffn_in.named_parameters(f"{prefix}ffn_in.")
        yield from self.ffn_out.named_parameters(f"{prefix}ffn_out.")


def sinusoidal_table(max_len: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class CausalEncoderStack:
    """Stack of causal encoder layers with a closing layer norm.

    Positional encoding is off by default; the causal mask alone carries
    order information. When enabled, a sinusoidal table is added to the
    input embeddings.
    """

    def __init__(self, layers: list[EncoderLayer], final_ln: LayerNorm, heads: int,
                 ffn_dim: int, dropout_rate: float, max_len: int,
                 use_positional_encoding: bool = False):
        self.layers = layers
        self.final_ln = final_ln
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout_rate = dropout_rate
        self.max_len = max_len
        self.use_positional_encoding = use_positional_encoding
        dim = final_ln.gain.data.shape[0]
        dtype = final_ln.gain.data.dtype
        self._pe = sinusoidal_table(max_len, dim, dtype) if use_positional_encoding else None

    @classmethod
    def create(cls, rng, dim: int, n_layers: int = 2, heads: int = 2, ffn_dim: int | None = None,
               dropout_rate: float = 0.1, max_len: int = 50,
               use_positional_encoding: bool = False, dtype=np.float64):
        ffn_dim = 4 * dim if ffn_dim is None else ffn_dim
        layers = [EncoderLayer.create(rng, dim, heads, ffn_dim, dropout_rate, dtype=dtype)
                  for _ in range(n_layers)]
        return cls(layers, LayerNorm.create(dim, dtype=dtype), heads, ffn_dim,
                   dropout_rate, max_len, use_positional_encoding)

    def __call__(self, x: Tensor, pad_mask: np.ndarray, rng=None, train: bool = False) -> Tensor:
        b, length, dim = x.shape
        if length > self.max_len:
            raise ConfigError(f"sequence length {length} exceeds configured maximum {self.max_len}")
        if self._pe is not None:
            x = T.add(x, self._pe[None, :length])
        bias = causal_attention_bias(pad_mask, dtype=x.data.dtype)
        for layer in self.layers:
            x = layer(x, bias, rng=rng, train=train)
        return self.final_ln(x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layers.{i}.")
        yield from self.final_ln.named_parameters(f"{prefix}final_ln.")


class TimestepMLP:
    """Maps a per-token integer timestep to a D-dim embedding.

    The step is rescaled to 1000 * t / T before the two affine maps with
    a SiLU in between, so models trained with different T see comparable
    input magnitudes.
    """

    def __init__(self, lin_in: Linear, lin_out: Linear):
        self.lin_in = lin_in
        self.lin_out = lin_out

    @classmethod
    def create(cls, rng, dim: int, dtype=np.float64) -> "TimestepMLP":
        return cls(Linear.create(rng, 1, dim, dtype=dtype), Linear.create(rng, dim, dim, dtype=dtype))

    def __call__(self, t_grid: np.ndarray, t_max: int) -> Tensor:
        t_grid = np.asarray(t_grid)
        if t_grid.size and (t_grid.min() < 0 or t_grid.max() > t_max):
            raise ValueError(
                f"timestep grid values must lie in [0, {t_max}], got "
                f"[{t_grid.min()}, {t_grid.max()}]"
            )
        dtype = self.lin_in.weight.data.dtype
        scaled = (1000.0 * t_grid.astype(np.float64) / t_max).astype(dtype)[..., None]
        return self.lin_out(T.silu(self.lin_in(Tensor(scaled, dtype=dtype))))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.lin_in.named_parameters(f"{prefix}lin_in.")
        yield from self.lin_out.named_parameters(f"{prefix}lin_out.")
