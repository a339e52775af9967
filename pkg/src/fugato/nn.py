"""Neural-network layers on top of the autodiff tensors.

Weights initialize to N(0, 0.02), biases to zero, layer-norm gains to one.
Layers are stateless between calls: training-only behavior (dropout)
takes an explicit ``train`` flag and rng, so a built model is safe to
share across threads for inference.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable tensor plus its optimizer state."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = None
        self.v = None
        self.step = 0


class Module:
    """Minimal container: parameter discovery by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _init(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(_init(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Embedding(Module):
    def __init__(self, rng, n_rows: int, dim: int):
        self.table = Parameter(_init(rng, n_rows, dim))

    def __call__(self, indices) -> Tensor:
        return ad.embedding_lookup(self.table, indices)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int | None = None):
        hidden = hidden or 4 * dim
        self.up = Linear(rng, dim, hidden)
        self.down = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: np.ndarray | None,
    heads: int,
) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    Inputs are [..., T, D] with D divisible by ``heads``. ``mask`` is a
    boolean array broadcastable to [..., Tq, Tk]; True marks attendable
    keys, masked scores receive the dtype's -inf surrogate before the
    softmax. A row with no attendable key is an error.
    """
    d = query.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DataError("attention row with every key masked")

    def split(x: Tensor) -> Tensor:
        t = x.shape[-2]
        lead = x.shape[:-2]
        return x.reshape(lead + (t, heads, d // heads)).swapaxes(-3, -2)

    q, k, v = split(query), split(key), split(value)
    scores = ad.scale(q @ k.swapaxes(-1, -2), 1.0 / np.sqrt(d // heads))
    if mask is not None:
        additive = np.where(mask, 0.0, ad._mask_value())
        scores = scores + Tensor(additive)
    weights = ad.softmax(scores, axis=-1)
    mixed = weights @ v
    merged = mixed.swapaxes(-3, -2)  # [..., Tq, heads, d/heads]
    return merged.reshape(merged.shape[:-2] + (d,))


class MultiHeadAttention(Module):
    """Projections plus attention; optionally residual key/value projections.

    ``key_residual`` switches on the experimental reading where the raw
    key/value stream is added to its own projection before attention.
    """

    def __init__(self, rng, dim: int, heads: int, key_residual: bool = False):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.key_residual = key_residual

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        q = self.wq(query)
        k = self.wk(key)
        v = self.wv(value)
        if self.key_residual:
            k = k + key
            v = v + value
        return self.wo(multi_head_attention(q, k, v, mask, self.heads))


class TransformerBlock(Module):
    """Pre-norm self-attention block with a feed-forward sublayer."""

    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        normed = self.ln1(x)
        x = x + ad.dropout(self.attn(normed, normed, normed, mask),
                           self.dropout, rng, train)
        x = x + ad.dropout(self.ff(self.ln2(x)), self.dropout, rng, train)
        return x


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention with the residual on the query stream."""

    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0,
                 key_residual: bool = False):
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, key_residual=key_residual)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim)
        self.dropout = dropout

    def __call__(self, query: Tensor, kv: Tensor, mask: np.ndarray | None = None,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        normed_kv = self.ln_kv(kv)
        x = query + ad.dropout(
            self.attn(self.ln_q(query), normed_kv, normed_kv, mask),
            self.dropout, rng, train,
        )
        x = x + ad.dropout(self.ff(self.ln2(x)), self.dropout, rng, train)
        return x


class GRUCell(Module):
    """Gated recurrent cell: h' = z * h + (1 - z) * n."""

    def __init__(self, rng, d_in: int, dim: int):
        self.w = Parameter(_init(rng, d_in, 3 * dim))
        self.u = Parameter(_init(rng, dim, 3 * dim))
        self.bias = Parameter(np.zeros(3 * dim))
        self.dim = dim

    def __call__(self, x: Tensor, hidden: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0] or hidden.shape[-1] != self.dim:
            raise DataError(
                f"gru shapes {x.shape}/{hidden.shape} do not match cell "
                f"({self.w.shape[0]}, {self.dim})"
            )
        d = self.dim
        xw = x @ self.w + self.bias
        hu = hidden @ self.u
        z = ad.sigmoid(xw[..., 0:d] + hu[..., 0:d])
        r = ad.sigmoid(xw[..., d : 2 * d] + hu[..., d : 2 * d])
        n = ad.tanh(xw[..., 2 * d : 3 * d] + r * hu[..., 2 * d : 3 * d])
        one = Tensor(np.ones(()))
        return z * hidden + (one - z) * n
