"""Transformer encoder blocks built on the autodiff tensor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    dropout,
    layernorm,
    masked_fill,
    matmul,
    relu,
    softmax,
)

Sublayer = Callable[[Tensor], Tensor]


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, W)
    return y if b is None else y + b


def sinusoidal(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


@dataclass
class AttentionWeights:
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    bk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.Wq.shape[1]
        if self.n_heads < 1 or d % self.n_heads:
            raise ShapeError(f"model width {d} is not divisible by {self.n_heads} heads")

    @property
    def d(self) -> int:
        return self.Wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def from_params(cls, params, prefix: str, n_heads: int) -> "AttentionWeights":
        names = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")
        return cls(*(params[f"{prefix}.{n}"] for n in names), n_heads=n_heads)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _key_mask(key_padding: np.ndarray | None, B: int, T: int, n_prefix: int) -> np.ndarray:
    if key_padding is None:
        key_padding = np.zeros((B, T), dtype=bool)
    if n_prefix == 0 and key_padding.all(axis=1).any():
        raise ContractError("attention: an utterance has every key masked")
    full = np.concatenate([np.zeros((B, n_prefix), dtype=bool), key_padding], axis=1)
    return full[:, None, None, :]


def attention(
    x: Tensor,
    w: AttentionWeights,
    key_padding: np.ndarray | None = None,
    prefixes: Optional[tuple[Tensor, Tensor]] = None,
) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``[B, T, d]``.

    ``key_padding`` is ``[B, T]`` and true at padded frames. ``prefixes`` is an
    optional ``(P_k, P_v)`` pair of ``[B, L_p, d]`` tensors prepended to the
    keys and values of every head; prefix slots are never masked.
    """
    B, T, d = x.shape
    if d != w.d:
        raise ShapeError(f"attention: input width {d} does not match weights {w.d}")
    H = w.n_heads
    q = split_heads(linear(x, w.Wq, w.bq), H)
    k = split_heads(linear(x, w.Wk, w.bk), H)
    v = split_heads(linear(x, w.Wv, w.bv), H)
    n_prefix = 0
    if prefixes is not None:
        pk, pv = prefixes
        if pk.shape != pv.shape or pk.shape[0] != B or pk.shape[2] != d:
            raise ShapeError(f"attention: prefixes {pk.shape}/{pv.shape} do not fit {x.shape}")
        n_prefix = pk.shape[1]
        if n_prefix:
            k = concat([split_heads(pk, H), k], axis=2)
            v = concat([split_heads(pv, H), v], axis=2)
    mask = _key_mask(key_padding, B, T, n_prefix)
    logits = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(w.head_dim))
    probs = softmax(masked_fill(logits, mask, -np.inf), axis=-1)
    return linear(merge_heads(matmul(probs, v)), w.Wo, w.bo)


def feed_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return linear(relu(linear(x, W1, b1)), W2, b2)


def encoder_layer(
    x: Tensor,
    params,
    prefix: str,
    n_heads: int,
    key_padding: np.ndarray | None = None,
    *,
    attn_adapter: Sublayer | None = None,
    ffn_adapter: Sublayer | None = None,
    prefixes: Optional[tuple[Tensor, Tensor]] = None,
    attn_input: Sublayer | None = None,
    post_norm: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One transformer layer; adapters sit on each sublayer output inside the residual.

    Pre-norm: ``h = x + A1(Attn(LN1(x)))``, ``y = h + A2(FFN(LN2(h)))``.
    Post-norm: ``h = LN1(x + A1(Attn(x)))``, ``y = LN2(h + A2(FFN(h)))``.
    """
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    w = AttentionWeights.from_params(params, f"{prefix}.attn", n_heads)
    attn_adapter = attn_adapter or (lambda s: s)
    ffn_adapter = ffn_adapter or (lambda s: s)
    attn_input = attn_input or (lambda s: s)

    def attn_block(h):
        s = attention(attn_input(h), w, key_padding, prefixes)
        return attn_adapter(dropout(s, dropout_rate, rng))

    def ffn_block(h):
        s = feed_forward(h, p("ffn.W1"), p("ffn.b1"), p("ffn.W2"), p("ffn.b2"))
        return ffn_adapter(dropout(s, dropout_rate, rng))

    if post_norm:
        h = layernorm(x + attn_block(x), p("ln1.g"), p("ln1.b"))
        return layernorm(h + ffn_block(h), p("ln2.g"), p("ln2.b"))
    h = x + attn_block(layernorm(x, p("ln1.g"), p("ln1.b")))
    return h + ffn_block(layernorm(h, p("ln2.g"), p("ln2.b")))
