"""Language-identifier conditioning.

The main mode prepends per-language prefix vectors to the attention keys and
values. Prefixes come from a small re-parameterization network
(embedding -> linear -> tanh -> linear) while training, and from a plain
per-language table once exported. The other modes are the contrastive
insertion points: added at the input, added to the inputs of the top layers,
or concatenated to the attention input and projected back down.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nn import AttentionWeights, _key_mask, attention
from .tensor import ContractError, ShapeError, Tensor, matmul, take, tanh


class LidMode(str, enum.Enum):
    NONE = "none"
    PREFIXES = "prefixes"
    INPUT = "input"
    TOP = "top"
    ATTENTION = "attention"


@dataclass
class PrefixPair:
    keys: Tensor  # [L_p, d] for one utterance, [B, L_p, d] for a batch
    values: Tensor

    def per_head(self, n_heads: int) -> tuple[np.ndarray, np.ndarray]:
        """Split the last axis into ``n_heads`` slices of width d / n_heads."""
        k, v = self.keys.data, self.values.data
        d = k.shape[-1]
        if d % n_heads:
            raise ShapeError(f"prefix width {d} is not divisible by {n_heads} heads")
        split = lambda a: np.moveaxis(a.reshape(*a.shape[:-1], n_heads, d // n_heads), -2, -3)  # noqa: E731
        return split(k), split(v)


def prefix_key(config, layer: int) -> str:
    return "prefix.shared" if config.share_prefix else f"prefix.{layer}"


def init_prefix_mlp(rng, config) -> dict[str, np.ndarray]:
    L, de, dh = config.n_langs, config.prefix_embed, config.prefix_hidden
    out = 2 * config.prefix_len * config.d
    return {
        "embed": rng("embed", (L, de)),
        "W1": rng("W1", (de, dh)) / np.sqrt(de),
        "b1": np.zeros(dh),
        "W2": rng("W2", (dh, out)) / np.sqrt(dh),
        "b2": np.zeros(out),
    }


def prefix_table(params, layer: int) -> tuple[Tensor, Tensor]:
    """Prefixes for every language at ``layer``: two ``[L, L_p, d]`` tensors.

    The whole table is always computed at once so exported prefixes are
    bitwise equal to the ones used during training.
    """
    cfg = params.config
    L, Lp, d = cfg.n_langs, cfg.prefix_len, cfg.d
    store = f"prefix_store.{layer}"
    if f"{store}.k" in params:
        return params[f"{store}.k"], params[f"{store}.v"]
    key = prefix_key(cfg, layer)
    if f"{key}.W1" not in params:
        raise ContractError(f"no prefix parameters for layer {layer}")
    p = lambda n: params[f"{key}.{n}"]  # noqa: E731
    hidden = tanh(matmul(p("embed"), p("W1")) + p("b1"))
    flat = matmul(hidden, p("W2")) + p("b2")  # [L, 2 * L_p * d]
    both = flat.reshape(L, 2, Lp, d)
    return take(both, [0], axis=1).reshape(L, Lp, d), take(both, [1], axis=1).reshape(L, Lp, d)


def make_prefixes(lid: int, params, layer: int) -> PrefixPair:
    if not 0 <= lid < params.config.n_langs:
        raise ContractError(f"unknown language id {lid}")
    k, v = prefix_table(params, layer)
    return PrefixPair(take(k, lid, axis=0), take(v, lid, axis=0))


def batch_prefixes(params, layer: int, lids: np.ndarray) -> PrefixPair:
    lids = np.asarray(lids, dtype=np.int64)
    if ((lids < 0) | (lids >= params.config.n_langs)).any():
        raise ContractError(f"unknown language id in {lids.tolist()}")
    k, v = prefix_table(params, layer)
    return PrefixPair(take(k, lids, axis=0), take(v, lids, axis=0))


def _as_batch(x, pp: PrefixPair, key_padding=None):
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = xd.ndim == 2
    k, v = pp.keys.data, pp.values.data
    if single:
        xd, k, v = xd[None], k[None], v[None]
        if key_padding is not None:
            key_padding = np.asarray(key_padding)[None]
    return xd, k, v, key_padding, single


def _project(xd: np.ndarray, w: AttentionWeights):
    split = lambda a: a.reshape(*a.shape[:2], w.n_heads, w.head_dim).transpose(0, 2, 1, 3)  # noqa: E731
    q = split(xd @ w.Wq.data + w.bq.data)
    k = split(xd @ w.Wk.data + w.bk.data)
    v = split(xd @ w.Wv.data + w.bv.data)
    return q, k, v


def _prefix_logits(xd, w, kd, key_padding):
    B, T, d = xd.shape
    if kd.shape[-1] != d:
        raise ShapeError(f"prefix width {kd.shape[-1]} does not match model width {d}")
    q, k, v = _project(xd, w)
    pk = kd.reshape(B, -1, w.n_heads, w.head_dim).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(w.head_dim)
    content = (q @ np.swapaxes(k, -1, -2)) * scale
    mask = _key_mask(key_padding, B, T, 0)
    content = np.where(mask, -np.inf, content)
    pref = (q @ np.swapaxes(pk, -1, -2)) * scale
    return content, pref, v


def gamma(x, w: AttentionWeights, pp: PrefixPair, key_padding=None) -> np.ndarray:
    """Share of softmax mass on the prefix slots, per (batch,) head and position.

    Computed directly from the two logit groups:
    sum_i exp(q.pk_i) / (sum_i exp(q.pk_i) + sum_j exp(q.k_j)).
    """
    xd, kd, _, key_padding, single = _as_batch(x, pp, key_padding)
    content, pref, _ = _prefix_logits(xd, w, kd, key_padding)
    if pref.shape[-1] == 0:
        raise ContractError("gamma needs at least one prefix slot")
    m = np.maximum(content.max(axis=-1), pref.max(axis=-1))[..., None]
    sp = np.exp(pref - m).sum(axis=-1)
    sc = np.exp(content - m).sum(axis=-1)
    g = sp / (sp + sc)
    return g[0] if single else g


def gated_prefixed_attention(x, w: AttentionWeights, pp: PrefixPair, key_padding=None) -> np.ndarray:
    """Prefixed attention as ``(1 - gamma) * Attn(content) + gamma * Attn(prefix)``."""
    xd, kd, vd, key_padding, single = _as_batch(x, pp, key_padding)
    B, T, d = xd.shape
    content, pref, v = _prefix_logits(xd, w, kd, key_padding)
    pv = vd.reshape(B, -1, w.n_heads, w.head_dim).transpose(0, 2, 1, 3)

    def attn(logits, values):
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return (e / e.sum(axis=-1, keepdims=True)) @ values

    heads = attn(content, v)
    if pref.shape[-1]:
        g = gamma(xd, w, PrefixPair(Tensor(kd), Tensor(vd)), key_padding)[..., None]
        heads = (1.0 - g) * heads + g * attn(pref, pv)
    out = heads.transpose(0, 2, 1, 3).reshape(B, T, d) @ w.Wo.data + w.bo.data
    return out[0] if single else out


def prefixed_attention(
    x, w: AttentionWeights, pp: PrefixPair, key_padding=None, form: str = "direct"
):
    """Attention with the prefixes concatenated in front of the keys and values.

    ``form="direct"`` returns a differentiable Tensor from the concatenated
    computation; ``form="gated"`` returns an array from the gamma decomposition.
    """
    if form == "gated":
        return gated_prefixed_attention(x, w, pp, key_padding)
    if form != "direct":
        raise ValueError(f"unknown form {form!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 2
    keys, values = pp.keys, pp.values
    if single:
        x = x.reshape(1, *x.shape)
        keys, values = keys.reshape(1, *keys.shape), values.reshape(1, *values.shape)
        if key_padding is not None:
            key_padding = np.asarray(key_padding)[None]
    out = attention(x, w, key_padding, (keys, values))
    return out.reshape(*out.shape[1:]) if single else out


def export_prefixes(params):
    """Replace each prefix network by its per-language output table.

    Returns a new ModelParams; exporting twice is a no-op.
    """
    cfg = params.config
    if cfg.lid_mode != LidMode.PREFIXES.value:
        return params
    arrays = {n: t for n, t in params.items() if not n.startswith("prefix.")}
    for layer in cfg.top_layers():
        k, v = prefix_table(params, layer)
        arrays[f"prefix_store.{layer}.k"] = Tensor(k.data.copy())
        arrays[f"prefix_store.{layer}.v"] = Tensor(v.data.copy())
    return params.replace(arrays)
