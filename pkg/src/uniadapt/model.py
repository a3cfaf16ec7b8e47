"""Model configuration, named parameters and the encoder forward pass."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import adapters as ad
from .lid_prefix import LidMode, batch_prefixes, init_prefix_mlp, prefix_key
from .nn import encoder_layer, linear, sinusoidal
from .tensor import Tensor, concat, layernorm, matmul, no_grad, take

ADAPTER_MODES = ("none", "lua", "lsa", "lsa+lua", "sum")
BRANCHES = ("plain", "lua", "lsa", "sum")


@dataclass
class ModelConfig:
    d_in: int = 16
    d: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 4
    top_k: int = 2
    vocab_size: int = 19
    n_langs: int = 3
    adapter_dim: int = 16
    adapter_mode: str = "lsa+lua"
    bridge: str = "literal"
    lid_mode: str = "prefixes"
    prefix_len: int = 1
    prefix_embed: int = 16
    prefix_hidden: int = 64
    share_prefix: bool = False
    lid_dim: int = 16
    post_norm: bool = False
    freeze_embedding: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.adapter_mode not in ADAPTER_MODES:
            raise ValueError(f"adapter_mode must be one of {ADAPTER_MODES}")
        if self.bridge not in ("literal", "after"):
            raise ValueError("bridge must be 'literal' or 'after'")
        LidMode(self.lid_mode)
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.top_k <= self.n_layers:
            raise ValueError("top_k must lie in [0, n_layers]")

    def top_layers(self) -> list[int]:
        return list(range(self.n_layers - self.top_k, self.n_layers))

    @property
    def n_positions(self) -> int:
        return 2 * self.top_k

    def position(self, layer: int, slot: int) -> int:
        return 2 * (layer - (self.n_layers - self.top_k)) + slot

    @property
    def train_branches(self) -> tuple[str, ...]:
        return {
            "none": ("plain",),
            "lua": ("lua",),
            "lsa": ("lsa",),
            "lsa+lua": ("lsa", "lua"),
            "sum": ("sum",),
        }[self.adapter_mode]

    @property
    def inference_branch(self) -> str:
        return {"none": "plain", "lua": "lua", "lsa": "lsa", "lsa+lua": "lua", "sum": "sum"}[
            self.adapter_mode
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams:
    """Named parameter tensors plus the config that gives them meaning."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], pruned: bool = False):
        self.config = config
        self._t = dict(tensors)
        self.pruned = pruned

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self):
        return len(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._t.items())

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._t.items() if t.requires_grad}

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def replace(self, tensors: dict[str, Tensor], pruned: bool | None = None) -> "ModelParams":
        return ModelParams(self.config, tensors, self.pruned if pruned is None else pruned)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._t.items()}

    def copy(self) -> "ModelParams":
        out = {}
        for n, t in self._t.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
            out[n] = c
        return ModelParams(self.config, out, self.pruned)

    def count(self, prefix: str | tuple[str, ...] = "") -> int:
        return sum(t.data.size for n, t in self._t.items() if n.startswith(prefix))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], pruned=False):
        frozen = _frozen_names(config)
        return cls(
            config,
            {n: Tensor(a, requires_grad=n not in frozen, name=n) for n, a in arrays.items()},
            pruned,
        )


def _frozen_names(config: ModelConfig) -> set[str]:
    frozen = {"embed.W", "embed.b"} if config.freeze_embedding else set()
    return frozen


def _named_rng(seed: int):
    def draw(name: str, shape: tuple) -> np.ndarray:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        return rng.standard_normal(shape)

    return draw


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialize every weight from a stream keyed by (seed, parameter name).

    Keying by name makes shared weights identical across system variants that
    add or drop components.
    """
    draw = _named_rng(seed)
    d, dff, V = config.d, config.d_ff, config.vocab_size
    a: dict[str, np.ndarray] = {}

    def scoped(prefix):
        return lambda n, shape: draw(f"{prefix}.{n}", shape)

    a["embed.W"] = draw("embed.W", (config.d_in, d)) / np.sqrt(config.d_in)
    a["embed.b"] = np.zeros(d)
    for l in range(config.n_layers):
        p = f"layers.{l}"
        a[f"{p}.ln1.g"], a[f"{p}.ln1.b"] = np.ones(d), np.zeros(d)
        a[f"{p}.ln2.g"], a[f"{p}.ln2.b"] = np.ones(d), np.zeros(d)
        for n in ("q", "k", "v", "o"):
            a[f"{p}.attn.W{n}"] = draw(f"{p}.attn.W{n}", (d, d)) / np.sqrt(d)
            a[f"{p}.attn.b{n}"] = np.zeros(d)
        a[f"{p}.ffn.W1"] = draw(f"{p}.ffn.W1", (d, dff)) / np.sqrt(d)
        a[f"{p}.ffn.b1"] = np.zeros(dff)
        a[f"{p}.ffn.W2"] = draw(f"{p}.ffn.W2", (dff, d)) / np.sqrt(dff)
        a[f"{p}.ffn.b2"] = np.zeros(d)
    a["final_ln.g"], a["final_ln.b"] = np.ones(d), np.zeros(d)
    a["head.W"] = draw("head.W", (d, V)) / np.sqrt(d)
    a["head.b"] = np.zeros(V)

    r, P, L = config.adapter_dim, config.n_positions, config.n_langs
    mode = config.adapter_mode
    if mode in ("lsa", "lsa+lua", "sum"):
        for lang in range(L):
            for i in range(P):
                pre = f"lsa.{lang}.{i}"
                for n, v in ad.init_adapter(scoped(pre), d, r).items():
                    a[f"{pre}.{n}"] = v
    if mode in ("lua", "lsa+lua", "sum"):
        for i in range(P):
            for n, v in ad.init_adapter(scoped(f"lua.{i}"), d, r).items():
                a[f"lua.{i}.{n}"] = v
    if mode == "lsa+lua":
        for i in range(P):
            a[f"bridge.{i}.W"] = np.eye(d)
            a[f"bridge.{i}.b"] = np.zeros(d)

    lid = config.lid_mode
    if lid == LidMode.PREFIXES.value:
        for layer in config.top_layers():
            key = prefix_key(config, layer)
            if f"{key}.W1" in a:
                continue
            for n, v in init_prefix_mlp(scoped(key), config).items():
                a[f"{key}.{n}"] = v
    elif lid == LidMode.INPUT.value:
        a["lid.embed"] = draw("lid.embed", (L, d)) / np.sqrt(d)
    elif lid == LidMode.TOP.value:
        for layer in config.top_layers():
            a[f"lid.{layer}.embed"] = draw(f"lid.{layer}.embed", (L, d)) / np.sqrt(d)
    elif lid == LidMode.ATTENTION.value:
        de = config.lid_dim
        for layer in config.top_layers():
            a[f"lid.{layer}.embed"] = draw(f"lid.{layer}.embed", (L, de))
            W = np.zeros((d + de, d))
            W[:d] = np.eye(d)
            W[d:] = draw(f"layers.{layer}.attn_in.W", (de, d)) / np.sqrt(d + de)
            a[f"layers.{layer}.attn_in.W"] = W
            a[f"layers.{layer}.attn_in.b"] = np.zeros(d)
    return ModelParams.from_arrays(config, a)


@dataclass
class ForwardOutput:
    logits: Tensor  # [B, T, V]
    adapter_inputs: list[Tensor] = field(default_factory=list)
    adapter_outputs: list[Tensor] = field(default_factory=list)


def padding_mask(lengths, T: int) -> np.ndarray:
    """True at padded frames, ``[B, T]``."""
    return np.arange(T)[None, :] >= np.asarray(lengths)[:, None]


def forward(
    params: ModelParams,
    features: np.ndarray,
    lengths,
    lids,
    branch: str | None = None,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the encoder with one adapter branch activated.

    ``plain`` skips adapters, ``lsa`` routes each utterance through its
    language's adapters, ``lua`` uses the shared adapters, and ``sum`` adds the
    language-specific and shared adapter outputs.
    """
    cfg = params.config
    branch = branch or cfg.inference_branch
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    if branch in ("lsa", "sum") and not ad.has_lsa(params):
        raise ad.PrunedError(f"branch {branch!r} needs language-specific adapters")
    features = np.asarray(features, dtype=np.float64)
    lids = np.asarray(lids, dtype=np.int64)
    B, T, _ = features.shape
    pad = padding_mask(lengths, T)
    lid = LidMode(cfg.lid_mode)
    out = ForwardOutput(logits=None)  # type: ignore[arg-type]
    out.adapter_inputs = [None] * cfg.n_positions  # type: ignore[list-item]
    out.adapter_outputs = [None] * cfg.n_positions  # type: ignore[list-item]

    h = linear(Tensor(features), params["embed.W"], params["embed.b"]) + sinusoidal(T, cfg.d)
    if lid is LidMode.INPUT:
        h = h + take(params["lid.embed"], lids).reshape(B, 1, cfg.d)

    def make_adapter(pos: int):
        def apply(s: Tensor) -> Tensor:
            if branch == "lua":
                y = ad.adapter_forward(s, ad.Adapter.from_params(params, f"lua.{pos}"))
            elif branch == "lsa":
                y = ad.route_lsa(s, lids, params, pos, cfg.n_langs)
            else:
                lsa_delta = ad.route_by_language(
                    s,
                    lids,
                    cfg.n_langs,
                    lambda lang, rows: ad.adapter_delta(rows, ad.lsa_adapter(params, lang, pos)),
                )
                lua_delta = ad.adapter_delta(s, ad.Adapter.from_params(params, f"lua.{pos}"))
                y = s + lsa_delta + lua_delta
            out.adapter_inputs[pos] = s
            out.adapter_outputs[pos] = y
            return y

        return apply

    top = set(cfg.top_layers())
    for l in range(cfg.n_layers):
        kwargs = {}
        if l in top:
            if branch != "plain" and cfg.adapter_mode != "none":
                kwargs["attn_adapter"] = make_adapter(cfg.position(l, 0))
                kwargs["ffn_adapter"] = make_adapter(cfg.position(l, 1))
            if lid is LidMode.PREFIXES:
                pp = batch_prefixes(params, l, lids)
                kwargs["prefixes"] = (pp.keys, pp.values)
            elif lid is LidMode.TOP:
                h = h + take(params[f"lid.{l}.embed"], lids).reshape(B, 1, cfg.d)
            elif lid is LidMode.ATTENTION:
                kwargs["attn_input"] = _attention_concat(params, l, lids, T)
        h = encoder_layer(
            h,
            params,
            f"layers.{l}",
            cfg.n_heads,
            pad,
            post_norm=cfg.post_norm,
            dropout_rate=cfg.dropout,
            rng=rng,
            **kwargs,
        )
    if not cfg.post_norm:
        h = layernorm(h, params["final_ln.g"], params["final_ln.b"])
    out.logits = linear(h, params["head.W"], params["head.b"])
    return out


def _attention_concat(params: ModelParams, layer: int, lids: np.ndarray, T: int):
    cfg = params.config
    B = len(lids)
    emb = take(params[f"lid.{layer}.embed"], lids).reshape(B, 1, cfg.lid_dim)
    tiled = matmul(Tensor(np.ones((B, T, 1))), emb)  # [B, T, d_e]

    def apply(s: Tensor) -> Tensor:
        joined = concat([s, tiled], axis=-1)
        return linear(joined, params[f"layers.{layer}.attn_in.W"], params[f"layers.{layer}.attn_in.b"])

    return apply


def predict_logits(params: ModelParams, features, lengths, lids, branch=None) -> np.ndarray:
    with no_grad():
        return forward(params, features, lengths, lids, branch).logits.data


def with_config(params: ModelParams, **changes) -> ModelParams:
    return ModelParams(replace(params.config, **changes), dict(params.items()), params.pruned)
