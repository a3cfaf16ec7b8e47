"""Bottleneck adapters: the language-specific bank, the universal adapter and the bridge."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ContractError, Tensor, layernorm, matmul, merge_rows, relu, take

ADAPTER_FIELDS = ("ln_g", "ln_b", "W_down", "b_down", "W_up", "b_up")


class RoutingError(ContractError):
    """An utterance's language id has no adapter in the bank."""


class PrunedError(ContractError):
    """A training-only component was requested from a pruned model."""


@dataclass
class Adapter:
    ln_g: Tensor
    ln_b: Tensor
    W_down: Tensor
    b_down: Tensor
    W_up: Tensor
    b_up: Tensor

    @classmethod
    def from_params(cls, params, prefix: str) -> "Adapter":
        return cls(*(params[f"{prefix}.{f}"] for f in ADAPTER_FIELDS))

    @property
    def d(self) -> int:
        return self.W_down.shape[0]

    @property
    def r(self) -> int:
        return self.W_down.shape[1]


def adapter_param_count(d: int, r: int) -> int:
    return 2 * d + (d * r + r) + (r * d + d)


def init_adapter(rng: Callable[[str, tuple], np.ndarray], d: int, r: int) -> dict[str, np.ndarray]:
    """Fresh adapter arrays; the up-projection starts at zero so the block is the identity."""
    return {
        "ln_g": np.ones(d),
        "ln_b": np.zeros(d),
        "W_down": rng("W_down", (d, r)) / np.sqrt(d),
        "b_down": np.zeros(r),
        "W_up": np.zeros((r, d)),
        "b_up": np.zeros(d),
    }


def adapter_delta(x: Tensor, a: Adapter) -> Tensor:
    h = relu(matmul(layernorm(x, a.ln_g, a.ln_b), a.W_down) + a.b_down)
    return matmul(h, a.W_up) + a.b_up


def adapter_forward(x: Tensor, a: Adapter) -> Tensor:
    """``x + up(relu(down(LN(x))))``."""
    return x + adapter_delta(x, a)


def route_by_language(
    x: Tensor, lids: np.ndarray, n_langs: int, fn: Callable[[int, Tensor], Tensor]
) -> Tensor:
    """Apply ``fn(lang, rows)`` to each language's utterances and reassemble the batch.

    Languages absent from the batch never enter the graph, so their
    parameters receive no gradient.
    """
    lids = np.asarray(lids, dtype=np.int64)
    bad = lids[(lids < 0) | (lids >= n_langs)]
    if bad.size:
        raise RoutingError(f"language id {int(bad[0])} outside bank of {n_langs} languages")
    langs = sorted(set(lids.tolist()))
    if len(langs) == 1:
        return fn(langs[0], x)
    groups = [np.flatnonzero(lids == lang) for lang in langs]
    parts = [fn(lang, take(x, ix, axis=0)) for lang, ix in zip(langs, groups)]
    return merge_rows(parts, groups, x.shape[0])


def lsa_adapter(params, lang: int, position: int) -> Adapter:
    if not has_lsa(params):
        raise PrunedError("language-specific adapters were pruned from this model")
    return Adapter.from_params(params, f"lsa.{lang}.{position}")


def route_lsa(x: Tensor, lids: np.ndarray, params, position: int, n_langs: int) -> Tensor:
    return route_by_language(
        x, lids, n_langs, lambda lang, rows: adapter_forward(rows, lsa_adapter(params, lang, position))
    )


def lua_distill_view(
    x: Tensor,
    params,
    position: int,
    mode: str = "literal",
    lua_output: Tensor | None = None,
) -> Tensor:
    """Student features compared against the language-specific adapter's output.

    ``literal``: ``psi(W x + b)``. ``after``: ``W psi(x) + b``; pass the
    forward-path ``lua_output`` to reuse it.
    """
    if f"bridge.{position}.W" not in params:
        raise PrunedError("bridge linears are absent; distillation needs a training model")
    W, b = params[f"bridge.{position}.W"], params[f"bridge.{position}.b"]
    lua = Adapter.from_params(params, f"lua.{position}")
    if mode == "literal":
        return adapter_forward(matmul(x, W) + b, lua)
    if mode == "after":
        out = lua_output if lua_output is not None else adapter_forward(x, lua)
        return matmul(out, W) + b
    raise ValueError(f"unknown bridge mode {mode!r}")


def has_lsa(params) -> bool:
    return any(n.startswith("lsa.") for n in params.names())


def prune_for_inference(params):
    """Drop the language-specific bank and the bridges; returns a new ModelParams.

    Pruning an already pruned model is a no-op.
    """
    if params.config.adapter_mode == "sum" and has_lsa(params):
        raise ContractError("summed adapters need the language-specific bank at inference")
    keep = {n: t for n, t in params.items() if not n.startswith(("lsa.", "bridge."))}
    return params.replace(keep, pruned=True)
