"""CTC loss, greedy best-path decoding and character error rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor, _as_tensor

SPECIAL_TOKENS = ("<unk>", "<pad>", "<blank>", "<mask>")


@dataclass
class Vocab:
    """Ordered symbol table: language characters followed by the special tokens."""

    symbols: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")
        for tok in SPECIAL_TOKENS:
            if tok not in self.symbols:
                raise ValueError(f"vocab lacks special token {tok}")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    @property
    def blank(self) -> int:
        return self._index["<blank>"]

    @property
    def pad(self) -> int:
        return self._index["<pad>"]

    @property
    def unk(self) -> int:
        return self._index["<unk>"]

    @property
    def mask(self) -> int:
        return self._index["<mask>"]

    def encode(self, chars: Sequence[str]) -> list[int]:
        return [self._index.get(c, self.unk) for c in chars]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids)


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can emit ``labels``: one per label plus a blank per repeat."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    m = xs[0]
    for x in xs[1:]:
        m = np.maximum(m, x)
    safe = np.where(np.isfinite(m), m, 0.0)
    acc = sum(np.exp(x - safe) for x in xs)
    with np.errstate(divide="ignore"):
        return np.log(acc) + safe


def ctc_batch_loss(
    logits: Tensor,
    targets: Sequence[Sequence[int]],
    lengths: Sequence[int],
    blank: int,
) -> Tensor:
    """Per-utterance CTC negative log-likelihoods, shape ``[B]``.

    ``logits`` is ``[B, T_max, V]`` (unnormalized). Frames at or beyond an
    utterance's true length are ignored and receive zero gradient.
    """
    logits = _as_tensor(logits)
    z = logits.data
    B, T_max, V = z.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(targets) != B or lengths.shape != (B,):
        raise ContractError("ctc: batch size of logits, targets and lengths differ")
    for b, y in enumerate(targets):
        if any(int(k) == blank for k in y):
            raise ContractError(f"ctc: target {b} contains the blank symbol")
        if any(not 0 <= int(k) < V for k in y):
            raise ContractError(f"ctc: target {b} has labels outside the vocabulary")
        if not 1 <= lengths[b] <= T_max:
            raise ContractError(f"ctc: length {lengths[b]} of utterance {b} out of range")
        if min_frames(y) > lengths[b]:
            raise ContractError(
                f"ctc: utterance {b} has {lengths[b]} frames but needs {min_frames(y)} "
                f"(loss would be infinite)"
            )

    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    lp = z - lse

    U = np.array([len(y) for y in targets], dtype=np.int64)
    S = 2 * U + 1
    S_max = int(S.max())
    ext = np.full((B, S_max), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1 : 2 * len(y) : 2] = np.asarray(y, dtype=np.int64)
    state_ok = np.arange(S_max)[None, :] < S[:, None]
    skip_ok = np.zeros((B, S_max), dtype=bool)
    skip_ok[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip_ok &= state_ok

    rows = np.arange(B)[:, None]
    emit = lp[rows, :, ext].transpose(0, 2, 1)  # [B, T, S]: log p of state's symbol
    neg = -np.inf

    alpha = np.full((B, T_max, S_max), neg)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S_max > 1:
        alpha[:, 0, 1] = np.where(U > 0, emit[:, 0, 1], neg)
    for t in range(1, T_max):
        prev = alpha[:, t - 1]
        s1 = np.full_like(prev, neg)
        s1[:, 1:] = prev[:, :-1]
        s2 = np.full_like(prev, neg)
        s2[:, 2:] = prev[:, :-2]
        s2 = np.where(skip_ok, s2, neg)
        cur = _logsumexp(prev, s1, s2) + emit[:, t]
        live = (t < lengths)[:, None] & state_ok
        alpha[:, t] = np.where(live, cur, neg)

    last = lengths - 1
    a_end = alpha[np.arange(B), last]
    a_last = a_end[np.arange(B), S - 1]
    a_prev = np.where(S > 1, a_end[np.arange(B), np.maximum(S - 2, 0)], neg)
    logp = _logsumexp(a_last, a_prev)

    def backward(g):
        beta = np.full((B, T_max, S_max), neg)
        for t in range(T_max - 1, -1, -1):
            nxt = beta[:, t + 1] if t + 1 < T_max else np.full((B, S_max), neg)
            n1 = np.full_like(nxt, neg)
            n1[:, :-1] = nxt[:, 1:]
            n2 = np.full_like(nxt, neg)
            n2[:, :-2] = np.where(skip_ok[:, 2:], nxt[:, 2:], neg)
            cur = _logsumexp(nxt, n1, n2) + emit[:, t]
            start = np.full((B, S_max), neg)
            start[np.arange(B), S - 1] = emit[np.arange(B), t, S - 1]
            has_prev = S > 1
            start[np.arange(B)[has_prev], (S - 2)[has_prev]] = emit[
                np.arange(B)[has_prev], t, (S - 2)[has_prev]
            ]
            beta[:, t] = np.where(
                (t == last)[:, None], start, np.where((t < last)[:, None], cur, neg)
            )
            beta[:, t] = np.where(state_ok, beta[:, t], neg)
        occ = np.exp(alpha + beta - emit - logp[:, None, None])  # [B, T, S]
        onehot = np.zeros((B, S_max, V))
        onehot[rows, np.arange(S_max)[None, :], ext] = state_ok
        post = occ @ onehot  # posterior label occupancy, [B, T, V]
        frame_ok = (np.arange(T_max)[None, :] < lengths[:, None])[:, :, None]
        grad = (np.exp(lp) - post) * frame_ok
        return (grad * g[:, None, None],)

    return Tensor.from_op(-logp, (logits,), backward)


def ctc_loss(logits: Tensor, labels: Sequence[int], blank: int, length: int | None = None) -> Tensor:
    """CTC negative log-likelihood of one utterance with ``[T, V]`` logits."""
    logits = _as_tensor(logits)
    T = logits.shape[0] if length is None else length
    out = ctc_batch_loss(logits.reshape(1, *logits.shape), [list(labels)], [T], blank)
    return out.reshape(())


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge repeated symbols, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits, blank: int, length: int | None = None) -> list[int]:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if length is not None:
        z = z[:length]
    return collapse(z.argmax(axis=-1), blank)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ContractError("cer: reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edits over total reference characters."""
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    chars = sum(len(r) for r in refs)
    if chars == 0:
        raise ContractError("cer: references are empty")
    return edits / chars
