"""Synthetic multilingual recognition data.

Each language owns a character set and an orthogonal channel transform.
An utterance is a character sequence; every character is rendered as its
prototype vector repeated for a few frames, passed through the language's
transform, and corrupted by Gaussian noise.

With ``shared_phones`` the k-th character of every language uses the same
prototype, so a frame only identifies its character once the language is
known. ``transform_spread`` controls how far apart the channel transforms
are: QR of ``I + spread * G`` for Gaussian ``G``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ctc import SPECIAL_TOKENS, Vocab


class DataConfigError(ValueError):
    pass


@dataclass
class ToyLanguageSpec:
    lang_id: int
    chars: str
    transform: np.ndarray  # [d_in, d_in], orthogonal
    bias: np.ndarray  # [d_in]
    sigma: float = 0.3
    frames_per_symbol: tuple[int, int] = (3, 5)
    length_range: tuple[int, int] = (3, 8)

    def __post_init__(self):
        if self.sigma < 0:
            raise DataConfigError("noise level must be non-negative")
        lo, hi = self.frames_per_symbol
        if lo < 1 or hi < lo:
            raise DataConfigError(f"bad frames-per-symbol range {self.frames_per_symbol}")
        u_lo, u_hi = self.length_range
        if u_lo < 1 or u_hi < u_lo:
            raise DataConfigError(f"bad label length range {self.length_range}")
        # T >= lo * U must cover the CTC-safe bound 2U + 1 for every U in range
        if any(lo * u < 2 * u + 1 for u in range(u_lo, u_hi + 1)):
            raise DataConfigError(
                f"frames-per-symbol {self.frames_per_symbol} cannot guarantee T >= 2U+1 "
                f"for label lengths {self.length_range}"
            )
        if len(self.chars) < 2:
            raise DataConfigError("a language needs at least two characters")


@dataclass
class Utterance:
    features: np.ndarray  # [T, d_in]
    text: str
    lang: int


@dataclass
class Batch:
    features: np.ndarray  # [B, T_max, d_in], zero padded
    lengths: np.ndarray  # [B]
    targets: list[list[int]]
    lids: np.ndarray  # [B]
    texts: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.lengths)


@dataclass
class DataConfig:
    n_langs: int = 3
    chars_per_lang: int = 5
    overlap: int = 0
    d_in: int = 16
    sigma: float = 0.6
    frames_min: int = 3
    frames_max: int = 5
    len_min: int = 3
    len_max: int = 8
    train_counts: tuple[int, ...] = (1500, 1500, 750)
    dev_count: int = 150
    test_count: int = 200
    shared_phones: bool = True
    transform_spread: float = 0.03
    seed: int = 1234


def orthogonal(d: int, rng: np.random.Generator, spread: float = float("inf")) -> np.ndarray:
    """Orthogonal factor of ``I + spread * G``; ``inf`` gives a uniformly random rotation."""
    g = rng.standard_normal((d, d))
    m = g if np.isinf(spread) else np.eye(d) + spread * g
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def char_sets(n_langs: int, per_lang: int, overlap: int = 0) -> list[str]:
    """Consecutive windows over a shared alphabet; neighbours share ``overlap`` chars."""
    if not 0 <= overlap < per_lang:
        raise DataConfigError("overlap must be smaller than the per-language charset")
    step = per_lang - overlap
    need = step * (n_langs - 1) + per_lang
    alphabet = [chr(ord("a") + i) if i < 26 else chr(0x3B1 + i - 26) for i in range(need)]
    return ["".join(alphabet[i * step : i * step + per_lang]) for i in range(n_langs)]


def make_languages(cfg: DataConfig) -> list[ToyLanguageSpec]:
    rng = np.random.default_rng([cfg.seed, 0])
    specs = []
    for lang, chars in enumerate(char_sets(cfg.n_langs, cfg.chars_per_lang, cfg.overlap)):
        specs.append(
            ToyLanguageSpec(
                lang_id=lang,
                chars=chars,
                transform=orthogonal(cfg.d_in, rng, cfg.transform_spread),
                bias=min(cfg.transform_spread, 1.0) * rng.standard_normal(cfg.d_in),
                sigma=cfg.sigma,
                frames_per_symbol=(cfg.frames_min, cfg.frames_max),
                length_range=(cfg.len_min, cfg.len_max),
            )
        )
    return specs


def prototypes(chars: Sequence[str], d_in: int, seed: int) -> dict[str, np.ndarray]:
    """One fixed unit-scale vector per character."""
    return {
        c: np.random.default_rng([seed, 1, ord(c)]).standard_normal(d_in) for c in sorted(set(chars))
    }


def shared_prototypes(specs: Sequence[ToyLanguageSpec], d_in: int, seed: int) -> dict[str, np.ndarray]:
    """The k-th character of every language gets phone prototype k."""
    n = max(len(s.chars) for s in specs)
    phones = np.random.default_rng([seed, 2]).standard_normal((n, d_in))
    out: dict[str, np.ndarray] = {}
    for s in specs:
        for k, c in enumerate(s.chars):
            if c in out and not np.array_equal(out[c], phones[k]):
                raise DataConfigError(f"character {c!r} sits at different phone slots")
            out[c] = phones[k]
    return out


def render(text: str, spec: ToyLanguageSpec, protos, frames: Sequence[int], noise: np.ndarray | None):
    clean = np.concatenate([np.tile(protos[c], (n, 1)) for c, n in zip(text, frames)])
    out = clean @ spec.transform.T + spec.bias
    if noise is not None:
        out = out + spec.sigma * noise
    return out


def gen_language(spec: ToyLanguageSpec, n_utts: int, seed: int, protos=None) -> list[Utterance]:
    """Sample ``n_utts`` utterances; adjacent characters never repeat."""
    if n_utts <= 0:
        raise DataConfigError("n_utts must be positive")
    d_in = spec.transform.shape[0]
    protos = protos or prototypes(spec.chars, d_in, 0)
    rng = np.random.default_rng([seed, spec.lang_id])
    utts = []
    for _ in range(n_utts):
        U = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        text = [spec.chars[rng.integers(len(spec.chars))]]
        while len(text) < U:
            c = spec.chars[rng.integers(len(spec.chars))]
            if c != text[-1]:
                text.append(c)
        frames = rng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1, size=U)
        noise = rng.standard_normal((int(frames.sum()), d_in))
        text = "".join(text)
        utts.append(Utterance(render(text, spec, protos, frames, noise), text, spec.lang_id))
    return utts


def build_vocab(specs: Sequence[ToyLanguageSpec]) -> Vocab:
    """Union of the language charsets (first-seen order) followed by the special tokens."""
    if not specs:
        raise DataConfigError("at least one language is required")
    seen: dict[str, None] = {}
    for s in specs:
        for c in s.chars:
            seen.setdefault(c)
    return Vocab(list(seen) + list(SPECIAL_TOKENS))


def split(dataset: Sequence[Utterance], ratios: Sequence[float], seed: int):
    """Seeded per-language split; each language is divided by the same ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise DataConfigError("split ratios must be non-negative and sum to 1")
    parts: list[list[Utterance]] = [[] for _ in ratios]
    langs = sorted({u.lang for u in dataset})
    for lang in langs:
        idx = [i for i, u in enumerate(dataset) if u.lang == lang]
        order = np.random.default_rng([seed, lang]).permutation(len(idx))
        cuts = np.floor(np.cumsum(ratios)[:-1] * len(idx) + 1e-9).astype(int)
        for k, chunk in enumerate(np.split(order, cuts)):
            parts[k].extend(dataset[idx[j]] for j in sorted(chunk))
    for k, (r, p) in enumerate(zip(ratios, parts)):
        if r > 0 and not p:
            raise DataConfigError(f"split {k} with ratio {r} came out empty")
    return tuple(parts)


def make_splits(cfg: DataConfig):
    """Default pipeline: train / dev / test lists plus languages and vocab."""
    specs = make_languages(cfg)
    if len(cfg.train_counts) != cfg.n_langs:
        raise DataConfigError("train_counts needs one entry per language")
    if cfg.shared_phones:
        protos = shared_prototypes(specs, cfg.d_in, cfg.seed)
    else:
        protos = prototypes("".join(s.chars for s in specs), cfg.d_in, cfg.seed)
    train, dev, test = [], [], []
    for s in specs:
        for out, n, offset in ((train, cfg.train_counts[s.lang_id], 0), (dev, cfg.dev_count, 1), (test, cfg.test_count, 2)):
            if n:
                out += gen_language(s, n, cfg.seed * 3 + offset, protos)
    return train, dev, test, specs, build_vocab(specs)


def collate(utts: Sequence[Utterance], vocab: Vocab) -> Batch:
    B = len(utts)
    T = max(len(u.features) for u in utts)
    d_in = utts[0].features.shape[1]
    feats = np.zeros((B, T, d_in))
    for i, u in enumerate(utts):
        feats[i, : len(u.features)] = u.features
    return Batch(
        features=feats,
        lengths=np.array([len(u.features) for u in utts]),
        targets=[vocab.encode(u.text) for u in utts],
        lids=np.array([u.lang for u in utts]),
        texts=[u.text for u in utts],
    )


def iterate_batches(utts: Sequence[Utterance], vocab: Vocab, batch_size: int, seed: int, bucket: int = 20):
    """Endless pooled, shuffled batches.

    Each pass draws a fresh permutation; windows of ``bucket`` batches are
    length-sorted before cutting so batches carry little padding, and the
    resulting batches are shuffled again.
    """
    rng = np.random.default_rng(seed)
    lengths = np.array([len(u.features) for u in utts])
    while True:
        order = rng.permutation(len(utts))
        n = len(order) - len(order) % batch_size
        batches = []
        window = batch_size * max(bucket, 1)
        for i in range(0, n, window):
            chunk = order[i : min(i + window, n)]
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
            batches += [chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size)]
        for k in rng.permutation(len(batches)):
            yield collate([utts[j] for j in batches[k]], vocab)


def eval_batches(utts: Sequence[Utterance], vocab: Vocab, batch_size: int = 64):
    for i in range(0, len(utts), batch_size):
        yield collate(utts[i : i + batch_size], vocab)
