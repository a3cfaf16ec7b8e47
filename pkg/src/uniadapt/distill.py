"""Online distillation from language-specific into universal adapters.

One training step runs the encoder twice on the same batch, once with the
language-specific adapters and once with the universal ones, on a single
graph. The loss is the sum of both CTC terms plus weighted feature-level and
logit-level MSE distillation terms, and one backward pass updates everything.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import adapters as ad
from .ctc import ctc_batch_loss
from .model import ForwardOutput, ModelParams, forward, padding_mask
from .tensor import ContractError, Tensor, mse

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    ctc_lsa: float
    ctc_lua: float
    l_ad: float
    l_out: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


class NaNLossError(FloatingPointError):
    pass


def loss_ad(
    lsa_feats: Sequence[Tensor],
    lua_feats: Sequence[Tensor],
    mask: np.ndarray | None = None,
) -> Tensor:
    """Mean over adapter positions of the feature MSE (mean over unpadded elements).

    ``lua_feats`` are already the bridged student views.
    """
    if len(lsa_feats) != len(lua_feats):
        raise ContractError(f"loss_ad: {len(lsa_feats)} teacher vs {len(lua_feats)} student positions")
    if not lsa_feats:
        raise ContractError("loss_ad: no adapter positions")
    total = None
    for a, b in zip(lsa_feats, lua_feats):
        term = mse(a, b, mask)
        total = term if total is None else total + term
    return total * (1.0 / len(lsa_feats))


def loss_out(z_phi: Tensor, z_psi: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """MSE between the two branches' logits over unpadded frames."""
    return mse(z_phi, z_psi, mask)


@dataclass
class StepGraph:
    """Everything one step builds on the graph, before the backward pass."""

    total: Tensor
    terms: dict[str, Tensor]
    outputs: dict[str, ForwardOutput]


def build_loss(
    params: ModelParams,
    batch,
    weights: LossWeights,
    detach_teacher: bool = False,
    rng: np.random.Generator | None = None,
) -> StepGraph:
    cfg = params.config
    valid = ~padding_mask(batch.lengths, batch.features.shape[1])
    outs = {
        b: forward(params, batch.features, batch.lengths, batch.lids, b, rng)
        for b in cfg.train_branches
    }

    def ctc(out: ForwardOutput) -> Tensor:
        return ctc_batch_loss(out.logits, batch.targets, batch.lengths, _blank(cfg)).mean()

    zero = Tensor(np.zeros(()))
    terms = {"ctc_lsa": zero, "ctc_lua": zero, "l_ad": zero, "l_out": zero}
    if cfg.adapter_mode == "lsa+lua":
        teacher, student = outs["lsa"], outs["lua"]
        terms["ctc_lsa"] = ctc(teacher)
        terms["ctc_lua"] = ctc(student)
        t_feats = teacher.adapter_outputs
        t_logits = teacher.logits
        if detach_teacher:
            t_feats = [f.detach() for f in t_feats]
            t_logits = t_logits.detach()
        if weights.alpha:
            views = [
                ad.lua_distill_view(x, params, i, cfg.bridge, student.adapter_outputs[i])
                for i, x in enumerate(student.adapter_inputs)
            ]
            terms["l_ad"] = loss_ad(t_feats, views, valid)
        if weights.beta:
            terms["l_out"] = loss_out(t_logits, student.logits, valid)
    else:
        (branch,) = cfg.train_branches
        key = "ctc_lsa" if branch == "lsa" else "ctc_lua"
        terms[key] = ctc(outs[branch])
    total = (
        terms["ctc_lsa"]
        + terms["ctc_lua"]
        + terms["l_ad"] * weights.alpha
        + terms["l_out"] * weights.beta
    )
    return StepGraph(total, terms, outs)


def _blank(cfg) -> int:
    # specials are appended in the fixed order unk, pad, blank, mask
    return cfg.vocab_size - 2


def breakdown(graph: StepGraph) -> LossBreakdown:
    t = graph.terms
    return LossBreakdown(
        ctc_lsa=t["ctc_lsa"].item(),
        ctc_lua=t["ctc_lua"].item(),
        l_ad=t["l_ad"].item(),
        l_out=t["l_out"].item(),
        total=graph.total.item(),
    )


class Adam:
    """Adam with linear warmup; updates parameter arrays in place."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.98), eps=1e-8, warmup=0):
        self.params = params
        self.lr, self.betas, self.eps, self.warmup = lr, betas, eps, warmup
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def rate(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, self.t / self.warmup)

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        lr = self.rate()
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(
    params: ModelParams,
    batch,
    weights: LossWeights,
    opt: Adam,
    step: int = 0,
    detach_teacher: bool = False,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Two forwards (when both adapter kinds exist), one backward, one update."""
    params.zero_grad()
    graph = build_loss(params, batch, weights, detach_teacher, rng)
    bd = breakdown(graph)
    for name, val in bd.as_dict().items():
        if not math.isfinite(val):
            raise NaNLossError(f"non-finite {name}={val} at step {step} (batch of {len(batch)})")
    graph.total.backward()
    opt.step()
    return bd


def evaluate(params: ModelParams, utts, vocab, branch: str | None = None, batch_size: int = 64):
    """Greedy-decode ``utts``; returns per-language CER, their mean, and the hypotheses."""
    from .ctc import edit_distance, greedy_decode
    from .model import predict_logits
    from .toy_data import eval_batches

    edits: dict[int, int] = {}
    chars: dict[int, int] = {}
    hyps: list[str] = []
    for batch in eval_batches(utts, vocab, batch_size):
        z = predict_logits(params, batch.features, batch.lengths, batch.lids, branch)
        for i in range(len(batch)):
            hyp = greedy_decode(z[i], vocab.blank, int(batch.lengths[i]))
            lang = int(batch.lids[i])
            edits[lang] = edits.get(lang, 0) + edit_distance(batch.targets[i], hyp)
            chars[lang] = chars.get(lang, 0) + len(batch.targets[i])
            hyps.append(vocab.decode(hyp))
    per_lang = {lang: edits[lang] / chars[lang] for lang in sorted(chars)}
    avg = float(np.mean(list(per_lang.values()))) if per_lang else float("nan")
    return per_lang, avg, hyps


@dataclass
class TrainResult:
    params: ModelParams
    vocab: object
    history: list[dict]
    dev_cer: dict[int, float]
    dev_avg: float
    test_cer: dict[int, float]
    test_avg: float
    best_step: int


def train(exp, out_dir=None, on_log=None) -> TrainResult:
    """Algorithm loop: pooled shuffled batches, periodic dev CER, best-dev model kept.

    ``exp`` is an ExperimentConfig. When ``out_dir`` is given the run writes
    ``config.ini``, ``metrics.jsonl``, ``model.ckpt`` and ``results.json``
    there. ``on_log`` receives every metrics record as it is produced.
    """
    import json
    from pathlib import Path

    from .checkpoint import save_checkpoint
    from .config import write_config
    from .model import init_params
    from .toy_data import iterate_batches, make_splits

    train_utts, dev_utts, test_utts, specs, vocab = make_splits(exp.data)
    exp = exp.resolved(len(vocab))
    cfg = exp.model
    if cfg.vocab_size != len(vocab) or cfg.n_langs != len(specs):
        raise ContractError("model config does not match the generated data")
    opt_cfg = exp.optim
    if opt_cfg.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {opt_cfg.optimizer!r}")
    params = init_params(cfg, opt_cfg.seed)
    opt = Adam(params.trainable(), lr=opt_cfg.lr, warmup=opt_cfg.warmup)
    batches = iterate_batches(train_utts, vocab, opt_cfg.batch_size, opt_cfg.seed)
    drop_rng = np.random.default_rng([opt_cfg.seed, 7]) if cfg.dropout > 0 else None

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(write_config(exp))
        metrics_file = open(out / "metrics.jsonl", "w")

    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if metrics_file:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()
        if on_log:
            on_log(rec)

    best = (float("inf"), 0, params.copy())
    dev_cer: dict[int, float] = {}
    try:
        for step in range(1, opt_cfg.max_updates + 1):
            batch = next(batches)
            bd = train_step(
                params, batch, exp.loss, opt, step, exp.run.detach_teacher, drop_rng
            )
            if step % exp.run.log_every == 0 or step == opt_cfg.max_updates:
                emit({"step": step, "lr": opt.rate(), **bd.as_dict()})
            if step % exp.run.eval_every == 0 or step == opt_cfg.max_updates:
                dev_cer, dev_avg, _ = evaluate(params, dev_utts, vocab)
                emit({"step": step, "dev_cer": _keyed(dev_cer), "dev_avg": dev_avg})
                log.info("step %d dev CER %.4f", step, dev_avg)
                if dev_avg < best[0]:
                    best = (dev_avg, step, params.copy())
    finally:
        if metrics_file:
            metrics_file.close()

    if opt_cfg.max_updates == 0:
        dev_cer, dev_avg, _ = evaluate(params, dev_utts, vocab)
        best = (dev_avg, 0, params.copy())
    best_avg, best_step, best_params = best
    dev_cer, dev_avg, _ = evaluate(best_params, dev_utts, vocab)
    test_cer, test_avg, _ = evaluate(best_params, test_utts, vocab)
    result = TrainResult(best_params, vocab, history, dev_cer, dev_avg, test_cer, test_avg, best_step)
    if out is not None:
        meta = {"run": exp.run.name, "best_step": best_step, "data": asdict(exp.data)}
        save_checkpoint(out / "model.ckpt", best_params, vocab, meta)
        summary = {
            "name": exp.run.name,
            "best_step": best_step,
            "dev_cer": _keyed(dev_cer),
            "dev_avg": dev_avg,
            "test_cer": _keyed(test_cer),
            "test_avg": test_avg,
        }
        (out / "results.json").write_text(json.dumps(summary, indent=2) + "\n")
    return result


def train_sum_variant(exp, out_dir=None, on_log=None) -> TrainResult:
    """Single pass per batch with summed adapter outputs and no distillation terms."""
    from dataclasses import replace

    exp = replace(
        exp,
        model=replace(exp.model, adapter_mode="sum"),
        loss=LossWeights(0.0, 0.0),
    )
    return train(exp, out_dir, on_log)


def _keyed(d: dict) -> dict:
    return {str(k): v for k, v in d.items()}
