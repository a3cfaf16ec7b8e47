"""Acceptance gate: one verdict line per criterion, at the stated tolerances.

The toy trend experiment runs the full ablation grid through the CLI and
takes roughly a quarter of an hour on one core.
"""

import itertools
import json
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from uniadapt import cli
from uniadapt import lid_prefix as lp
from uniadapt.adapters import adapter_param_count
from uniadapt.checkpoint import load_checkpoint
from uniadapt.config import apply_overrides, preset
from uniadapt.ctc import ctc_loss, greedy_decode, min_frames
from uniadapt.distill import LossWeights, breakdown, build_loss, train
from uniadapt.model import init_params, predict_logits
from uniadapt.nn import AttentionWeights
from uniadapt.params import params_report
from uniadapt.tensor import Tensor
from uniadapt.toy_data import eval_batches

from conftest import (
    VERDICTS,
    central_difference,
    random_batch,
    randomize,
    tiny_config,
    tiny_experiment,
)

GRID_UPDATES = 1000
GRID_BUDGET_S = 30 * 60


def verdict(n, title, ok, detail, capsys):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    VERDICTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. prefix attention: concatenated form vs gamma-gated decomposition
# ---------------------------------------------------------------------------


def test_criterion_1_prefix_equivalence(capsys):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, g_lo, g_hi, n = 0.0, 1.0, 0.0, 0
    for T, d, H, Lp in itertools.product(range(1, 9), (8, 16), (1, 2, 4), (1, 2)):
        for _ in range(2):
            s = 1.0 / np.sqrt(d)
            ts = []
            for _ in range(4):
                ts += [Tensor(s * rng.standard_normal((d, d))), Tensor(s * rng.standard_normal(d))]
            w = AttentionWeights(*ts, n_heads=H)
            pp = lp.PrefixPair(Tensor(rng.standard_normal((Lp, d))), Tensor(rng.standard_normal((Lp, d))))
            x = rng.standard_normal((T, d))
            direct = lp.prefixed_attention(x, w, pp).data
            gated = lp.prefixed_attention(x, w, pp, form="gated")
            g = lp.gamma(x, w, pp)
            worst = max(worst, float(np.max(np.abs(direct - gated))))
            g_lo, g_hi = min(g_lo, float(g.min())), max(g_hi, float(g.max()))
            n += 1
    dt = time.perf_counter() - t0
    ok = n >= 100 and worst < 1e-10 and 0 < g_lo and g_hi < 1 and dt < 10
    verdict(
        1,
        "prefix equivalence",
        ok,
        f"{n} configs, max |direct-gated| = {worst:.2e} (< 1e-10), gamma in [{g_lo:.3g}, {g_hi:.3g}], {dt:.2f}s",
        capsys,
    )


# ---------------------------------------------------------------------------
# 2. CTC dynamic programme vs brute-force path enumeration
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _paths(T, V, blank):
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64)
    labels = []
    for p in paths:
        out, prev = [], None
        for k in p:
            if k != blank and k != prev:
                out.append(int(k))
            prev = k
        labels.append(tuple(out))
    return paths, labels


def brute_force_nll(z, labels, blank):
    T, V = z.shape
    lp_ = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    paths, collapsed = _paths(T, V, blank)
    scores = lp_[np.arange(T), paths].sum(axis=1)
    keep = np.array([c == tuple(labels) for c in collapsed])
    m = scores[keep].max()
    return -(m + math.log(np.exp(scores[keep] - m).sum()))


def test_criterion_2_ctc_oracle(capsys):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 240:
        T, V = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        blank = int(rng.integers(V))
        symbols = [k for k in range(V) if k != blank]
        y = [int(k) for k in rng.choice(symbols, size=int(rng.integers(0, 3)))]
        if min_frames(y) > T:
            continue
        z = rng.standard_normal((T, V)) * 2
        dp = ctc_loss(Tensor(z), y, blank).item()
        bf = brute_force_nll(z, y, blank)
        worst = max(worst, abs(dp - bf) / max(abs(bf), 1e-300))
        n += 1
    norm_worst = 0.0
    for T in (1, 2, 3):
        for V in (2, 3):
            for blank in range(V):
                z = rng.standard_normal((T, V))
                symbols = [k for k in range(V) if k != blank]
                total = sum(
                    math.exp(-ctc_loss(Tensor(z), list(y), blank).item())
                    for U in range(T + 1)
                    for y in itertools.product(symbols, repeat=U)
                    if min_frames(y) <= T
                )
                norm_worst = max(norm_worst, abs(total - 1.0))
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and norm_worst < 1e-9 and dt < 60
    verdict(
        2,
        "CTC oracle",
        ok,
        f"{n} instances, max rel err {worst:.2e} (< 1e-9), |sum p - 1| <= {norm_worst:.2e}, {dt:.1f}s",
        capsys,
    )


# ---------------------------------------------------------------------------
# 3. gradient integrity of the full multi-task loss
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_integrity(capsys):
    rng = np.random.default_rng(303)
    cfg = tiny_config(
        d_in=6, d=32, n_heads=4, d_ff=48, n_layers=4, top_k=2, vocab_size=8, n_langs=3,
        adapter_dim=6, prefix_embed=6, prefix_hidden=12, freeze_embedding=False,
    )
    params = randomize(init_params(cfg, 7), rng, scale=0.2)
    batch = random_batch(cfg, rng, B=3, T=7, lids=[0, 1, 2])
    weights = LossWeights(0.1, 0.1)

    def fn():
        return build_loss(params, batch, weights).total

    t0 = time.perf_counter()
    params.zero_grad()
    fn().backward()
    # central differences resolve about |loss| * 2^-52 / eps; below that a
    # gradient is indistinguishable from zero (e.g. key biases of layers without
    # prefixes, which softmax cancels exactly)
    resolution = 100 * abs(fn().item()) * np.finfo(float).eps / 1e-5
    worst_name, worst, n_groups, zero_groups, zero_ok = "", 0.0, 0, [], True
    for name, t in params.trainable().items():
        idx = list({tuple(int(rng.integers(s)) for s in t.shape) for _ in range(3)})
        num = np.array([central_difference(fn, t, i) for i in idx])
        ana = np.array([t.grad_or_zeros()[i] for i in idx])
        n_groups += 1
        if np.abs(ana).max() < 1e-12:
            zero_groups.append(name)
            zero_ok &= bool(np.abs(num).max() < resolution)
            continue
        err = float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana)))
        if err > worst:
            worst_name, worst = name, err
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and zero_ok and dt < 300
    verdict(
        3,
        "gradient integrity",
        ok,
        f"{n_groups} parameter tensors, worst rel err {worst:.2e} ({worst_name}) < 1e-4; "
        f"{len(zero_groups)} exactly-zero gradients ({', '.join(zero_groups)}) within FD resolution "
        f"{resolution:.1e}: {zero_ok}; {dt:.1f}s",
        capsys,
    )


# ---------------------------------------------------------------------------
# 4. the training step's structure
# ---------------------------------------------------------------------------


def test_criterion_4_algorithm_structure(tmp_path, capsys):
    rng = np.random.default_rng(404)
    cfg = tiny_config(n_langs=3)
    params = randomize(init_params(cfg, 1), rng)
    batch = random_batch(cfg, rng, B=4, lids=[0, 2, 2, 0])
    w = LossWeights(0.1, 0.1)
    graph = build_loss(params, batch, w)
    bd = breakdown(graph)
    recomposes = bd.total == bd.ctc_lsa + bd.ctc_lua + w.alpha * bd.l_ad + w.beta * bd.l_out

    params.zero_grad()
    graph.total.backward()
    touched = {lang: False for lang in range(3)}
    for name, t in params.trainable().items():
        if name.startswith("lsa."):
            touched[int(name.split(".")[1])] |= bool(np.any(t.grad_or_zeros() != 0))
    exclusive = touched == {0: True, 1: False, 2: True}

    def lsa_grad_from_l_ad(detach):
        params.zero_grad()
        build_loss(params, batch, LossWeights(1.0, 0.0), detach_teacher=detach).terms["l_ad"].backward()
        lsa = sum(np.abs(t.grad_or_zeros()).sum() for n, t in params.trainable().items() if n.startswith("lsa."))
        lua = sum(np.abs(t.grad_or_zeros()).sum() for n, t in params.trainable().items() if n.startswith("lua."))
        return lsa, lua

    live, live_lua = lsa_grad_from_l_ad(False)
    dead, dead_lua = lsa_grad_from_l_ad(True)
    detach_ok = live > 0 and live_lua > 0 and dead == 0 and dead_lua > 0

    exp = tiny_experiment(updates=6)
    train(exp, tmp_path / "a")
    train(exp, tmp_path / "b")
    same = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    ok = recomposes and exclusive and detach_ok and same
    verdict(
        4,
        "training step structure",
        ok,
        f"recomposition exact={recomposes}, routing exclusive={exclusive}, "
        f"detach zeroes teacher grad={detach_ok}, bitwise-equal checkpoints={same}",
        capsys,
    )


# ---------------------------------------------------------------------------
# 5. pruning invariance through the prune command
# ---------------------------------------------------------------------------


def test_criterion_5_pruning_invariance(tmp_path, capsys):
    exp = apply_overrides(preset("kd-base"), {"optim.max_updates": 40, "data.train_counts": (200, 200, 100)})
    train(exp, tmp_path)
    ckpt = tmp_path / "model.ckpt"
    with capsys.disabled():
        code = cli.main(["prune", str(ckpt), "-o", str(tmp_path / "pruned.ckpt")])
    full, vocab, manifest = load_checkpoint(ckpt)
    small, _, _ = load_checkpoint(tmp_path / "pruned.ckpt")
    utts, _ = cli.load_split(manifest, full, "test")
    logits_equal = transcripts_equal = True
    n = 0
    for b in eval_batches(utts, vocab):
        za = predict_logits(full, b.features, b.lengths, b.lids, "lua")
        zb = predict_logits(small, b.features, b.lengths, b.lids, "lua")
        logits_equal &= bool(np.array_equal(za, zb))
        for i in range(len(b)):
            L = int(b.lengths[i])
            transcripts_equal &= greedy_decode(za[i], vocab.blank, L) == greedy_decode(zb[i], vocab.blank, L)
            n += 1
    dropped = not any(name.startswith(("lsa.", "bridge.")) for name in small.names())
    smaller = (tmp_path / "pruned.ckpt").stat().st_size < ckpt.stat().st_size
    ok = code == 0 and logits_equal and transcripts_equal and dropped and smaller
    verdict(
        5,
        "pruning invariance",
        ok,
        f"{n} test utterances, logits bitwise={logits_equal}, transcripts equal={transcripts_equal}, "
        f"LSA/bridges dropped={dropped}, file smaller={smaller}",
        capsys,
    )


# ---------------------------------------------------------------------------
# 6. parameter accounting against the closed form
# ---------------------------------------------------------------------------


def closed_form(cfg):
    d, r, K, L, V = cfg.d, cfg.adapter_dim, cfg.top_k, cfg.n_langs, cfg.vocab_size
    layer = 4 * (d * d + d) + 4 * d + (d * cfg.d_ff + cfg.d_ff) + (cfg.d_ff * d + d)
    backbone = (cfg.d_in * d + d) + cfg.n_layers * layer + 2 * d + (d * V + V)
    one_set = 2 * K * (2 * d + (d * r + r) + (r * d + d))
    de, dh, out = cfg.prefix_embed, cfg.prefix_hidden, 2 * cfg.prefix_len * d
    prefix = K * (L * de + de * dh + dh + dh * out + out)
    return {"backbone": backbone, "lsa": L * one_set, "lua": one_set, "bridge": 2 * K * (d * d + d), "prefix": prefix}


def test_criterion_6_parameter_accounting(capsys):
    from dataclasses import replace

    base = preset("kd-base").resolved().model
    checks = []
    for L in (2, 3, 5):
        for r in (8, 16):
            cfg = replace(base, n_langs=L, adapter_dim=r)
            rep = params_report(init_params(cfg, 0))
            expect = closed_form(cfg)
            checks.append(
                rep.counts == expect
                and rep.counts["lsa"] == L * rep.counts["lua"]
                and rep.ratio("lua") < rep.ratio("lsa")
            )
    single = adapter_param_count(64, 16)
    rep = params_report(init_params(base, 0))
    ok = all(checks) and single == 2256
    verdict(
        6,
        "parameter accounting",
        ok,
        f"{sum(checks)}/{len(checks)} configs match closed form; d=64,r=16 adapter = {single}; "
        f"default LUA/LSA overhead {rep.ratio('lua'):.3f} < {rep.ratio('lsa'):.3f}",
        capsys,
    )


# ---------------------------------------------------------------------------
# 7 and 8. the ablation grid on the default toy data
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    t0 = time.perf_counter()
    code = cli.main(["ablate", "--max-updates", str(GRID_UPDATES), "--out", str(out)])
    elapsed = time.perf_counter() - t0
    rows = {}
    for line in (out / "ablation.jsonl").read_text().splitlines():
        r = json.loads(line)
        rows[r["variant"]] = r
    order = [json.loads(x) for x in (out / "ordering.jsonl").read_text().splitlines()]
    return {"code": code, "rows": rows, "order": order, "seconds": elapsed, "out": out}


def test_criterion_7_toy_trend(grid, capsys):
    rows = grid["rows"]
    multi, kd = rows["multi"], rows["kd-base"]
    expected = ["multi", "prefix", "lua", "lsa", "lsa-lua", "kd-ad", "kd-base", "sum", "kd-input", "kd-top", "kd-attention"]
    complete = list(rows) == expected and all(r["status"] == "ok" for r in rows.values()) and grid["code"] == 0
    a = multi.get("dev_avg", math.inf) < 0.25
    b = kd.get("test_avg", math.inf) < 0.15 and kd["test_avg"] <= multi.get("test_avg", -1)
    fast = grid["seconds"] < GRID_BUDGET_S
    with capsys.disabled():
        print()
        print((grid["out"] / "ablation.txt").read_text())
        for rec in grid["order"]:
            cer = ", ".join(f"{k} {v:.4f}" for k, v in rec["test_avg"].items())
            print(f"ordering seed {rec['seed']}: {cer}; A7<A4<A1 {'holds' if rec['A7<A4<A1'] else 'does not hold'}")
    holds = sum(r["A7<A4<A1"] for r in grid["order"])
    verdict(
        7,
        "toy trend",
        a and b and complete and fast,
        f"(a) Multi dev {multi.get('dev_avg', float('nan')):.4f} < 0.25: {a}; "
        f"(b) KD test {kd.get('test_avg', float('nan')):.4f} < 0.15 and <= Multi test "
        f"{multi.get('test_avg', float('nan')):.4f}: {b}; (c) {len(rows)} rows complete: {complete}; "
        f"{grid['seconds'] / 60:.1f} min < 30: {fast}; ordering held on {holds}/{len(grid['order'])} seeds (reported only)",
        capsys,
    )


def test_criterion_8_lid_modes(grid, capsys):
    rows = grid["rows"]
    modes = {"kd-base": "prefixes", "kd-input": "input", "kd-top": "top", "kd-attention": "attention"}
    trained = all(rows[v]["status"] == "ok" and math.isfinite(rows[v]["test_avg"]) for v in modes)

    rng = np.random.default_rng(808)
    base = init_params(tiny_config(lid_mode="none"), 0)
    batch = random_batch(base.config, rng)

    def logits(p):
        return predict_logits(p, batch.features, batch.lengths, batch.lids)

    ref = logits(base)
    degenerate = {}
    p = init_params(tiny_config(lid_mode="input"), 0)
    p["lid.embed"].data[...] = 0.0
    degenerate["input"] = np.array_equal(logits(p), ref)
    p = init_params(tiny_config(lid_mode="top"), 0)
    for layer in p.config.top_layers():
        p[f"lid.{layer}.embed"].data[...] = 0.0
    degenerate["top"] = np.array_equal(logits(p), ref)
    p = init_params(tiny_config(lid_mode="attention"), 0)
    for layer in p.config.top_layers():
        p[f"lid.{layer}.embed"].data[...] = 0.0
    degenerate["attention"] = np.array_equal(logits(p), ref)
    degenerate["prefix L_p=0"] = np.array_equal(logits(init_params(tiny_config(prefix_len=0), 0)), ref)

    ok = trained and all(degenerate.values())
    cers = ", ".join(f"{modes[v]} {rows[v].get('test_avg', float('nan')):.4f}" for v in modes)
    verdict(
        8,
        "LID modes",
        ok,
        f"one ablate command trained all four modes ({cers}); zero-conditioning bitwise: "
        + ", ".join(f"{k}={v}" for k, v in degenerate.items()),
        capsys,
    )
