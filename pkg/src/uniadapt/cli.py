"""Command-line interface.

    uniadapt train --preset kd-base
    uniadapt train --alpha 0 --beta 0 --no-lsa --lid-mode none
    uniadapt evaluate runs/kd-base/model.ckpt --split test
    uniadapt decode runs/kd-base/model.ckpt --lid 2 --limit 10
    uniadapt prune runs/kd-base/model.ckpt
    uniadapt params --preset kd-base
    uniadapt ablate --max-updates 1000
    uniadapt gen-data --out data/

Run directories default to ``$UNIADAPT_OUTPUT_DIR`` (``runs`` when unset).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import report
from .adapters import prune_for_inference
from .checkpoint import CheckpointError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .config import PRESETS, TABLE2, TABLE4, TABLE5, apply_overrides, preset, preset_label, read_config
from .distill import NaNLossError, evaluate, train, train_sum_variant
from .lid_prefix import LidMode, export_prefixes
from .model import ADAPTER_MODES, init_params
from .params import params_report
from .tensor import ContractError
from .toy_data import DataConfig, DataConfigError, make_splits

log = logging.getLogger("uniadapt")

ENV_OUT = "UNIADAPT_OUTPUT_DIR"

# dropping the language-specific bank also drops whatever was paired with it
NO_LSA = {"lsa+lua": "none", "lsa": "none", "sum": "none", "lua": "lua", "none": "none"}

ORDERING = (("A1", "multi"), ("A4", "lsa"), ("A7", "kd-base"))

TABLES = {"2": TABLE2, "4": TABLE4, "5": TABLE5}


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUT, "runs"))


def parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def overrides_file(path) -> dict[str, str]:
    """Every ``[section] key = value`` of an INI file as ``section.key`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(Path(path).read_text())
    return {f"{sec}.{k}": v for sec in cp.sections() for k, v in cp[sec].items()}


def experiment_from_args(args):
    if args.config:
        exp = read_config(Path(args.config).read_text())
    else:
        exp = preset(args.preset or "kd-base")
    ov = parse_set(args.set)
    flag_keys = {
        "alpha": "loss.alpha",
        "beta": "loss.beta",
        "lid_mode": "model.lid_mode",
        "adapter_mode": "model.adapter_mode",
        "bridge": "model.bridge",
        "seed": "optim.seed",
        "max_updates": "optim.max_updates",
        "name": "experiment.name",
    }
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            ov[key] = val
    if args.detach_teacher:
        ov["experiment.detach_teacher"] = True
    if args.post_norm:
        ov["model.post_norm"] = True
    exp = apply_overrides(exp, ov)
    if args.no_lsa:
        exp = replace(exp, model=replace(exp.model, adapter_mode=NO_LSA[exp.model.adapter_mode]))
    return exp


def run_training(exp, out_dir, on_log=None):
    runner = train_sum_variant if exp.model.adapter_mode == "sum" else train
    return runner(exp, out_dir, on_log)


def _progress(rec):
    if "dev_avg" in rec:
        log.info("step %5d  dev CER %.4f", rec["step"], rec["dev_avg"])
    elif rec["step"] % 100 == 0:
        log.info("step %5d  loss %.4f", rec["step"], rec["total"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    exp = experiment_from_args(args)
    out = Path(args.out) if args.out else output_root() / exp.run.name
    t0 = time.time()
    res = run_training(exp, out, _progress)
    print(f"run directory: {out}")
    print(f"best dev step {res.best_step}, {time.time() - t0:.1f}s")
    print(report.cer_table(report_keys(res.dev_cer), res.dev_avg, "dev"))
    print(report.cer_table(report_keys(res.test_cer), res.test_avg, "test"))
    if not args.no_plot:
        fig = report.plot_training(res.history, out / "training.png", preset_label(exp.run.name))
        print(f"figure: {fig}")
    return 0


def report_keys(d: dict) -> dict:
    return {str(k): v for k, v in d.items()}


def data_config_of(manifest, params) -> DataConfig:
    raw = manifest.get("meta", {}).get("data")
    if raw is None:
        cfg = params.config
        return DataConfig(n_langs=cfg.n_langs, d_in=cfg.d_in)
    return DataConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def load_split(manifest, params, name: str):
    train_utts, dev, test, _, vocab = make_splits(data_config_of(manifest, params))
    return {"train": train_utts, "dev": dev, "test": test}[name], vocab


def _check_vocab(model_vocab, data_vocab):
    if list(model_vocab.symbols) != list(data_vocab.symbols):
        raise ContractError("dataset vocabulary does not match the checkpoint")


def cmd_evaluate(args) -> int:
    params, vocab, manifest = load_checkpoint(args.checkpoint)
    utts, data_vocab = load_split(manifest, params, args.split)
    _check_vocab(vocab, data_vocab)
    branch = args.branch or params.config.inference_branch
    per_lang, avg, _ = evaluate(params, utts, vocab, branch)
    print(report.cer_table(report_keys(per_lang), avg, f"{args.split} ({branch})"))
    if args.json:
        print(json.dumps({"split": args.split, "branch": branch, "cer": report_keys(per_lang), "avg": avg}))
    return 0


def cmd_decode(args) -> int:
    from .ctc import corpus_cer, greedy_decode
    from .model import predict_logits
    from .toy_data import eval_batches

    params, vocab, manifest = load_checkpoint(args.checkpoint)
    if args.dataset:
        utts, data_vocab, _ = load_dataset(args.dataset)
    else:
        utts, data_vocab = load_split(manifest, params, args.split)
    _check_vocab(vocab, data_vocab)
    if args.lid is not None:
        if not 0 <= args.lid < params.config.n_langs:
            raise ContractError(f"unknown language id {args.lid} (model knows 0..{params.config.n_langs - 1})")
        utts = [u for u in utts if u.lang == args.lid]
    if args.limit is not None:
        utts = utts[: args.limit]
    if not utts:
        print("no utterances to decode")
        return 0
    # the deployed path: universal adapters when present
    branch = params.config.inference_branch
    refs, hyps = [], []
    for batch in eval_batches(utts, vocab):
        z = predict_logits(params, batch.features, batch.lengths, batch.lids, branch)
        for i in range(len(batch)):
            hyp = vocab.decode(greedy_decode(z[i], vocab.blank, int(batch.lengths[i])))
            refs.append(batch.texts[i])
            hyps.append(hyp)
            print(f"{len(refs) - 1}\t{int(batch.lids[i])}\t{batch.texts[i]}\t{hyp}")
    print(f"CER {corpus_cer(refs, hyps):.4f} over {len(refs)} utterances ({branch} path)")
    return 0


def _params_rows(rep):
    return [[g, n, "" if g == "backbone" else f"{r:.4f}"] for g, n, r in rep.rows()] + [["total", rep.total, ""]]


def cmd_prune(args) -> int:
    src = Path(args.checkpoint)
    params, vocab, manifest = load_checkpoint(src)
    if params.pruned:
        print(f"{src} is already pruned; nothing to do")
        return 0
    pruned = export_prefixes(prune_for_inference(params))
    dst = Path(args.output) if args.output else src.with_name(src.stem + ".pruned" + src.suffix)
    meta = dict(manifest.get("meta", {}), pruned_from=str(src))
    before, after = src.stat().st_size, save_checkpoint(dst, pruned, vocab, meta)
    print(f"wrote {dst}")
    print(f"size {before} -> {after} bytes ({after - before:+d}, {100.0 * (after - before) / before:+.1f}%)")
    print(report.format_table(_params_rows(params_report(pruned)), ["component", "params", "ratio"]))
    return 0


def cmd_params(args) -> int:
    if args.checkpoint:
        params, _, _ = load_checkpoint(args.checkpoint)
    else:
        exp = preset(args.preset)
        params = init_params(exp.resolved().model, 0)
    rep = params_report(params)
    print(report.format_table(_params_rows(rep), ["component", "params", "ratio"]))
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def _row_overrides(args) -> dict:
    ov = overrides_file(args.config) if args.config else {}
    ov.update(parse_set(args.set))
    if args.max_updates is not None:
        ov["optim.max_updates"] = args.max_updates
    return ov


def run_row(variant: str, overrides: dict, out_dir: Path, seed: int | None = None) -> dict:
    """Train one grid variant; failures come back as a row, never as an exception."""
    row = {"variant": variant, "label": preset_label(variant)}
    t0 = time.time()
    try:
        ov = dict(overrides)
        if seed is not None:
            ov["optim.seed"] = seed
        exp = apply_overrides(preset(variant), ov)
        row["seed"] = exp.optim.seed
        res = run_training(exp, out_dir)
        row.update(
            status="ok",
            dev_cer=report_keys(res.dev_cer),
            dev_avg=res.dev_avg,
            test_cer=report_keys(res.test_cer),
            test_avg=res.test_avg,
            best_step=res.best_step,
            params=params_report(res.params).total,
        )
    except Exception as exc:  # a broken row must not stop the grid
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    row["seconds"] = round(time.time() - t0, 1)
    return row


def _map_rows(jobs, tasks):
    if jobs <= 1:
        for t in tasks:
            row = run_row(*t)
            log.info("%-24s %s", row["label"], _row_brief(row))
            yield row
        return
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(jobs) as pool:
        yield from pool.map(run_row, *zip(*tasks))


def _row_brief(row) -> str:
    if row["status"] != "ok":
        return row["error"]
    return f"test {row['test_avg']:.4f}  ({row['seconds']}s)"


def cmd_ablate(args) -> int:
    out = Path(args.out) if args.out else output_root() / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    ov = _row_overrides(args)
    variants: list[str] = []
    for t in args.tables.split(","):
        for v in TABLES[t.strip()]:
            if v not in variants:
                variants.append(v)
    rows = list(_map_rows(args.jobs, [(v, ov, out / v, None) for v in variants]))

    langs = sorted({k for r in rows if r["status"] == "ok" for k in r["test_cer"]}, key=int)
    header = ["variant", *(f"lang{k}" for k in langs), "avg", "dev avg", "status"]
    text_rows = [
        [r["label"], *(r.get("test_cer", {}).get(k) for k in langs), r.get("test_avg"), r.get("dev_avg"), r["status"]]
        for r in rows
    ]
    table = report.format_table(text_rows, header)
    print("test CER by variant")
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    report.write_jsonl(out / "ablation.jsonl", rows)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if not args.no_plot:
        report.plot_ablation(rows, out / "ablation.png")

    if args.order_seeds:
        order = _ordering(args, ov, rows, out)
        report.write_jsonl(out / "ordering.jsonl", order)
        if not args.no_plot and order:
            report.plot_ordering(order, out / "ordering.png")
    failed = [r["variant"] for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} row(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _ordering(args, ov, rows, out) -> list[dict]:
    """A7 < A4 < A1 on several seeds; reported, never enforced."""
    by_variant = {r["variant"]: r for r in rows if r["status"] == "ok"}
    records = []
    for seed in [int(s) for s in args.order_seeds.split(",")]:
        cer = {}
        for tag, variant in ORDERING:
            r = by_variant.get(variant)
            if r is None or r["seed"] != seed:
                r = run_row(variant, ov, out / f"seed{seed}" / variant, seed)
            cer[tag] = r.get("test_avg", float("nan"))
        holds = cer["A7"] < cer["A4"] < cer["A1"]
        records.append({"seed": seed, "test_avg": cer, "A7<A4<A1": holds})
    print("ordering check (reported only)")
    print(
        report.format_table(
            [[r["seed"], *r["test_avg"].values(), "yes" if r["A7<A4<A1"] else "no"] for r in records],
            ["seed", *(t for t, _ in ORDERING), "A7<A4<A1"],
        )
    )
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return records


def cmd_gen_data(args) -> int:
    from .config import ExperimentConfig

    exp = apply_overrides(ExperimentConfig(), parse_set(args.set))
    train_utts, dev, test, _, vocab = make_splits(exp.data)
    out = Path(args.out) if args.out else output_root() / "data"
    out.mkdir(parents=True, exist_ok=True)
    meta = {"data": asdict(exp.data)}
    for name, utts in (("train", train_utts), ("dev", dev), ("test", test)):
        save_dataset(out / f"{name}.bin", utts, vocab, meta)
        print(f"{name}: {len(utts)} utterances -> {out / (name + '.bin')}")
    print(f"vocab ({len(vocab)}): {' '.join(vocab.symbols)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_experiment_flags(p):
    p.add_argument("--preset", choices=list(PRESETS), help="system preset (default kd-base)")
    p.add_argument("--config", help="INI config file; may name a preset in [experiment]")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VAL", help="override any config key")
    p.add_argument("--alpha", type=float, help="weight of the adapter distillation loss")
    p.add_argument("--beta", type=float, help="weight of the logit distillation loss")
    p.add_argument("--no-lsa", action="store_true", help="drop the language-specific adapters")
    p.add_argument("--lid-mode", choices=[m.value for m in LidMode])
    p.add_argument("--adapter-mode", choices=ADAPTER_MODES)
    p.add_argument("--bridge", choices=("literal", "after"))
    p.add_argument("--detach-teacher", action="store_true", help="stop gradients into the teacher branch")
    p.add_argument("--post-norm", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-updates", type=int)
    p.add_argument("--name", help="run name (default: the preset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniadapt", description="Universal adapter distillation at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one system")
    _add_experiment_flags(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CER of a checkpoint on a regenerated split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--branch", choices=("plain", "lua", "lsa", "sum"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("decode", help="greedy transcripts through the deployed path")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="dataset file written by gen-data")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--lid", type=int, help="only utterances of this language")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("prune", help="drop language-specific adapters and bridges, store prefixes")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("params", help="parameter counts per component")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--preset", choices=list(PRESETS), default="kd-base")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="train the variant grid and tabulate CER")
    p.add_argument("--config", help="INI file of overrides applied to every variant")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VAL")
    p.add_argument("--tables", default="2,4,5", help="which variant groups to run")
    p.add_argument("--max-updates", type=int)
    p.add_argument("--order-seeds", default="0,1,2", help="seeds for the A7/A4/A1 comparison ('' to skip)")
    p.add_argument("--jobs", type=int, default=1, help="rows trained in parallel processes")
    p.add_argument("--out")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write the toy train/dev/test splits to disk")
    p.add_argument("--set", action="append", metavar="data.KEY=VAL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ContractError, DataConfigError, CheckpointError, NaNLossError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
