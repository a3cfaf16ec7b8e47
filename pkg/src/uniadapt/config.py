"""Experiment configuration, the system presets, and the INI-style config file.

Config files are flat ``key = value`` lines grouped in sections::

    [experiment]
    name = kd-base
    [model]
    d = 64
    lid_mode = prefixes
    [data]
    train_counts = 1500, 1500, 750
    [optim]
    lr = 0.002
    [loss]
    alpha = 0.1

Any key left out keeps its default. ``write_config`` emits every key.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, replace

from .distill import LossWeights
from .model import ModelConfig
from .toy_data import DataConfig


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    optimizer: str = "adam"
    warmup: int = 100
    max_updates: int = 2000
    batch_size: int = 16
    seed: int = 0


@dataclass
class RunConfig:
    name: str = "kd-base"
    detach_teacher: bool = False
    eval_every: int = 250
    log_every: int = 25


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    SECTIONS = {"experiment": "run", "model": "model", "data": "data", "optim": "optim", "loss": "loss"}

    def resolved(self, vocab_size: int | None = None) -> "ExperimentConfig":
        """Sync model dimensions that are dictated by the data."""
        n_chars = len(set("".join(_charsets(self.data))))
        model = replace(
            self.model,
            d_in=self.data.d_in,
            n_langs=self.data.n_langs,
            vocab_size=vocab_size or n_chars + 4,
        )
        return replace(self, model=model)

    def to_dict(self) -> dict:
        return {sec: dataclasses.asdict(getattr(self, attr)) for sec, attr in self.SECTIONS.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        exp = cls()
        for sec, attr in cls.SECTIONS.items():
            if sec in d:
                exp = replace(exp, **{attr: _update(getattr(exp, attr), d[sec])})
        return exp


def _charsets(data: DataConfig):
    from .toy_data import char_sets

    return char_sets(data.n_langs, data.chars_per_lang, data.overlap)


def _coerce(default, raw):
    if isinstance(raw, str):
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw.strip()
    if isinstance(default, tuple):
        return tuple(raw)
    if isinstance(default, float) and isinstance(raw, int):
        return float(raw)
    return raw


def _update(obj, values: dict):
    known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in values.items():
        if k not in known:
            raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
        changes[k] = _coerce(known[k], v)
    return replace(obj, **changes)


def apply_overrides(exp: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Apply ``{"section.key": value}`` overrides."""
    d = exp.to_dict()
    for key, val in overrides.items():
        sec, _, name = key.partition(".")
        if sec not in d or not name:
            raise KeyError(f"override {key!r} must look like section.key")
        d[sec][name] = val
    return ExperimentConfig.from_dict(d)


def read_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    d = {}
    for sec in cp.sections():
        if sec not in ExperimentConfig.SECTIONS:
            raise KeyError(f"unknown config section [{sec}]")
        d[sec] = dict(cp[sec])
    base = preset(d["experiment"]["preset"]) if "preset" in d.get("experiment", {}) else None
    if base is not None:
        d["experiment"].pop("preset")
        return apply_overrides(base, {f"{s}.{k}": v for s, kv in d.items() for k, v in kv.items()})
    return ExperimentConfig.from_dict(d)


def write_config(exp: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec, values in exp.to_dict().items():
        cp[sec] = {
            k: ", ".join(map(str, v)) if isinstance(v, (tuple, list)) else str(v)
            for k, v in values.items()
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# desk-scale optimizer: from-scratch toy training needs a larger step than the
# fine-tuning rate of 1e-4
TOY_OPTIM = OptimizerConfig(lr=2e-3, warmup=100, max_updates=2000, batch_size=16)

# name -> (row label, overrides); ordered like the ablation tables
PRESETS: dict[str, tuple[str, dict]] = {
    "multi": ("A1 Multi", {"model.adapter_mode": "none", "model.lid_mode": "none", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "prefix": ("A2 A1+LID prefixes", {"model.adapter_mode": "none", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "lua": ("A3 A2+LUA", {"model.adapter_mode": "lua", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "lsa": ("A4 A2+LSA", {"model.adapter_mode": "lsa", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "lsa-lua": ("A5 A2+LSA+LUA", {"model.adapter_mode": "lsa+lua", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "kd-ad": ("A6 A5+L_ad", {"model.adapter_mode": "lsa+lua", "loss.alpha": 0.1, "loss.beta": 0.0}),
    "kd-base": ("A7 A6+L_out", {"model.adapter_mode": "lsa+lua", "loss.alpha": 0.1, "loss.beta": 0.1}),
    "sum": ("Sum LSA+LUA summed", {"model.adapter_mode": "sum", "loss.alpha": 0.0, "loss.beta": 0.0}),
    "kd-input": ("LID Input", {"model.lid_mode": "input"}),
    "kd-top": ("LID Top-K", {"model.lid_mode": "top"}),
    "kd-attention": ("LID Attention", {"model.lid_mode": "attention"}),
    "multi-large": (
        "B1 Multi (large)",
        {"model.adapter_mode": "none", "model.lid_mode": "none", "loss.alpha": 0.0, "loss.beta": 0.0},
    ),
    "kd-large": ("B2 Proposed (large)", {"loss.alpha": 0.05, "loss.beta": 0.1}),
}

_LARGE = {"model.d": 96, "model.n_layers": 6, "model.top_k": 3, "model.d_ff": 192, "model.adapter_dim": 24}

TABLE2 = ["multi", "prefix", "lua", "lsa", "lsa-lua", "kd-ad", "kd-base"]
TABLE4 = ["kd-base", "sum"]
TABLE5 = ["kd-base", "kd-input", "kd-top", "kd-attention"]


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = ExperimentConfig(run=RunConfig(name=name), optim=TOY_OPTIM)
    overrides = dict(PRESETS[name][1])
    if name.endswith("-large"):
        overrides = {**_LARGE, **overrides}
    return apply_overrides(base, overrides)


def preset_label(name: str) -> str:
    return PRESETS[name][0] if name in PRESETS else name
