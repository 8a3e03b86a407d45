"""Run configuration: a flat ``key = value`` file with one section per stage.

Keys before the first section header belong to ``[run]``.  Any key can be
overridden as ``section.key=value``.  Recognised sections and keys::

    [run]          seed, format (tsv|jsonl), preset, eval_mode (pooled|per_lp)
    [model]        d, buckets, head_dims, lr_encoder, lr_head, seed, encoder_kind
    [degrade]      word_drop_prob, span_drop_prob, max_span_fraction, min_tokens_kept
    [provider]     kind (offline|http), endpoint, timeout, retries
    [label]        format, scorers (comma list; "overlap" or checkpoint paths)
    [prune]        drop_ratios (five comma-separated ratios)
    [pretrain]     epochs, batch_size, lr_encoder, lr_head, formats
    [finetune_da]  same keys as [pretrain]
    [finetune_mqm] same keys as [pretrain]
    [finetune_dev] same keys as [pretrain]
    [cv]           epochs, lr_head, lr_encoder, batch_size (comma lists forming a grid)
    [ensemble]     members (comma list of checkpoint paths)
    [report]       thresholds (comma list), bins
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .datagen import DEFAULT_DROP_RATIOS, DegradeConfig
from .model import PRESETS, ModelConfig, TrainHyper, parse_formats

STAGES = ("pretrain", "finetune_da", "finetune_mqm", "finetune_dev")

KNOWN_KEYS = {
    "run": {"seed", "format", "preset", "eval_mode"},
    "model": {"d", "buckets", "head_dims", "lr_encoder", "lr_head", "seed", "encoder_kind"},
    "degrade": {"word_drop_prob", "span_drop_prob", "max_span_fraction", "min_tokens_kept"},
    "provider": {"kind", "endpoint", "timeout", "retries"},
    "label": {"format", "scorers"},
    "prune": {"drop_ratios"},
    "cv": {"epochs", "lr_head", "lr_encoder", "batch_size"},
    "ensemble": {"members"},
    "report": {"thresholds", "bins"},
    **{stage: {"epochs", "batch_size", "lr_encoder", "lr_head", "formats"} for stage in STAGES},
}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _items(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


@dataclass
class StageConfig:
    hyper: TrainHyper
    formats: str


@dataclass
class RunConfig:
    seed: Optional[int] = None
    format: str = "tsv"
    eval_mode: str = "pooled"
    model: ModelConfig = field(default_factory=lambda: PRESETS["desk"])
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    provider: dict = field(default_factory=lambda: {"kind": "offline", "endpoint": "", "timeout": 10.0, "retries": 2})
    label_format: str = "src"
    scorers: list[str] = field(default_factory=lambda: ["overlap"])
    drop_ratios: tuple[float, ...] = DEFAULT_DROP_RATIOS
    stages: dict[str, StageConfig] = field(default_factory=dict)
    cv_grid: list[TrainHyper] = field(default_factory=list)
    ensemble_members: list[str] = field(default_factory=list)
    thresholds: Optional[list[float]] = None
    bins: int = 20

    def stage(self, name: str) -> StageConfig:
        if name in self.stages:
            return self.stages[name]
        return StageConfig(TrainHyper(epochs=1, batch_size=32), "all" if name == "pretrain" else "src")

    def validate(self, base_dir: Optional[Path] = None) -> None:
        if self.seed is None:
            raise ConfigError("a seed is mandatory (set run.seed or pass --seed)")
        if self.format not in ("tsv", "jsonl"):
            raise ConfigError(f"run.format must be tsv or jsonl, got {self.format!r}")
        if self.eval_mode not in ("pooled", "per_lp"):
            raise ConfigError(f"run.eval_mode must be pooled or per_lp, got {self.eval_mode!r}")
        base = base_dir or Path.cwd()
        for path in [*self.ensemble_members, *(s for s in self.scorers if s != "overlap")]:
            if not (base / path).exists() and not Path(path).exists():
                raise ConfigError(f"referenced file does not exist: {path}")


def _read_parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    stripped = text.lstrip()
    if not stripped.startswith("["):
        text = "[run]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides: Sequence[str]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())


def build_config(parser: configparser.ConfigParser) -> RunConfig:
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return _build(parser)
    except (ValueError, TypeError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {err}") from None


def _build(parser: configparser.ConfigParser) -> RunConfig:
    cfg = RunConfig()
    get = lambda s, k: parser.get(s, k, fallback=None)  # noqa: E731
    if get("run", "seed") is not None:
        cfg.seed = int(get("run", "seed"))
    cfg.format = get("run", "format") or cfg.format
    cfg.eval_mode = get("run", "eval_mode") or cfg.eval_mode
    preset = get("run", "preset") or "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}; known: {', '.join(PRESETS)}")
    model = PRESETS[preset]
    if parser.has_section("model"):
        sec = parser["model"]
        changes = {}
        for key in ("d", "buckets", "seed"):
            if key in sec:
                changes[key] = int(sec[key])
        for key in ("lr_encoder", "lr_head"):
            if key in sec:
                changes[key] = float(sec[key])
        if "head_dims" in sec:
            changes["head_dims"] = tuple(_ints(sec["head_dims"]))
        if "encoder_kind" in sec:
            changes["encoder_kind"] = sec["encoder_kind"]
        model = replace(model, **changes)
    cfg.model = model
    if parser.has_section("degrade"):
        sec = parser["degrade"]
        cfg.degrade = DegradeConfig(
            word_drop_prob=float(sec.get("word_drop_prob", DegradeConfig.word_drop_prob)),
            span_drop_prob=float(sec.get("span_drop_prob", DegradeConfig.span_drop_prob)),
            max_span_fraction=float(sec.get("max_span_fraction", DegradeConfig.max_span_fraction)),
            min_tokens_kept=int(sec.get("min_tokens_kept", DegradeConfig.min_tokens_kept)),
        )
    if parser.has_section("provider"):
        sec = parser["provider"]
        cfg.provider = {
            "kind": sec.get("kind", "offline"),
            "endpoint": sec.get("endpoint", ""),
            "timeout": float(sec.get("timeout", 10.0)),
            "retries": int(sec.get("retries", 2)),
        }
    if parser.has_section("label"):
        cfg.label_format = parser["label"].get("format", cfg.label_format)
        if "scorers" in parser["label"]:
            cfg.scorers = _items(parser["label"]["scorers"])
    if get("prune", "drop_ratios") is not None:
        cfg.drop_ratios = tuple(_floats(get("prune", "drop_ratios")))
        if len(cfg.drop_ratios) != 5:
            raise ConfigError("prune.drop_ratios needs exactly 5 values")
    for stage in STAGES:
        if parser.has_section(stage):
            sec = parser[stage]
            default = cfg.stage(stage)
            hyper = TrainHyper(
                epochs=int(sec.get("epochs", default.hyper.epochs)),
                batch_size=int(sec.get("batch_size", default.hyper.batch_size)),
                lr_encoder=float(sec["lr_encoder"]) if "lr_encoder" in sec else None,
                lr_head=float(sec["lr_head"]) if "lr_head" in sec else None,
            )
            formats = sec.get("formats", default.formats)
            parse_formats(formats)
            cfg.stages[stage] = StageConfig(hyper, formats)
    if parser.has_section("cv"):
        sec = parser["cv"]
        epochs = _ints(sec.get("epochs", "1"))
        lr_heads = _floats(sec["lr_head"]) if "lr_head" in sec else [None]
        lr_encs = _floats(sec["lr_encoder"]) if "lr_encoder" in sec else [None]
        batches = _ints(sec.get("batch_size", "32"))
        cfg.cv_grid = [TrainHyper(e, b, le, lh) for e, lh, le, b in itertools.product(epochs, lr_heads, lr_encs, batches)]
    if get("ensemble", "members") is not None:
        cfg.ensemble_members = _items(get("ensemble", "members"))
    if get("report", "thresholds") is not None:
        cfg.thresholds = _floats(get("report", "thresholds"))
    if get("report", "bins") is not None:
        cfg.bins = int(get("report", "bins"))
    return cfg


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    text = ""
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    parser = _read_parser(text)
    apply_overrides(parser, overrides)
    return build_config(parser)
