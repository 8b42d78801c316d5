"""Run configuration: one INI file with a section per stage.

Every key has a desk default; ``--paper`` swaps in the full-scale
hyperparameters. Unknown keys and bad values raise :class:`ConfigError`
naming the offending ``section.key``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dcn import DcnConfig
from .seq_encoder import SeqModelConfig, SeqTrainConfig
from .synth import SynthConfig
from .twhin import TwhinConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    workdir: str = "work"
    seed: int = 0
    threads: int = 1


@dataclass
class DataSection:
    events: str = "events.jsonl"
    format: str = "jsonl"
    strict: bool = False


@dataclass
class SplitSection:
    target_days: int = 28
    dcn_target_days: int = 14
    target_end: int = 0  # 0 -> end of the last event's day


@dataclass
class FeatureSection:
    anchor_mode: str = "user_last"
    kmeans_seed: int = 0


@dataclass
class ProbeSection:
    epochs: int = 200
    lr: float = 0.01
    train_frac: float = 0.8
    n_seeds: int = 5
    tasks: tuple = ("churn", "category", "sku")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSection = field(default_factory=SplitSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    seq: SeqModelConfig = field(default_factory=SeqModelConfig)
    seq_train: SeqTrainConfig = field(default_factory=SeqTrainConfig)
    twhin: TwhinConfig = field(default_factory=TwhinConfig)
    dcn: DcnConfig = field(default_factory=DcnConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_dict(self) -> dict:
        return {name: _section_dict(sec) for name, sec in self.sections().items()}

    def config_hash(self) -> str:
        """Hash of everything that can change an artifact (not paths or thread count)."""
        d = self.to_dict()
        d["run"] = {"seed": d["run"]["seed"]}
        d["data"].pop("events")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def workdir(self) -> Path:
        return Path(self.run.workdir)


def _section_dict(sec) -> dict:
    out = {}
    for f in dataclasses.fields(sec):
        v = getattr(sec, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def paper_preset() -> RunConfig:
    cfg = RunConfig()
    cfg.seq = SeqModelConfig.paper()
    cfg.seq_train = SeqTrainConfig.paper()
    cfg.twhin = TwhinConfig.paper()
    cfg.dcn = DcnConfig.paper()
    return cfg


def _convert(raw: str, default, path: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        if isinstance(default, dict):
            out = {}
            for part in raw.split(","):
                k, v = part.split(":")
                out[k.strip()] = float(v)
            return out
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{path}: expected {kind}, got {raw!r}") from None


def _check_positive(cfg: RunConfig) -> None:
    positive = {
        "run": ("threads",), "split": ("target_days", "dcn_target_days"),
        "seq_train": ("steps", "batch_size", "warmup_steps"), "probe": ("epochs", "n_seeds"),
        "synth": ("n_users", "n_skus", "n_categories", "n_urls", "horizon_days"),
        "seq": ("max_len", "hidden_dim", "num_layers", "embedding_dim", "muve_vocab"),
        "twhin": ("dim", "steps", "batch_size", "top_k_items"),
        "dcn": ("steps", "batch_size", "out_dim", "top_k_skus"),
    }
    for sec, keys in positive.items():
        for k in keys:
            if getattr(getattr(cfg, sec), k) <= 0:
                raise ConfigError(f"{sec}.{k}: must be positive")
    if cfg.split.dcn_target_days >= cfg.synth.horizon_days - cfg.split.target_days:
        raise ConfigError("split.dcn_target_days: leaves no DCN input period")
    if cfg.data.format not in ("jsonl", "csv"):
        raise ConfigError("data.format: must be 'jsonl' or 'csv'")
    if cfg.features.anchor_mode not in ("user_last", "period_end"):
        raise ConfigError("features.anchor_mode: must be 'user_last' or 'period_end'")
    if not 0 < cfg.probe.train_frac < 1:
        raise ConfigError("probe.train_frac: must lie in (0, 1)")
    bad = set(cfg.probe.tasks) - {"churn", "category", "sku"}
    if bad:
        raise ConfigError(f"probe.tasks: unknown tasks {sorted(bad)}")


def load_config(path=None, scale: str = "desk", text: str | None = None) -> RunConfig:
    """Read an INI file (or ``text``) on top of the chosen preset."""
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale preset {scale!r}")
    base = paper_preset() if scale == "paper" else RunConfig()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser.read(p)
    if text is not None:
        parser.read_string(text)
    sections = base.sections()
    updated = {}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{name}: unknown section")
        sec = sections[name]
        known = {f.name: f for f in dataclasses.fields(sec)}
        changes = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
            changes[key] = _convert(raw, getattr(sec, key), f"{name}.{key}")
        if name == "seq" and "hidden_dim" in changes and "num_heads" not in changes:
            changes["num_heads"] = 0  # re-derive from the new width
        try:
            updated[name] = dataclasses.replace(sec, **changes)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    cfg = dataclasses.replace(base, **updated)
    _check_positive(cfg)
    return cfg


def render_config(cfg: RunConfig) -> str:
    lines = []
    for name, sec in cfg.sections().items():
        lines.append(f"[{name}]")
        for k, v in _section_dict(sec).items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, dict):
                v = ",".join(f"{a}:{b}" for a, b in v.items())
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
