"""Experiment configuration: one YAML document with five sections.

``environment``, ``model`` (cwm / inpainter / heads), ``training``
(collection), ``planner`` and ``evaluation``.  Missing keys take the
defaults below; ``key=value`` overrides use dotted paths such as
``planner.P=2`` or ``model.cwm.stage1_steps=500``.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import gridworld as gw
from .cwm import CWMConfig
from .perception import InpainterConfig
from .planner import HeadConfig, PlannerConfig

CONFIG_DIR_ENV = "COMBO_CONFIG_DIR"


@dataclass
class CollectConfig:
    n_episodes: int = 2000
    epsilon: float = 0.1
    kinds: tuple = ()               # empty: the variant's two cooperator kinds
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0


@dataclass
class EvalConfig:
    n_episodes: int = 20
    horizon: int = 30
    kinds: tuple = ()
    seed: int = 1000


@dataclass
class ExperimentConfig:
    environment: gw.EpisodeConfig = field(default_factory=gw.EpisodeConfig)
    cwm: CWMConfig = field(default_factory=CWMConfig)
    inpainter: InpainterConfig = field(default_factory=InpainterConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    training: CollectConfig = field(default_factory=CollectConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return {
            "environment": self.environment.to_dict(),
            "model": {"cwm": self.cwm.to_dict(), "inpainter": self.inpainter.to_dict(),
                      "heads": self.heads.to_dict()},
            "training": _plain(asdict(self.training)),
            "planner": self.planner.to_dict(),
            "evaluation": _plain(asdict(self.evaluation)),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = d or {}
        unknown = set(d) - {"environment", "model", "training", "planner", "evaluation"}
        if unknown:
            raise gw.ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = d.get("model", {}) or {}
        try:
            return cls._build_sections(d, model)
        except gw.ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise gw.ConfigError(str(err)) from err

    @classmethod
    def _build_sections(cls, d: dict, model: dict) -> "ExperimentConfig":
        return cls(
            environment=gw.EpisodeConfig.from_dict({**gw.EpisodeConfig().to_dict(),
                                                    **(d.get("environment") or {})}),
            cwm=CWMConfig.from_dict({**CWMConfig().to_dict(), **(model.get("cwm") or {})}),
            inpainter=InpainterConfig.from_dict(model.get("inpainter") or {}),
            heads=HeadConfig.from_dict(model.get("heads") or {}),
            training=_build(CollectConfig, d.get("training")),
            planner=PlannerConfig.from_dict(d.get("planner") or {}),
            evaluation=_build(EvalConfig, d.get("evaluation")),
        )


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, d: dict | None):
    d = dict(d or {})
    bad = set(d) - set(cls.__dataclass_fields__)
    if bad:
        raise gw.ConfigError(f"unknown keys for {cls.__name__}: {sorted(bad)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def _coerce(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides: list) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config mapping (values parsed as YAML)."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise gw.ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] in ("cwm", "inpainter", "heads"):
            parts = ["model"] + parts
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise gw.ConfigError(f"cannot override inside non-mapping key {key!r}")
        node[parts[-1]] = _coerce(value)
    return out


def resolve_path(path) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(CONFIG_DIR_ENV):
        alt = Path(os.environ[CONFIG_DIR_ENV]) / p
        if alt.exists():
            return alt
    return p


def load_config(path=None, overrides: list = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = resolve_path(path)
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise gw.ConfigError(f"{p} does not hold a mapping")
    return ExperimentConfig.from_dict(apply_overrides(raw, list(overrides)))
