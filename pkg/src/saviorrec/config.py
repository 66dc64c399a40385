"""Pipeline configuration: one YAML file, deep-merged over built-in defaults."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .io import config_hash
from .ranking.model import RankerConfig
from .rqvae import RqVaeConfig
from .saviorenc import EncoderConfig
from .synthgen import SynthConfig

SECTIONS = ("synthgen", "encoder", "rqvae", "ranker", "eval", "sweep")


@dataclass
class EvalSettings:
    hitrate_k: int = 30
    ablation_tags: tuple = ("full", "no_mba", "no_raw_mm", "no_bidir", "no_mm", "no_id", "no_stats")


@dataclass
class PipelineConfig:
    seed: int = 0
    workdir: str = "runs/default"
    synthgen: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rqvae: RqVaeConfig = field(default_factory=RqVaeConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    sweep_dims: tuple = (8, 16, 32, 64)

    def validate(self) -> None:
        self.synthgen.validate()
        self.encoder.validate()
        self.rqvae.validate()
        self.ranker.validate()
        if self.ranker.ablation == "no_raw_mm" and self.ranker.d_mba != self.rqvae.code_dim:
            raise ConfigError(f"no_raw_mm needs ranker.d_mba == rqvae.code_dim ({self.rqvae.code_dim})")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workdir": self.workdir,
            "synthgen": self.synthgen.to_dict(),
            "encoder": self.encoder.to_dict(),
            "rqvae": self.rqvae.to_dict(),
            "ranker": self.ranker.to_dict(),
            "eval": {"hitrate_k": self.eval.hitrate_k, "ablation_tags": list(self.eval.ablation_tags)},
            "sweep": {"dims": list(self.sweep_dims)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {"seed", "workdir", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        ev = dict(d.get("eval", {}))
        bad = set(ev) - {"hitrate_k", "ablation_tags"}
        if bad:
            raise ConfigError(f"unknown eval config fields: {sorted(bad)}")
        cfg = cls(
            seed=int(d.get("seed", 0)),
            workdir=str(d.get("workdir", "runs/default")),
            synthgen=SynthConfig.from_dict(d.get("synthgen", {})),
            encoder=EncoderConfig.from_dict(d.get("encoder", {})),
            rqvae=RqVaeConfig.from_dict(d.get("rqvae", {})),
            ranker=RankerConfig.from_dict(d.get("ranker", {})),
            eval=EvalSettings(int(ev.get("hitrate_k", 30)),
                              tuple(ev.get("ablation_tags", EvalSettings.ablation_tags))),
            sweep_dims=tuple(d.get("sweep", {}).get("dims", (8, 16, 32, 64))),
        )
        cfg.validate()
        return cfg

    def section_hash(self, *sections: str) -> str:
        full = self.to_dict()
        return config_hash({"seed": self.seed, **{s: full[s] for s in sections}})

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workdir")
        return config_hash(d)

    def with_overrides(self, seed: int | None = None, ablation: str | None = None,
                       workdir: str | None = None) -> "PipelineConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if ablation is not None:
            d["ranker"]["ablation"] = ablation
        if workdir is not None:
            d["workdir"] = workdir
        return PipelineConfig.from_dict(d)


def deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def bundled_config_path(name: str = "default.yaml") -> Path:
    return Path(str(resources.files("saviorrec") / "configs" / name))


def load_config(path=None) -> PipelineConfig:
    """Read a YAML config; keys it omits keep their built-in defaults.

    A top-level ``extends: other.yaml`` (relative to the file) is merged first.
    """
    if path is None:
        return PipelineConfig()
    data = _read_yaml(Path(path))
    return PipelineConfig.from_dict(deep_merge(PipelineConfig().to_dict(), data))


def _read_yaml(path: Path, depth: int = 0) -> dict:
    if depth > 8:
        raise ConfigError(f"config 'extends' chain too deep at {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    parent = data.pop("extends", None)
    if parent is not None:
        data = deep_merge(_read_yaml(path.parent / parent, depth + 1), data)
    return data
