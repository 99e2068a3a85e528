"""Run configuration: nested dataclasses, TOML/JSON loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .encoding import EncodingParams
from .losses import AwingParams, HybridWeights
from .net import ConfigError, NetworkConfig


@dataclass(frozen=True)
class UEConfig:
    tau: float = 0.3
    eps: float = 1e-6
    n_samples: int = 32

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError(f"ue.tau must lie in (0, 1), got {self.tau}")
        if self.eps <= 0 or self.n_samples < 2:
            raise ConfigError("ue.eps must be > 0 and ue.n_samples >= 2")


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    noise_max: float = 0.05  # per-image sigma ~ U[0, noise_max]


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    awing: AwingParams = field(default_factory=AwingParams)
    weights: HybridWeights = field(default_factory=HybridWeights)
    encoding: EncodingParams = field(default_factory=EncodingParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ue: UEConfig = field(default_factory=UEConfig)
    heatmap_loss: str = "awing"
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    max_train: int = 0  # 0 = use the whole training split

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.heatmap_loss not in ("awing", "mse"):
            raise ConfigError(f"heatmap_loss must be 'awing' or 'mse', got {self.heatmap_loss!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.encoding.stride != self.network.stride:
            raise ConfigError(f"encoding stride {self.encoding.stride} != network stride {self.network.stride}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def replace(self, **overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


_SECTIONS = {"network": NetworkConfig, "awing": AwingParams, "weights": HybridWeights,
             "encoding": EncodingParams, "augment": AugmentConfig, "ue": UEConfig}


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    kwargs = {}
    try:
        for name, cls in _SECTIONS.items():
            if name in d:
                section = dict(d.pop(name))
                if name == "network" and "widths" in section:
                    section["widths"] = tuple(section["widths"])
                kwargs[name] = cls(**section)
        kwargs.update(d)
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy of ``cfg`` with dotted keys (``network.srf_enabled``) replaced."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _parse_value(value)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(d)


def load_config(path: Path | None, overrides: dict | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        try:
            d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = from_dict(d)
    return apply_overrides(cfg, overrides or {})


def dump_toml(cfg: RunConfig) -> str:
    """Flat TOML rendering of a config (sections for nested dataclasses)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return json.dumps(v)
        return repr(v)

    d = cfg.to_dict()
    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {fmt(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"
