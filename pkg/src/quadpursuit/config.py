"""Run configuration: YAML file -> typed dataclasses, with CLI overrides.

A config file has optional sections ``arena``, ``quad``, ``net``,
``rewards``, ``guidance`` and ``ppo`` plus top-level ``seed`` and
``output_dir``.  Missing keys keep their defaults; unknown keys are errors.
See ``default_config.yaml`` for the annotated full set.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .arena import ArenaConfig, EnvConfig, NetConfig, RewardCoefficients, arena_preset
from .dynamics import QuadParams
from .guidance import ApfGains, GuidanceConfig, Se3Gains
from .ppo import PpoConfig

OUTPUT_ENV_VAR = "QUADPURSUIT_OUT"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arena_name: str = "small"
    arena: ArenaConfig = field(default_factory=lambda: arena_preset("small"))
    quad: QuadParams = field(default_factory=QuadParams)
    net: NetConfig = field(default_factory=NetConfig)
    rewards: RewardCoefficients = field(default_factory=RewardCoefficients)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    seed: int = 0
    output_dir: str = "runs"

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(arena=self.arena, net=self.net, quad=self.quad, rewards=self.rewards)

    def to_dict(self) -> dict:
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, (tuple, list)):
                return [plain(v) for v in x]
            if hasattr(x, "item"):
                return x.item()
            return x

        arena = plain(self.arena)
        arena["preset"] = self.arena_name
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "arena": arena,
            "quad": plain(self.quad),
            "net": plain(self.net),
            "rewards": plain(self.rewards),
            "guidance": plain(self.guidance),
            "ppo": plain(self.ppo),
        }


def _build(cls, values: dict | None, base=None, section: str = ""):
    values = dict(values or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, f in names.items():
        if name not in values:
            continue
        v = values[name]
        current = getattr(base, name) if base is not None else None
        if dataclasses.is_dataclass(current) and isinstance(v, dict):
            v = _build(type(current), v, current, f"{section}.{name}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[name] = v
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    known = {"seed", "output_dir", "arena", "quad", "net", "rewards", "guidance", "ppo"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    arena_values = dict(data.get("arena") or {})
    preset = arena_values.pop("preset", "small")
    try:
        base_arena = arena_preset(preset) if preset != "custom" else ArenaConfig()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(
        arena_name=preset,
        arena=_build(ArenaConfig, arena_values, base_arena, "arena"),
        quad=_build(QuadParams, data.get("quad"), QuadParams(), "quad"),
        net=_build(NetConfig, data.get("net"), NetConfig(), "net"),
        rewards=_build(RewardCoefficients, data.get("rewards"), RewardCoefficients(), "rewards"),
        guidance=_build(GuidanceConfig, data.get("guidance"), GuidanceConfig(), "guidance"),
        ppo=_build(PpoConfig, data.get("ppo"), PpoConfig(), "ppo"),
        seed=int(data.get("seed", 0)),
        output_dir=str(data.get("output_dir", default_output_root())),
    )
    return cfg


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ENV_VAR, "runs")


def load_config(path=None) -> RunConfig:
    """Read a YAML config; ``None`` gives the built-in defaults."""
    if path is None:
        return from_dict({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def with_arena(cfg: RunConfig, preset: str) -> RunConfig:
    return dataclasses.replace(cfg, arena_name=preset, arena=arena_preset(preset))


def write_resolved(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write("# resolved configuration; rerun with --config <this file>\n")
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def default_config_text() -> str:
    return resources.files("quadpursuit").joinpath("default_config.yaml").read_text()
