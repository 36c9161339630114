"""Run configuration from a flat ``key=value`` file plus environment overrides.

Keys are ``<section>.<field>`` with sections ``env`` (:class:`EpisodeConfig`),
``geometry`` (:class:`VehicleGeometry`), ``ppo`` (:class:`PpoConfig`),
``obs`` (:class:`ObsSpec`) and ``arch`` (:class:`PolicyArch`). Tuples are
comma-separated. ``#`` starts a comment.

Environment variables ``ZIPMERGE_<SECTION>_<FIELD>`` (upper case) override
the file, e.g. ``ZIPMERGE_PPO_LR=0.001``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import VehicleGeometry
from .observation import ObsSpec
from .policy import PolicyArch
from .ppo import PpoConfig
from .sim_env import EpisodeConfig

ENV_PREFIX = "ZIPMERGE_"
SECTIONS = {"env": EpisodeConfig, "geometry": VehicleGeometry, "ppo": PpoConfig,
            "obs": ObsSpec, "arch": PolicyArch}


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    env: EpisodeConfig = field(default_factory=EpisodeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    obs: ObsSpec = field(default_factory=ObsSpec)
    arch: PolicyArch = field(default_factory=PolicyArch)


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in (p.strip() for p in text.split(",")) if t]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
        if isinstance(default, str):
            return text
    except ValueError as exc:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc
    raise ConfigFileError(f"{key}: field cannot be set from text")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, fname = rest.partition("_")
        if section in SECTIONS and fname:
            out[f"{section}.{fname}"] = value
    return out


def build_config(values: dict[str, str]) -> RunConfig:
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    defaults = {s: cls() for s, cls in SECTIONS.items()}
    for key, text in values.items():
        section, _, fname = key.partition(".")
        if section not in SECTIONS:
            raise ConfigFileError(f"unknown section in key {key!r}")
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if fname not in names:
            raise ConfigFileError(f"unknown key {key!r}")
        per_section[section][fname] = _coerce(getattr(defaults[section], fname), text, key)
    try:
        geometry = VehicleGeometry(**per_section["geometry"])
        env = EpisodeConfig(**per_section["env"], geometry=geometry)
        cfg = RunConfig(env=env, ppo=PpoConfig(**per_section["ppo"]),
                        obs=ObsSpec(**per_section["obs"]), arch=PolicyArch(**per_section["arch"]))
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc
    if cfg.arch.vector_dim != cfg.obs.vector_dim or cfg.arch.raster_size != cfg.obs.size:
        raise ConfigFileError(f"network inputs ({cfg.arch.raster_size}px, {cfg.arch.vector_dim} features) "
                              f"do not match observations ({cfg.obs.size}px, {cfg.obs.vector_dim} features)")
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then environment overrides."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(env_overrides(environ))
    return build_config(values)
