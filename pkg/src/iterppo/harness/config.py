"""Experiment configuration: one JSON file with env, policy, loop and A/B sections."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from ..env_synthetic import EnvConfig
from ..iterate import IterationError, LoopConfig
from ..policy import DEFAULT_BLOCKS, FeatureSpec, PolicyParams, init_params

ENV_PREFIX = "IPPO_"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyInit:
    seed: int = 0
    scale: float = 0.5
    blocks: tuple[tuple[str, ...], ...] = DEFAULT_BLOCKS

    def build(self, env: EnvConfig) -> PolicyParams:
        return init_params(FeatureSpec.for_env(env, self.blocks), self.seed, self.scale)


@dataclass(frozen=True)
class AbConfig:
    episodes_per_arm: int = 20_000
    coverage_reps: int = 500
    coverage_episodes: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    policy: PolicyInit
    loop: LoopConfig
    ab: AbConfig
    seed: int
    raw: dict[str, Any] = field(repr=False, compare=False)

    @property
    def canonical_bytes(self) -> bytes:
        return canonical_json(self.raw)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes).hexdigest()


def canonical_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def default_config_text() -> str:
    return resources.files("iterppo").joinpath("configs/toy_shop.json").read_text()


def _set_path(d: dict[str, Any], path: list[str], value: Any) -> None:
    for k in path[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override inside non-section {k!r}")
    d[path[-1]] = value


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """IPPO_LOOP__EPISODES=500 -> {"loop": {"episodes": 500}}; values parse as JSON when possible."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for k, v in sorted(environ.items()):
        if not k.startswith(ENV_PREFIX) or k[len(ENV_PREFIX):] in ("", "RUNS_DIR"):
            continue
        try:
            val = json.loads(v)
        except json.JSONDecodeError:
            val = v
        _set_path(out, k[len(ENV_PREFIX):].lower().split("__"), val)
    return out


def _merge(base: dict[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if raw.get("format_version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {raw.get('format_version')}")
    unknown = set(raw) - {"format_version", "env", "policy", "loop", "ab", "seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "env" not in raw:
        raise ConfigError("config needs an 'env' section")
    try:
        env = EnvConfig.from_dict(raw["env"])
        pol = dict(raw.get("policy", {}))
        if "blocks" in pol:
            pol["blocks"] = tuple(tuple(b) for b in pol["blocks"])
        policy = PolicyInit(**pol)
        loop = LoopConfig.from_dict(raw.get("loop", {}))
        ab = AbConfig(**raw.get("ab", {}))
        seed = int(raw.get("seed", 0))
    except (KeyError, TypeError, ValueError, IterationError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return ExperimentConfig(env, policy, loop, ab, seed, raw)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read the config (the shipped toy-shop file by default), then apply env-var and explicit overrides."""
    try:
        text = default_config_text() if path is None else Path(path).read_text()
        raw = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    raw = _merge(raw, env_overrides(environ))
    if overrides:
        raw = _merge(raw, overrides)
    return parse_config(raw)
