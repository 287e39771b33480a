"""Configuration tree: one YAML file with a section per component.

Every field has a default, so an empty file yields the full default
configuration. Loading collects every problem (unknown keys, wrong types,
failed range checks) before raising a single ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .attacker import DqnConfig
from .classifier import ClassifierConfig
from .env import BENIGN_TYPES, EnvConfig, Personality, RewardConfig
from .policies import DEFAULT_PARAMS, PersonalityParams, TargetRule
from .world_model import WorldModelConfig

PRESETS = ("default", "desk", "paper")
SETTINGS = ("no_attacker", "heuristic", "rl", "guessed_rl")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


@dataclass(frozen=True)
class HarnessConfig:
    corpus_episodes: int = 1000
    heldout_episodes: int = 300
    episodes_per_cell: int = 50
    settings: tuple[str, ...] = SETTINGS
    failure_rounds: str = "horizon"  # failures count T rounds; "exclude" drops them from AER

    def __post_init__(self) -> None:
        object.__setattr__(self, "settings", tuple(self.settings))
        for name in ("corpus_episodes", "heldout_episodes", "episodes_per_cell"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        unknown = [s for s in self.settings if s not in SETTINGS]
        if unknown or not self.settings:
            raise ValueError(f"settings must be a non-empty subset of {list(SETTINGS)}, got {list(self.settings)}")
        if self.failure_rounds not in ("horizon", "exclude"):
            raise ValueError("failure_rounds must be 'horizon' or 'exclude'")


def _default_personalities() -> dict[str, PersonalityParams]:
    return {p.label: DEFAULT_PARAMS[p] for p in BENIGN_TYPES}


@dataclass(frozen=True)
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    personalities: dict[str, PersonalityParams] = field(default_factory=_default_personalities)
    reward: RewardConfig = field(default_factory=RewardConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    @property
    def personality_params(self) -> dict[Personality, PersonalityParams]:
        return {Personality.parse(k): v for k, v in self.personalities.items()}


SECTIONS = {"env": EnvConfig, "reward": RewardConfig, "world_model": WorldModelConfig,
            "classifier": ClassifierConfig, "dqn": DqnConfig, "harness": HarnessConfig}


def _coerce(value: Any, default: Any, path: str, problems: list[str]) -> Any:
    """Coerce a YAML scalar to the type of ``default``; records a problem and returns None on failure."""
    def fail(expected: str) -> None:
        problems.append(f"{path}: expected {expected}, got {value!r}")

    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        return fail("a boolean")
    if isinstance(default, int) or (default is None and path.endswith("max_rounds")):
        if value is None and default is None:
            return None
        num = value
        if isinstance(value, str):
            try:
                num = float(value)
            except ValueError:
                return fail("an integer")
        if isinstance(num, bool) or not isinstance(num, (int, float)) or float(num) != int(num):
            return fail("an integer")
        return int(num)
    if isinstance(default, float):
        if isinstance(value, bool):
            return fail("a number")
        try:
            return float(value)
        except (TypeError, ValueError):
            return fail("a number")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        return fail("a string")
    if isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and default:
            items = [_coerce(v, default[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
            return tuple(items)
        if isinstance(value, (list, tuple)):
            return tuple(value)
        return fail("a list")
    return value


def _build_section(cls, doc: Any, path: str, problems: list[str]):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        problems.append(f"{path}: expected a mapping, got {type(doc).__name__}")
        return cls()
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in known:
            problems.append(f"{path}.{key}: unknown key")
    kwargs, before = {}, len(problems)
    for key, value in doc.items():
        if key in known:
            kwargs[key] = _coerce(value, getattr(defaults, key), f"{path}.{key}", problems)
    if len(problems) > before:
        return defaults
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, NotImplementedError) as exc:
        head, _, rest = str(exc).partition(" ")
        if head in known and rest.startswith("must"):
            problems.append(f"{path}.{head}: {rest}")
        else:
            problems.append(f"{path}: {exc}")
        return defaults


def _build_personalities(doc: Any, problems: list[str]) -> dict[str, PersonalityParams]:
    out = _default_personalities()
    if doc is None:
        return out
    if not isinstance(doc, dict):
        problems.append("personalities: expected a mapping")
        return out
    rules = [r.value for r in TargetRule]
    for name, sub in doc.items():
        path = f"personalities.{name}"
        if name not in out:
            problems.append(f"{path}: unknown personality (expected one of {sorted(out)})")
            continue
        if not isinstance(sub, dict):
            problems.append(f"{path}: expected a mapping")
            continue
        base, kwargs, before = out[name], {}, len(problems)
        for key, value in sub.items():
            if key not in {f.name for f in dataclasses.fields(PersonalityParams)}:
                problems.append(f"{path}.{key}: unknown key")
            elif key == "target_rule":
                if value in rules:
                    kwargs[key] = TargetRule(value)
                else:
                    problems.append(f"{path}.target_rule: expected one of {rules}, got {value!r}")
            else:
                kwargs[key] = _coerce(value, getattr(base, key), f"{path}.{key}", problems)
        if len(problems) > before:
            continue
        try:
            out[name] = dataclasses.replace(base, **kwargs)
        except ValueError as exc:
            problems.append(f"{path}: {exc}")
    return out


def config_from_dict(doc: Any) -> Config:
    problems: list[str] = []
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError([f"<root>: expected a mapping, got {type(doc).__name__}"])
    for key in doc:
        if key not in SECTIONS and key != "personalities":
            problems.append(f"{key}: unknown section")
    sections = {name: _build_section(cls, doc.get(name), name, problems) for name, cls in SECTIONS.items()}
    personalities = _build_personalities(doc.get("personalities"), problems)
    if problems:
        raise ConfigError(problems)
    return Config(personalities=personalities, **sections)


def preset_text(name: str) -> str:
    if name == "default":
        return ""
    return resources.files("insider_consensus").joinpath("profiles", f"{name}.profile").read_text()


def load_config(source: str | Path | None = None) -> Config:
    """Load a preset name (``default``, ``desk``, ``paper``) or a YAML file path."""
    if source is None or str(source) in PRESETS:
        text = preset_text(str(source or "default"))
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read config file {path}: {exc.strerror or exc}"]) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from None
    return config_from_dict(doc)


def config_to_dict(config: Config) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        if isinstance(obj, TargetRule):
            return obj.value
        return obj
    return plain(config)


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)


def config_hash(config: Config) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
