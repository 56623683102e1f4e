"""Run configuration read from a single INI file.

Example (every key optional except ``env.kind``)::

    [run]
    seed = 0                 ; root seed, overridden by --seed
    out = runs/gridworld     ; output directory, overridden by --out

    [env]
    kind = gridworld_two_paths   ; gridworld_two_paths | periodic_chain | feature_split
    max_steps = 200
    ; periodic_chain: period = 3, slip_prob = 0.0, num_cycles = 4
    ; feature_split:  delay = 6

    [train]
    ; any TrainConfig field; defaults are the desk-scale values below
    gamma = 0.99              ; Atari setting 0.99
    learning_rate = 0.001     ; Atari setting 1e-4
    target_update = 200       ; Atari setting 1000 (counted in updates)
    offline_steps = 5000      ; Atari setting 1M
    online_steps = 20000      ; Atari setting 4M

    [trd]
    n = 8
    w = 1

    [explain]
    elements = 0              ; reward-vector elements for saliency
    actions = up, down        ; names or indices; contrast uses the first two
    formats = csv, json, svg
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .envs import ENV_KINDS, MdpSpec, make_env
from .learner import TrainConfig


class ConfigError(ValueError):
    pass


ENV_PARAMS = {
    "gridworld_two_paths": {"max_steps": int},
    "periodic_chain": {"period": int, "slip_prob": float, "num_cycles": int, "max_steps": int},
    "feature_split": {"delay": int, "max_steps": int},
}
RUN_KEYS = {"seed": int, "out": str}
TRD_KEYS = {"n": int, "w": int}
FORMATS = ("csv", "json", "svg")


@dataclass
class ExplainConfig:
    elements: tuple[int, ...] = (0,)
    actions: tuple[int, ...] = ()
    formats: tuple[str, ...] = FORMATS


@dataclass
class RunConfig:
    env_kind: str
    env_params: dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    seed: int = 0
    out: str = "runs/default"

    def make_env(self) -> MdpSpec:
        return make_env(self.env_kind, **self.env_params)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        train = self.train
        if seed is not None:
            train = TrainConfig(**{**_train_kwargs(train), "seed": seed})
        return RunConfig(self.env_kind, dict(self.env_params), train, self.explain,
                         self.seed if seed is None else seed, self.out if out is None else out)

    def to_dict(self) -> dict:
        return {
            "run": {"seed": self.seed, "out": self.out},
            "env": {"kind": self.env_kind, **self.env_params},
            "train": self.train.to_dict(),
            "trd": {"n": self.train.n, "w": self.train.w},
            "explain": {"elements": list(self.explain.elements), "actions": list(self.explain.actions),
                        "formats": list(self.explain.formats)},
        }


def _train_kwargs(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip().lower() for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _train_parsers() -> dict:
    parsers = {}
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in ("n", "w", "seed"):
            continue
        value = getattr(defaults, f.name)
        if isinstance(value, tuple):
            parsers[f.name] = _int_list
        elif isinstance(value, bool):
            parsers[f.name] = _bool
        elif isinstance(value, int):
            parsers[f.name] = int
        else:
            parsers[f.name] = float
    return parsers


def _parse_section(parser, section: str, allowed: dict) -> dict:
    if not parser.has_section(section):
        return {}
    out = {}
    for key, raw in parser.items(section):
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}; allowed: {', '.join(sorted(allowed))}")
        try:
            out[key] = allowed[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), default_section="__none__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"run", "env", "train", "trd", "explain"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]; allowed: {', '.join(sorted(known))}")

    if not parser.has_option("env", "kind"):
        raise ConfigError("missing env.kind")
    kind = parser.get("env", "kind").strip()
    if kind not in ENV_KINDS:
        raise ConfigError(f"env.kind {kind!r} not one of {', '.join(sorted(ENV_KINDS))}")
    env_params = _parse_section(parser, "env", {"kind": str, **ENV_PARAMS[kind]})
    env_params.pop("kind")

    run = _parse_section(parser, "run", RUN_KEYS)
    trd = _parse_section(parser, "trd", TRD_KEYS)
    train = _parse_section(parser, "train", _train_parsers())
    explain = _parse_section(parser, "explain", {"elements": _int_list, "actions": _str_list, "formats": _str_list})
    for fmt in explain.get("formats", ()):
        if fmt not in FORMATS:
            raise ConfigError(f"explain.formats: unsupported format {fmt!r}")
    if "hidden" in train:
        train["hidden"] = tuple(train["hidden"])
    seed = run.get("seed", 0)
    try:
        train_cfg = TrainConfig(**train, **trd, seed=seed)
        spec = make_env(kind, **env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        explain["actions"] = tuple(spec.action_index(a) for a in explain.get("actions", ()))
    except ValueError as exc:
        raise ConfigError(f"explain.actions: {exc}") from None
    exp = ExplainConfig(**explain)
    for k in exp.elements:
        if not 0 <= k <= train_cfg.n:
            raise ConfigError(f"explain.elements: element {k} out of range for n={train_cfg.n}")
    return RunConfig(kind, env_params, train_cfg, exp, seed, run.get("out", f"runs/{kind}"))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
