"""Run configuration: TOML parsing, defaults and validation."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .rewards import REWARD_NAMES
from .ril import METHODS, TaskRunConfig

SOUP_ALPHA = 0.333
SOUP_BETA = 0.333

# per-reward epoch budgets and per-method step sizes; compress gets the most
# epochs because q80 file size lags the q10 training reward for the first few
TASK_EPOCHS = {"smooth": 6, "pref": 12, "compress": 16}
METHOD_DEFAULTS = {
    "baseline": {"lr": 0.02, "batch": 8},
    "rid": {"lr": 0.02, "batch": 8},
    "rid_fullstep": {"lr": 0.02, "batch": 8},
    "joint": {"lr": 0.02, "batch": 8},
}
DEFAULT_SEQUENCE = ("smooth", "pref", "compress")


def _int(lo=None, hi=None):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected an integer, got {type(v).__name__}", key)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ConfigError(f"{key}: {v} outside [{lo}, {hi}]", key)
        return v
    return check


def _float(lo=None, hi=None, open_lo=False, open_hi=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {type(v).__name__}", key)
        v = float(v)
        bad = not math.isfinite(v)
        if lo is not None:
            bad |= v <= lo if open_lo else v < lo
        if hi is not None:
            bad |= v >= hi if open_hi else v > hi
        if bad:
            raise ConfigError(f"{key}: {v} outside the allowed range", key)
        return v
    return check


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected a boolean", key)
    return v


def _str(key, v):
    if not isinstance(v, str):
        raise ConfigError(f"{key}: expected a string", key)
    return v


def _choice(options):
    def check(key, v):
        if v not in options:
            raise ConfigError(f"{key}: {v!r} is not one of {list(options)}", key)
        return v
    return check


def _reward_map(key, v):
    if not isinstance(v, dict):
        raise ConfigError(f"{key}: expected a table", key)
    out = {}
    for k, x in v.items():
        if k not in REWARD_NAMES:
            raise ConfigError(f"{key}.{k}: unknown reward", f"{key}.{k}")
        out[k] = _float(0.0)(f"{key}.{k}", x)
    return out


SCHEMA = {
    "corpus": {
        "seed": (_int(0), None),  # None: follow the run seed
        "K": (_int(2), 4),
        "styles_per_class": (_int(2), 16),
        "images_per_condition": (_int(1), 64),
        "test_fraction": (_float(0.0, 1.0, True, True), 0.125),
    },
    "diffusion": {
        "ddim_steps": (_int(2), 50),
        "beta_min": (_float(0.0, 1.0, True, True), 0.02),
        "beta_max": (_float(0.0, 1.0, True, True), 0.25),
    },
    "pretrain": {
        "epochs": (_int(1), 100),
        "batch": (_int(1), 128),
        "lr": (_float(0.0, open_lo=True), 2e-3),
        "hidden": (_int(1), 256),
        "n_hidden": (_int(1), 3),
    },
    "rewards": {
        "quality": (_int(1, 100), 10),
        "temperature": (_float(0.0, 1.0, open_lo=True), 1.0),
        "scorer_seed": (_int(0), None),
        "scales": (_reward_map, {"smooth": 1.0, "pref": 1.0, "compress": 5.0}),
        "joint_weights": (_reward_map, {"smooth": 0.01, "pref": 2.0, "compress": 1.0}),
    },
    "ril": {
        "lambda": (_float(0.0), 0.1),
        "lora_rank": (_int(1), 4),
        "ema_momentum": (_float(0.0, 1.0), 0.99),
        "persist_teacher": (_bool, False),
        "method": (_choice(METHODS), "rid"),
    },
    "eval": {
        "samples_per_condition": (_int(1), 16),
        "seed": (_int(0), None),
        "n_reference": (_int(2), 512),
        "quality": (_int(1, 100), 80),
    },
    "soup": {
        "alpha": (_float(0.0, 1.0), SOUP_ALPHA),
        "beta": (_float(0.0, 1.0), SOUP_BETA),
    },
}
TOP_LEVEL = {"name": (_str, "run"), "seed": (_int(0, 2**64 - 1), 0)}
TASK_KEYS = {
    "method": _choice(METHODS),
    "reward": _choice(REWARD_NAMES),
    "epochs": _int(0),
    "lr": _float(0.0, open_lo=True),
    "batch": _int(1),
    "lambda": _float(0.0),
    "ema_momentum": _float(0.0, 1.0),
    "persist_teacher": _bool,
}


@dataclass
class Config:
    name: str
    seed: int
    sections: dict
    tasks: list = field(default_factory=list)
    raw: dict = field(default=None, repr=False, compare=False)

    def __getitem__(self, section):
        return self.sections[section]

    def task_configs(self) -> list:
        out = []
        for t in self.tasks:
            out.append(TaskRunConfig(
                method=t["method"], reward=t.get("reward", "smooth"), epochs=t["epochs"], batch=t["batch"],
                lr=t["lr"], lam=t["lambda"], ema_momentum=t["ema_momentum"],
                joint_weights=self["rewards"]["joint_weights"], persist_teacher=t["persist_teacher"],
            ))
        return out

    def soup_coefficients(self):
        a, b = self["soup"]["alpha"], self["soup"]["beta"]
        return (a, b, 1.0 - a - b)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, **copy.deepcopy(self.sections), "tasks": copy.deepcopy(self.tasks)}

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical JSON form."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def with_seed(self, seed: int) -> "Config":
        raw = copy.deepcopy(self.raw if self.raw is not None else self.to_dict())
        raw["seed"] = _int(0, 2**64 - 1)("seed", seed)
        return validate(raw)


def _section(name, raw):
    schema = SCHEMA[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a table", name)
    unknown = set(raw) - set(schema)
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{name}.{k}: unknown key", f"{name}.{k}")
    out = {}
    for key, (check, default) in schema.items():
        if key in raw:
            out[key] = check(f"{name}.{key}", raw[key])
        else:
            out[key] = copy.deepcopy(default)
    return out


def _task(i, raw, ril):
    path = f"tasks[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a table", path)
    unknown = set(raw) - set(TASK_KEYS)
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{path}.{k}: unknown key", f"{path}.{k}")
    t = {k: TASK_KEYS[k](f"{path}.{k}", v) for k, v in raw.items()}
    t.setdefault("method", ril["method"])
    if t["method"] != "joint" and "reward" not in t:
        raise ConfigError(f"{path}.reward: required for method {t['method']}", f"{path}.reward")
    t.setdefault("reward", "smooth")  # unused by joint tasks
    for k, v in METHOD_DEFAULTS[t["method"]].items():
        t.setdefault(k, v)
    t.setdefault("epochs", max(TASK_EPOCHS.values()) if t["method"] == "joint" else TASK_EPOCHS[t["reward"]])
    t.setdefault("lambda", ril["lambda"])
    t.setdefault("ema_momentum", ril["ema_momentum"])
    t.setdefault("persist_teacher", ril["persist_teacher"])
    return t


def validate(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table", "")
    allowed = set(SCHEMA) | set(TOP_LEVEL) | {"tasks"}
    unknown = set(raw) - allowed
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{k}: unknown key", k)
    top = {k: (check(k, raw[k]) if k in raw else default) for k, (check, default) in TOP_LEVEL.items()}
    sections = {name: _section(name, raw.get(name, {})) for name in SCHEMA}
    d = sections["diffusion"]
    if d["beta_min"] >= d["beta_max"]:
        raise ConfigError("diffusion.beta_min must be below diffusion.beta_max", "diffusion.beta_min")
    s = sections["soup"]
    if s["alpha"] + s["beta"] > 1.0 + 1e-9:
        raise ConfigError("soup.alpha + soup.beta must not exceed 1", "soup.beta")
    for name in ("corpus", "eval"):
        if sections[name]["seed"] is None:
            sections[name]["seed"] = top["seed"]
    if sections["rewards"]["scorer_seed"] is None:
        sections["rewards"]["scorer_seed"] = top["seed"]
    if "tasks" in raw:
        if not isinstance(raw["tasks"], list):
            raise ConfigError("tasks: expected an array of tables", "tasks")
        tasks_raw = raw["tasks"]
    else:
        tasks_raw = [{"reward": r} for r in DEFAULT_SEQUENCE]
    tasks = [_task(i, t, sections["ril"]) for i, t in enumerate(tasks_raw)]
    return Config(name=top["name"], seed=top["seed"], sections=sections, tasks=tasks, raw=copy.deepcopy(raw))


def parse_config_text(text: str) -> Config:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}", "") from e
    return validate(raw)


def parse_config(path) -> Config:
    """Read and validate a TOML config file. ``OSError`` propagates for missing files."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_config_text(data.decode("utf-8"))


def default_config() -> Config:
    return validate({})
