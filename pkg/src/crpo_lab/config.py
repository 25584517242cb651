"""Run configuration: a TOML file, validated, with command-line overrides on top."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

# section -> key -> (type, default); a default of REQUIRED must be supplied
REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple[type | tuple[type, ...], Any]]] = {
    "run": {
        "seed": (int, 0),
        "reward_mode": (str, "crpo"),
        "tie_credit": ((int, float), 0.0),
        "max_in_flight": (int, 1),
    },
    "problem": {
        "n_queries": (int, REQUIRED),
        "n_templates": (int, REQUIRED),
        "n_counterparts": (int, 5),
        "seed": (int, 0),
        "temperature": ((int, float), 1.0),
    },
    "optimizer": {
        "group_size": (int, REQUIRED),
        "learning_rate": ((int, float), REQUIRED),
        "steps": (int, REQUIRED),
        "clip_epsilon": ((int, float), 0.2),
        "kl_coeff": ((int, float), 0.01),
        "std_floor": ((int, float), 1e-8),
        "epochs_per_group": (int, 1),
        "max_grad_norm": ((int, float), 1.0),
    },
    "judge": {
        "kind": (str, "sim"),
        "noise_sigma": ((int, float), 0.0),
        "tie_threshold": ((int, float), 0.0),
        "seed": (int, 0),
        "endpoint_url": (str, ""),
        "model_name": (str, ""),
        "prompt_template_id": (str, "pairwise-v1"),
        "max_in_flight": (int, 4),
        "max_attempts": (int, 3),
        "backoff_base_ms": (int, 500),
        "api_key_env": (str, "JUDGE_API_KEY"),
        "cache_path": (str, ""),
    },
}

REQUIRED_SECTIONS = ("problem", "optimizer")


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("config file not found", str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from exc


def resolve(
    raw: Mapping[str, Any],
    overrides: Mapping[str, Any] | None = None,
    required_sections: tuple[str, ...] = REQUIRED_SECTIONS,
) -> dict:
    """Validate ``raw`` against SCHEMA, fill defaults, then apply dotted overrides.

    Overrides (``{"run.seed": 7}``) win over file values. Errors name the
    offending key path.
    """
    raw = copy.deepcopy(dict(raw))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value

    for section in raw:
        if section not in SCHEMA:
            raise ConfigError("unknown section", section)
    resolved: dict[str, dict[str, Any]] = {}
    for section, fields in SCHEMA.items():
        given = raw.get(section)
        if given is None:
            if section in required_sections:
                raise ConfigError("missing required section", section)
            continue
        if not isinstance(given, Mapping):
            raise ConfigError("must be a table", section)
        for key in given:
            if key not in fields:
                raise ConfigError("unknown key", f"{section}.{key}")
        out = {}
        for key, (typ, default) in fields.items():
            path = f"{section}.{key}"
            if key in given:
                value = given[key]
                if isinstance(value, bool) or not isinstance(value, typ):
                    raise ConfigError(f"expected {_type_name(typ)}, got {value!r}", path)
            elif default is REQUIRED:
                raise ConfigError("missing required key", path)
            else:
                value = default
            out[key] = float(value) if typ == (int, float) else value
        resolved[section] = out

    resolved.setdefault("run", {k: d for k, (_, d) in SCHEMA["run"].items()})
    resolved.setdefault("judge", {k: d for k, (_, d) in SCHEMA["judge"].items()})
    if resolved["run"]["reward_mode"] not in ("crpo", "absolute"):
        raise ConfigError("must be 'crpo' or 'absolute'", "run.reward_mode")
    if resolved["run"]["tie_credit"] not in (0.0, 0.5):
        raise ConfigError("must be 0 or 0.5", "run.tie_credit")
    if resolved["judge"]["kind"] not in ("sim", "api"):
        raise ConfigError("must be 'sim' or 'api'", "judge.kind")
    if resolved["judge"]["kind"] == "api":
        for key in ("endpoint_url", "model_name"):
            if not resolved["judge"][key]:
                raise ConfigError("required when judge.kind = 'api'", f"judge.{key}")
    return resolved


def _type_name(typ) -> str:
    if isinstance(typ, tuple):
        return "number"
    return typ.__name__


def config_hash(resolved: Mapping[str, Any]) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
