"""Run configuration: INI file, then ``TAGFORMER_SECTION__KEY`` environment
variables, then command-line overrides. Unknown sections or keys are errors."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass

from . import augment as A
from .dsp import CHUNK_SECONDS
from .errors import ConfigError

ENV_PREFIX = "TAGFORMER_"


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    doc: str


def _augment_keys() -> dict:
    keys = {
        "enabled": Key("all", str, "transforms to use: 'all', 'none', or a comma list"),
        "p_low": Key(0.3, float, "lower bound of the per-transform activation probability"),
        "p_high": Key(0.7, float, "upper bound of the per-transform activation probability"),
    }
    for name, (lo, hi) in A.DEFAULT_RANGES.items():
        keys[f"{name}_p"] = Key("", str, f"fixed activation probability for {name}; empty draws from [p_low, p_high]")
        keys[f"{name}_low"] = Key(float(lo), float, f"lower parameter bound for {name}")
        keys[f"{name}_high"] = Key(float(hi), float, f"upper parameter bound for {name}")
    return keys


SCHEMA = {
    "run": {
        "seed": Key(0, int, "global seed"),
        "workers": Key(0, int, "data-loading worker processes (0 = in-process)"),
    },
    "model": {
        "type": Key("transformer", str, "transformer or resnet"),
        "preset": Key("default", str, "size preset: default, kd, desk, desk-kd (transformer) or default, desk (resnet)"),
        "conv_channels": Key("", str, "front-end conv channels (empty = preset value)"),
        "attn_dim": Key("", str, "attention width (empty = preset value)"),
        "n_layers": Key("", str, "encoder depth (empty = preset value)"),
        "n_heads": Key("", str, "attention heads (empty = preset value)"),
        "dropout": Key("", str, "dropout probability (empty = preset value)"),
        "n_tags": Key("", str, "tag vocabulary size (empty = taken from the manifest)"),
    },
    "train": {
        "lr": Key(1e-4, float, "Adam learning rate"),
        "batch_size": Key(16, int, "examples per step"),
        "max_epochs": Key(200, int, "hard epoch limit"),
        "patience": Key(20, int, "epochs without validation improvement before stopping"),
        "chunk_seconds": Key(CHUNK_SECONDS, float, "training crop length in seconds"),
        "max_seconds": Key(0.0, float, "wall-clock budget in seconds (0 = none)"),
    },
    "student": {
        "mode": Key("ke", str, "ke (student as large as teacher) or kd (smaller student)"),
        "kd_preset": Key("kd", str, "transformer preset used for the student in kd mode"),
        "iterations": Key(1, int, "noisy student rounds; each student becomes the next teacher"),
        "unlabeled_ratio": Key(1.0, float, "unlabeled examples per labeled example in each step"),
    },
    "eval": {
        "chunk_seconds": Key(CHUNK_SECONDS, float, "evaluation chunk length"),
        "split": Key("test", str, "partition to evaluate"),
        "lengths": Key("", str, "comma-separated chunk lengths for the length sweep"),
    },
    "augment": _augment_keys(),
}


class RunConfig(dict):
    """Section -> {key: typed value}."""

    def get_value(self, section: str, key: str):
        return self[section][key]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, values in self.items():
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(section: str, key: str, raw):
    spec = SCHEMA[section][key]
    if isinstance(raw, spec.kind):
        return raw
    try:
        if spec.kind is int:
            return int(str(raw).strip())
        if spec.kind is float:
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {spec.kind.__name__}, got {raw!r}") from None


def _set(cfg: RunConfig, section: str, key: str, raw, origin: str):
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    cfg[section][key] = _coerce(section, key, raw)


def resolve_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    cfg = RunConfig({s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()})
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                _set(cfg, section, key, raw, str(path))
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX):].lower().partition("__")
        if not sep:
            raise ConfigError(f"{name}: expected {ENV_PREFIX}SECTION__KEY")
        _set(cfg, section, key, raw, name)
    for (section, key), raw in (overrides or {}).items():
        if raw is not None:
            _set(cfg, section, key, raw, "command line")
    return cfg


def augment_spec(cfg: RunConfig) -> A.AugmentSpec:
    sec = cfg["augment"]
    enabled = sec["enabled"].strip().lower()
    if enabled == "all":
        names = set(A.ORDER)
    elif enabled in ("none", ""):
        names = set()
    else:
        names = {n.strip() for n in enabled.split(",")}
        unknown = names - set(A.ORDER)
        if unknown:
            raise ConfigError(f"[augment] enabled: unknown transforms {sorted(unknown)}")
    transforms = {}
    for name in A.ORDER:
        p = sec[f"{name}_p"].strip()
        transforms[name] = A.TransformSpec(
            enabled=name in names,
            p=float(p) if p else None,
            low=sec[f"{name}_low"],
            high=sec[f"{name}_high"],
        )
    try:
        return A.AugmentSpec(transforms, (sec["p_low"], sec["p_high"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_overrides(cfg: RunConfig) -> dict:
    out = {}
    for key in ("conv_channels", "attn_dim", "n_layers", "n_heads", "n_tags"):
        if cfg["model"][key] != "":
            out[key] = _int(cfg["model"][key], key)
    if cfg["model"]["dropout"] != "":
        out["dropout"] = float(cfg["model"]["dropout"])
    return out


def _int(raw, key):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[model] {key}: expected an integer, got {raw!r}") from None


def reference() -> str:
    """Plain-text reference of every section and key with defaults."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            lines.append(f"  {key:<18} = {_format(spec.default):<12} {spec.doc}")
        lines.append("")
    return "\n".join(lines)
