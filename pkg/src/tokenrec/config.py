"""Flat key=value run configuration with strict per-command schemas.

A config file holds one `key = value` pair per line; blank lines and lines
starting with # are ignored. Every command accepts only its own keys, all
optional, with the defaults below; an unknown key or an unparsable value is
a config error (exit code 2), never a warning.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

from .numeric import ConfigError


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    t = text.strip()
    if not t:
        return ()
    return tuple(int(x) for x in t.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    t = text.strip()
    if not t:
        return ()
    return tuple(float(x) for x in t.split(","))


def _parse_str_list(text: str) -> tuple[str, ...]:
    t = text.strip()
    if not t:
        return ()
    return tuple(x.strip() for x in t.split(","))


def _parse_opt_float(text: str) -> float | None:
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    return float(t)


def _parse_noise(text: str) -> float:
    t = text.strip().lower()
    if t == "inf":
        return float("inf")
    return float(t)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable
    default: object
    help: str


def _k(name, parse, default, help_text) -> tuple[str, Key]:
    return name, Key(name, parse, default, help_text)


_SYNTH_KEYS = dict([
    _k("seed", int, 0, "corpus seed"),
    _k("users", int, 1000, "number of users"),
    _k("field_cards", _parse_int_list, (4, 4, 8, 16, 32, 64), "field cardinalities"),
    _k("items", int, 256, "item vocabulary size"),
    _k("actions", int, 4, "action vocabulary size"),
    _k("history_len", int, 64, "events per user history"),
    _k("num_targets", int, 1, "target impressions per user"),
    _k("num_interests", int, 4, "latent interest clusters"),
    _k("zipf_exponent", float, 1.1, "popularity skew"),
    _k("markov_mix", float, 0.8, "probability of staying on the interest cluster"),
    _k("drift_rate", float, 0.05, "per-event interest drift probability"),
    _k("field_match", float, 0.85, "P(group field = latent interest)"),
    _k("label_gain", float, 2.0, "preferred-action logit gain"),
    _k("noise", _parse_noise, 1.0, "label temperature; inf = uniform labels"),
    _k("label_mode", str, "joint", "joint | static_only"),
])

_MODEL_KEYS = dict([
    _k("model_size", str, "", "named size T|S|M|L; empty keeps dim/heads"),
    _k("dim", int, 64, "model width"),
    _k("heads", int, 4, "attention heads"),
    _k("schedule", str, "2F2S", "mask schedule preset: 4F|2F2S|2S2F|4S"),
    _k("windows", _parse_int_list, (), "window widths; empty = preset default"),
    _k("discard_static", _parse_bool, True, "hide field columns on windowed layers"),
    _k("use_gate", _parse_bool, True, "non-linear residual gate on attention"),
    _k("gate_from_normalized", _parse_bool, False, "gate reads normalized input"),
    _k("supervision", str, "user_centric", "user_centric | new_impression"),
    _k("rope_base", float, 10000.0, "rotary frequency base"),
    _k("ffn_mult", int, 2, "feed-forward width multiplier"),
])

_TRAIN_KEYS = dict([
    _k("seed", int, 0, "training seed"),
    _k("steps", int, 200, "total optimizer steps"),
    _k("batch_size", int, 32, "streams per batch"),
    _k("lr", float, 1e-3, "learning rate"),
    _k("beta1", float, 0.9, "first-moment decay"),
    _k("beta2", float, 0.999, "second-moment decay"),
    _k("eps", float, 1e-8, "adaptive denominator floor"),
    _k("weight_decay", float, 0.01, "decoupled weight decay"),
    _k("clip_norm", _parse_opt_float, None, "global gradient-norm clip; empty = off"),
    _k("eval_every", int, 0, "evaluation cadence in steps; 0 = end only"),
    _k("checkpoint_every", int, 0, "checkpoint cadence in steps; 0 = end only"),
    _k("split", _parse_float_list, (0.7, 0.1, 0.2), "train/valid/test fractions"),
    _k("data", str, "", "synth output directory holding records + manifest"),
])

SCHEMAS: dict[str, dict[str, Key]] = {
    "synth": dict(_SYNTH_KEYS),
    "train": {**_MODEL_KEYS, **_TRAIN_KEYS},
    "ablate": {
        k: v for k, v in {
            **_SYNTH_KEYS, **_TRAIN_KEYS, **dict([
                _k("dim", int, 64, "model width"),
                _k("heads", int, 4, "attention heads"),
                _k("variants", _parse_str_list,
                   ("vanilla", "gate", "windows", "full", "sequence_only",
                    "windows_first", "all_windows"),
                   "ablation arms to run"),
                _k("train_seeds", _parse_int_list, (0, 1, 2), "training seeds per arm"),
            ])
        }.items() if k != "data"
    },
    "diagnose": dict([
        _k("seed", int, 0, "clustering seed"),
        _k("data", str, "", "synth output directory"),
        _k("checkpoint", str, "", "checkpoint file to diagnose"),
        _k("split", _parse_float_list, (0.7, 0.1, 0.2), "train/valid/test fractions"),
        _k("token_filter", str, "item", "item | target | supervised | all"),
        _k("mi_clusters", _parse_int_list, (4, 8, 16, 32, 48, 64, 96), "cluster counts"),
        _k("include_ksg", _parse_bool, False, "add the neighbor-count estimate"),
        _k("max_streams", int, 64, "held-out streams to trace"),
        _k("eval_batch", int, 32, "streams per traced batch"),
    ]),
    "masks": dict([
        _k("seq_len", int, 32, "mask side length"),
        _k("schedule", str, "2F2S", "mask schedule preset"),
        _k("windows", _parse_int_list, (), "window widths; empty = preset default"),
        _k("static_prefix", int, 0, "field-token count for discarding"),
        _k("discard_static", _parse_bool, True, "hide field columns on windowed layers"),
    ]),
    "flops": dict([
        _k("seq_len", int, 137, "tokens per stream"),
        _k("dim", int, 64, "model width"),
        _k("schedule", str, "2F2S", "mask schedule preset"),
        _k("windows", _parse_int_list, (), "window widths; empty = preset default"),
        _k("use_gate", _parse_bool, True, "include the gate projection"),
        _k("ffn_mult", int, 2, "feed-forward width multiplier"),
        _k("serving_batch", int, 0, "candidate batches; 0 skips the serving report"),
        _k("user_len", int, 256, "user prefix length"),
        _k("suffix_len", int, 16, "per-candidate suffix length"),
        _k("state_len", int, 128, "compressed user state length"),
    ]),
    "gradcheck": dict([
        _k("seed", int, 0, "parameter/stream seed"),
        _k("fd_step", float, 1e-5, "central-difference step"),
        _k("tolerance", float, 1e-4, "max allowed relative error"),
    ]),
}

COMMANDS = tuple(SCHEMAS)


def parse_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, value = text.partition("=")
            key = key.strip()
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


def resolve(command: str, raw: dict[str, str]) -> dict:
    """Apply a command's schema: reject unknown keys, parse, fill defaults."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    out: dict = {}
    for name, key in schema.items():
        if name in raw:
            try:
                out[name] = key.parse(raw[name])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {name!r}: {raw[name]!r} ({exc})") from exc
        else:
            out[name] = key.default
    return out


def snapshot(command: str, resolved: dict, version: str) -> str:
    """Canonical text of a resolved config, embedded in every output dir."""
    lines = [f"# tokenrec {version}", f"command = {command}"]
    for name in sorted(resolved):
        value = resolved[name]
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif value is None:
            text = "none"
        else:
            text = str(value)
        lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(snapshot_text: str) -> str:
    return hashlib.sha256(snapshot_text.encode("utf-8")).hexdigest()
