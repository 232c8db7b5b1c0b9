"""Experiment configuration: INI sections of ``key = value`` lines.

Every knob has a typed default below.  Unknown sections or keys are
rejected, and values are range-checked, with errors naming the offending
``section.key``.
"""
from __future__ import annotations

import configparser
from pathlib import Path

DEFAULTS: dict[str, dict] = {
    "data": {
        "task": "reverse",
        "size": 10000,
        "min_len": 3,
        "max_len": 12,
        "vocab_size": 20,
        "corruption": 0.1,
        "seed": 0,
        "max_vocab": 0,  # 0 keeps every token
    },
    "model": {
        "emb_dim": 32,
        "hidden": 64,
        "att_dim": 64,
        "readout_dim": 64,
        "max_len_train": 20,
        "max_len_decode": 40,
        "seed": 0,
    },
    "mle": {
        "epochs": 12,
        "batch_size": 64,
        "lr": 1.0,
        "rule": "adadelta",
        "clip_norm": 5.0,
        "max_steps": 0,
        "time_budget": 0.0,
    },
    "actor": {
        "hidden": 32,
        "init_scale": 0.001,
        "objective": "bleu",
        "seed": 0,
    },
    "critic": {
        "emb_dim": 32,
        "hidden": 64,
        "att_dim": 64,
        "head_dim": 64,
        "scale": 10.0,
        "use_tokens": True,
        "seed": 0,
    },
    "schedule": {
        "n_c": 10,
        "n_a": 1,
        "s_c": 4,
        "s_a": 4,
        "sigma": 0.1,
        "tau": 0.01,
        "lr_actor": 2e-6,
        "lr_critic": 2e-4,
        "max_cycles": 1000,
        "validation_interval": 10,
        "critic_warmup": 200,
        "patience": 20,
        "val_size": 0,
        "clip_norm": 5.0,
        "time_budget": 0.0,
    },
    "decode": {
        "split": "test",
        "input": "",
        "strategy": "greedy",
        "beam_k": 5,
        "npad_sigma0": 0.5,
        "npad_parallel": 5,
        "influence": True,
    },
    "evaluate": {
        "split": "test",
        "beam_k": 5,
        "resamples": 1000,
    },
    "report": {
        "inputs": "",
    },
    "paths": {
        "corpus": "",
        "nmt": "",
        "actor": "",
        "critic": "",
    },
}

# (min, max) inclusive; None = unbounded
RANGES = {
    "data.size": (3, None),
    "data.min_len": (1, None),
    "data.max_len": (1, None),
    "data.vocab_size": (5, None),
    "data.corruption": (0.0, 1.0),
    "data.max_vocab": (0, None),
    "model.emb_dim": (1, None),
    "model.hidden": (1, None),
    "model.att_dim": (1, None),
    "model.readout_dim": (1, None),
    "model.max_len_train": (1, None),
    "model.max_len_decode": (1, None),
    "mle.epochs": (1, None),
    "mle.batch_size": (1, None),
    "mle.lr": (1e-300, None),
    "mle.clip_norm": (0.0, None),
    "mle.max_steps": (0, None),
    "mle.time_budget": (0.0, None),
    "actor.hidden": (1, None),
    "actor.init_scale": (0.0, None),
    "critic.emb_dim": (1, None),
    "critic.hidden": (1, None),
    "critic.att_dim": (1, None),
    "critic.head_dim": (1, None),
    "critic.scale": (1e-300, None),
    "schedule.n_c": (1, None),
    "schedule.n_a": (1, None),
    "schedule.s_c": (1, None),
    "schedule.s_a": (1, None),
    "schedule.sigma": (0.0, None),
    "schedule.tau": (1e-300, None),
    "schedule.lr_actor": (1e-300, None),
    "schedule.lr_critic": (1e-300, None),
    "schedule.max_cycles": (1, None),
    "schedule.validation_interval": (1, None),
    "schedule.critic_warmup": (0, None),
    "schedule.patience": (0, None),
    "schedule.val_size": (0, None),
    "schedule.clip_norm": (0.0, None),
    "schedule.time_budget": (0.0, None),
    "decode.beam_k": (1, None),
    "decode.npad_sigma0": (0.0, None),
    "decode.npad_parallel": (1, None),
    "evaluate.beam_k": (1, None),
    "evaluate.resamples": (1, None),
}

CHOICES = {
    "data.task": ("reverse", "shift-cipher", "sort"),
    "mle.rule": ("rmsprop", "adadelta"),
    "actor.objective": ("bleu", "neg_ppl"),
    "decode.split": ("train", "valid", "test"),
    "decode.strategy": ("greedy", "beam", "npad"),
    "evaluate.split": ("train", "valid", "test"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class ExperimentConfig:
    """Typed view over the sections in ``DEFAULTS``; access as ``cfg['section']['key']``."""

    def __init__(self, values: dict | None = None, path: Path | None = None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        self.path = path
        for section, kv in (values or {}).items():
            for key, v in kv.items():
                self.set(f"{section}.{key}", v)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, dotted: str, value) -> None:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        key = key.lower()
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r} (in {dotted})")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str):
            value = _coerce(f"{section}.{key}", value, default)
        self.values[section][key] = value

    def validate(self) -> None:
        for dotted, (lo, hi) in RANGES.items():
            s, k = dotted.split(".")
            v = self.values[s][k]
            if (lo is not None and v < lo) or (hi is not None and v > hi):
                bound = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
                raise ConfigError(f"{dotted} = {v} out of range (must be {bound})")
        for dotted, allowed in CHOICES.items():
            s, k = dotted.split(".")
            if self.values[s][k] not in allowed:
                raise ConfigError(f"{dotted} = {self.values[s][k]!r}; expected one of {', '.join(allowed)}")
        if self.values["data"]["min_len"] > self.values["data"]["max_len"]:
            raise ConfigError("data.min_len must not exceed data.max_len")

    def require_paths(self, *keys: str) -> None:
        """Check that each ``paths.<key>`` is set and exists."""
        for k in keys:
            v = self.values["paths"][k]
            if not v:
                raise ConfigError(f"paths.{k} must be set for this command")
            if not Path(v).exists():
                raise ConfigError(f"paths.{k} = {v} does not exist")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for s, kv in self.values.items():
            cp[s] = {k: str(v) for k, v in kv.items()}
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def load_config(path, overrides=()) -> ExperimentConfig:
    """Parse an INI file, apply ``section.key=value`` overrides and validate.

    Relative paths in ``[paths]`` resolve against the config file's
    directory; relative paths given as overrides resolve against the
    working directory.
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = ExperimentConfig(path=path)
    for section in cp.sections():
        for key, raw in cp[section].items():
            cfg.set(f"{section}.{key}", raw)
    _resolve_paths(cfg, path.parent)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    _resolve_paths(cfg, Path.cwd())
    cfg.validate()
    return cfg


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> None:
    for k, v in cfg["paths"].items():
        if v and not Path(v).is_absolute():
            cfg["paths"][k] = str((base / v).resolve())
