"""Declarative run configuration: INI-style text with typed sections.

Unknown sections or keys are rejected. Every run writes its fully
resolved configuration (canonical key order) next to its outputs, and the
sha256 digest of that text ties checkpoints to the configuration that
produced them.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .codec import DistanceCodec
from .errors import ConfigError

# section -> key -> (type, default); bool values serialize as true/false
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 1234),
        "out_dir": (str, "runs/default"),
    },
    "dataset": {
        "kind": (str, "synthetic"),  # synthetic | kitti
        "train_dir": (str, ""),
        "val_dir": (str, ""),
        "kitti_root": (str, ""),
        "split": (str, "paper-big"),
        "window": (int, 10),
        "stride": (int, 1),
    },
    "codec": {
        "k": (int, 155),
        "d_max": (float, 15.5),
        "threshold": (float, 0.5),
    },
    "model": {
        "resolution": (str, "768x256"),
        "encoder": (str, "flownetc"),  # flownetc | flownets
        "rnn_cell": (str, "bilstm"),  # bilstm | lstm
        "rnn_hidden": (int, 800),
        "head": (str, "ordinal"),  # ordinal | regression
        "dropout": (float, 0.3),
        "dropout_rnn_input": (bool, False),
        "corr_max_disp": (int, 20),
        "corr_stride": (int, 2),
        "channel_scale": (float, 1.0),
        "small_kernels": (bool, False),
        "freeze": (str, ""),
        "dtype": (str, "float32"),
        "leaky_slope": (float, 0.1),
    },
    "loss": {
        "kind": (str, "focal"),  # focal | bce | mse_regression
        "gamma": (float, 2.0),
        "weight_low": (float, 0.25),
        "weight_high": (float, 0.75),
        "epsilon": (float, 1e-7),
        "class_balance": (bool, True),
    },
    "optimizer": {
        "lr": (float, 0.0001),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.001),
        "decoupled_weight_decay": (bool, False),
        "clip_limit": (float, 1.0),
        "clip_mode": (str, "element"),  # element | norm
    },
    "train": {
        "epochs": (int, 200),
        "batch_size": (int, 512),
        "micro_batch": (int, 8),
        "eval_interval": (int, 1),
        "checkpoint_interval": (int, 0),
        "early_stop_patience": (int, 0),
        "target_val_acc": (float, 0.0),   # 0 disables the target stop
        "target_val_rmse": (float, 0.0),  # 0 disables the target stop
        "flip_probability": (float, 0.5),
        "accdev_raw_meters": (bool, False),
    },
}

_ENUMS = {
    ("dataset", "kind"): ("synthetic", "kitti"),
    ("model", "encoder"): ("flownetc", "flownets"),
    ("model", "rnn_cell"): ("bilstm", "lstm"),
    ("model", "head"): ("ordinal", "regression"),
    ("model", "dtype"): ("float32", "float64"),
    ("loss", "kind"): ("focal", "bce", "mse_regression"),
    ("optimizer", "clip_mode"): ("element", "norm"),
}


def _parse_value(section: str, key: str, raw: str):
    typ, _ = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Typed view over the schema; values live in a nested dict."""

    values: dict[str, dict[str, object]]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(values={s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case as written
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse configuration: {exc}")
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown configuration section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                cfg.values[section][key] = _parse_value(section, key, raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def get(self, section: str, key: str):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown configuration key [{section}] {key}")

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        if isinstance(value, str):
            value = _parse_value(section, key, value)
        self.values[section][key] = value

    def apply_overrides(self, overrides: list[str]) -> None:
        """Apply 'section.key=value' strings (CLI flags override file keys)."""
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            self.set(section.strip(), key.strip(), raw.strip())
        self.validate()

    def validate(self) -> None:
        for (section, key), allowed in _ENUMS.items():
            v = self.values[section][key]
            if v not in allowed:
                raise ConfigError(f"[{section}] {key} must be one of {allowed}, got {v!r}")
        for section, key in (("train", "batch_size"), ("train", "micro_batch"), ("train", "epochs")):
            if int(self.values[section][key]) < 1:
                raise ConfigError(f"[{section}] {key} must be >= 1")
        w, h = self.resolution()
        if w < 1 or h < 1:
            raise ConfigError(f"[model] resolution {w}x{h} must be positive")
        if int(self.values["train"]["micro_batch"]) > int(self.values["train"]["batch_size"]):
            raise ConfigError("[train] micro_batch cannot exceed batch_size")

    def resolution(self) -> tuple[int, int]:
        raw = str(self.values["model"]["resolution"]).lower()
        try:
            w, h = raw.split("x")
            return int(w), int(h)
        except ValueError:
            raise ConfigError(f"[model] resolution must look like 128x64, got {raw!r}")

    def codec_config(self) -> DistanceCodec:
        return DistanceCodec(
            K=int(self.values["codec"]["k"]),
            d_max=float(self.values["codec"]["d_max"]),
            threshold=float(self.values["codec"]["threshold"]),
        )

    def frozen_names(self) -> tuple[str, ...]:
        raw = str(self.values["model"]["freeze"]).strip()
        if not raw:
            return ()
        return tuple(name.strip() for name in raw.split(",") if name.strip())

    def to_text(self) -> str:
        """Canonical resolved form: schema order, every key explicit."""
        out = io.StringIO()
        for section in SCHEMA:
            out.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                out.write(f"{key} = {_format_value(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def copy(self) -> "RunConfig":
        return RunConfig(values={s: dict(kv) for s, kv in self.values.items()})
