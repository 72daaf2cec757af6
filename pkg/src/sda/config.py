"""Run configuration: INI-style sections, typed keys, strict validation.

Every pipeline command is driven by one config file; any value can be
overridden on the command line with ``--set section.key=value``. Unknown
sections or keys are rejected, and each command writes the fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

import configparser
import io
import os
from pathlib import Path

from .errors import SdaError


class ConfigError(SdaError):
    """Invalid, unknown, or missing configuration entries."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")


def _parse_strs(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip() != "")


# section -> key -> (parser, default). None defaults mean "unset".
SCHEMA = {
    "data": {
        "l": (int, 64), "v": (int, 2), "h": (int, 32), "w": (int, 32),
        "dt_hours": (float, 1.0),
        "process": (str, "gp_advection"),
        "length_scale": (float, 4.0), "time_scale": (float, 8.0),
        "shared_weight": (float, 0.6),
        "diurnal_amplitude": (float, 0.0), "diurnal_period_hours": (float, 24.0),
        "advect": (_parse_floats, ()),
        "var_names": (_parse_strs, ()),
        "seed": (int, 0),
        "bias_shift": (_parse_floats, ()),
        "bias_scale": (_parse_floats, ()),
        "fine": (str, "fine.sdat"),
        "coarse": (str, "coarse.sdat"),
        "coarse_biased": (str, "coarse_biased.sdat"),
    },
    "model": {
        "k": (int, 1),
        "hidden": (int, 24),
    },
    "train": {
        "epochs": (int, 4), "batch": (int, 8), "lr": (float, 1e-3), "seed": (int, 0),
        "resume": (_parse_bool, False),
        "checkpoint": (str, "model.sdck"),
        "loss_log": (str, "loss_log.csv"),
    },
    "observe": {
        "block": (int, 4), "stride_t": (int, 4), "phase": (int, 0),
        "noise_std": (_parse_floats, (0.2,)),
        "mask": (str, "all"),
    },
    "sample": {
        "steps": (int, 256), "corrector_steps": (int, 1), "corrector_snr": (float, 0.1),
        "guidance_scale": (float, 1.0), "seed": (int, 0), "n_samples": (int, 4),
        "batch_windows": (int, 8),
        "unconditional": (_parse_bool, False),
        "out_prefix": (str, "sample"),
        "manifest": (str, "samples_manifest.jsonl"),
    },
    "bias": {
        "source": (str, "coarse_biased.sdat"),
        "reference": (str, "coarse.sdat"),
        "n_q": (int, 256), "pooling": (int, 0), "cycle_len": (int, 0),
        "qm_table": (str, "qm.sdqm"),
        "corrected": (str, "coarse_corrected.sdat"),
    },
    "eval": {
        "truth": (str, "fine.sdat"),
        "samples": (str, "sample"),
        "n_samples": (int, 0),   # 0 = discover by scanning indices
        "coarse": (str, "coarse.sdat"),
        "baseline": (_parse_bool, True),
        "n_slices": (int, 32), "seed": (int, 0),
        "ssim_window": (int, 7), "pit_bins": (int, 20), "pit_cells": (int, 4096),
        "wind_u": (str, ""), "wind_v": (str, ""),
        "report": (str, "report.json"),
        "schema": (str, "report.schema.json"),
    },
}


class RunConfig:
    """Typed view of one configuration file plus overrides."""

    def __init__(self, values: dict):
        self._values = values

    def __getitem__(self, section: str) -> dict:
        return self._values[section]

    def get(self, section: str, key: str):
        return self._values[section][key]

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: list[str] = ()) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        raw: dict[str, dict[str, str]] = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                raw.setdefault(section, {})[key] = value
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config entry {dotted!r}")
            raw.setdefault(section, {})[key] = value
        values: dict[str, dict] = {}
        for section, keys in SCHEMA.items():
            values[section] = {}
            for key, (parse, default) in keys.items():
                if section in raw and key in raw[section]:
                    try:
                        values[section][key] = parse(raw[section][key])
                    except ValueError as exc:
                        raise ConfigError(
                            f"bad value for {section}.{key}: {raw[section][key]!r} ({exc})"
                        ) from exc
                else:
                    values[section][key] = default
        return cls(values)

    def resolved_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self._values.items():
            parser.add_section(section)
            for key, value in keys.items():
                if isinstance(value, tuple):
                    parser.set(section, key, ",".join(str(x) for x in value))
                else:
                    parser.set(section, key, str(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def data_dir(cli_value: str | None = None) -> Path:
    """Output root: CLI flag, else SDA_DATA_DIR, else the working directory."""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get("SDA_DATA_DIR")
    return Path(env) if env else Path(".")
