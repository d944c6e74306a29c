"""Key-value config files (INI sections mirroring RunConfig) and override helpers."""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .contrastive import SchedulerConfig
from .data import DatasetSpec
from .harness import RunConfig
from .model import ModelConfig, OptimConfig
from .sampling import SamplingConfig

_SECTION_TYPES = {
    "dataset": DatasetSpec,
    "model": ModelConfig,
    "optim": OptimConfig,
    "sampling": SamplingConfig,
    "scheduler": SchedulerConfig,
}

_RUN_FIELDS = (
    "temperature",
    "delta_u",
    "method",
    "p_flip",
    "augment_strength",
    "freeze_lambda_c",
    "epochs",
    "seed",
    "output_dir",
)


def _coerce(raw, target_type):
    """Parse a raw string into the annotated field type (int/float/bool/str, optional)."""
    if not isinstance(raw, str):
        return raw
    if get_origin(target_type) is not None:  # e.g. int | None
        for arg in get_args(target_type):
            if arg is type(None):
                continue
            return _coerce(raw, arg)
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse {raw!r} as a boolean")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _build_from_section(cls, section) -> object:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in names:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        kwargs[key] = _coerce(raw, hints[key])
    return cls(**kwargs)


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    return parser


def load_dataset_spec(path) -> DatasetSpec:
    """Read a [dataset] section from a spec file."""
    parser = _read_ini(path)
    if not parser.has_section("dataset"):
        raise ValueError(f"{path}: missing [dataset] section")
    return _build_from_section(DatasetSpec, parser["dataset"])


def load_run_config(path) -> RunConfig:
    """Read a full run config; the dataset is either inline or a file path.

    The [run] section holds scalar run fields plus an optional `dataset` path;
    nested sections ([dataset], [model], [optim], [sampling], [scheduler]) map
    onto their config dataclasses. A [scheduler] without total_epochs inherits
    the run's epoch count.
    """
    parser = _read_ini(path)
    run_kwargs = {}
    run_section = dict(parser["run"]) if parser.has_section("run") else {}
    hints = get_type_hints(RunConfig)

    dataset_path = run_section.pop("dataset", None)
    for key, raw in run_section.items():
        if key not in _RUN_FIELDS:
            raise ValueError(f"unknown [run] field {key!r}")
        run_kwargs[key] = _coerce(raw, hints[key])

    if parser.has_section("dataset"):
        if dataset_path is not None:
            raise ValueError("config sets both an inline [dataset] section and a dataset path")
        run_kwargs["dataset"] = _build_from_section(DatasetSpec, parser["dataset"])
    elif dataset_path is not None:
        base = Path(path).parent
        candidate = Path(dataset_path)
        run_kwargs["dataset"] = str(candidate if candidate.is_absolute() else base / candidate)

    for name, cls in (("model", ModelConfig), ("optim", OptimConfig), ("sampling", SamplingConfig)):
        if parser.has_section(name):
            run_kwargs[name] = _build_from_section(cls, parser[name])
    if parser.has_section("scheduler"):
        section = dict(parser["scheduler"])
        if "total_epochs" not in section:
            section["total_epochs"] = str(run_kwargs.get("epochs", RunConfig().epochs))
        run_kwargs["scheduler"] = _build_from_section(SchedulerConfig, section)
    return RunConfig(**run_kwargs)


def apply_override(cfg: RunConfig, key: str, value) -> RunConfig:
    """Set one run field by name, optionally dotted into a nested config.

    Examples: "method", "p_flip", "sampling.negatives_per_anchor",
    "optim.lr_base", "dataset.spread" (inline dataset specs only). String
    values are coerced to the field's annotated type.
    """
    head, _, rest = key.partition(".")
    if not rest:
        hints = get_type_hints(RunConfig)
        if head not in hints or head in ("dataset", "model", "optim", "sampling", "scheduler"):
            raise ValueError(f"cannot override field {key!r} without a subfield")
        return dataclasses.replace(cfg, **{head: _coerce(value, hints[head])})

    target = getattr(cfg, head, None)
    if head == "scheduler" and target is None:
        target = SchedulerConfig(total_epochs=max(cfg.epochs, 1))
    if head == "dataset" and not isinstance(target, DatasetSpec):
        raise ValueError("dataset overrides require an inline dataset spec, not a path")
    if head not in _SECTION_TYPES:
        raise ValueError(f"unknown override section {head!r}")
    hints = get_type_hints(_SECTION_TYPES[head])
    if rest not in hints:
        raise ValueError(f"unknown {head} field {rest!r}")
    nested = dataclasses.replace(target, **{rest: _coerce(value, hints[rest])})
    return dataclasses.replace(cfg, **{head: nested})
