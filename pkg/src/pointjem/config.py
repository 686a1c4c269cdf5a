"""Run-config documents (JSON) for the command line."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

import jsonschema

from .optim import SamConfig
from .sampler import SgldConfig
from .trainer import AdamConfig, ConfigError, TrainConfig

SCHEMA_VERSION = 1

_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _dataclass_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            props[f.name] = _dataclass_schema(tp)
        elif typing.get_origin(tp) is tuple:
            props[f.name] = {"type": "array", "items": {"type": "integer", "minimum": 1}}
        else:
            props[f.name] = {"type": _JSON_TYPES[tp]}
    return {"type": "object", "properties": props, "additionalProperties": False}


def run_config_schema() -> dict:
    return {
        "type": "object",
        "required": ["schema_version", "dataset", "train"],
        "additionalProperties": False,
        "properties": {
            "schema_version": {"const": SCHEMA_VERSION},
            "dataset": {
                "type": "object",
                "required": ["manifest"],
                "additionalProperties": False,
                "properties": {"manifest": {"type": "string"}},
            },
            "train": _dataclass_schema(TrainConfig),
            "output_dir": {"type": "string"},
        },
    }


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    manifest: Path
    output_dir: Path | None = None
    train_section: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "dataset": {"manifest": str(self.manifest)},
            "train": self.train.to_dict(),
        }
        if self.output_dir is not None:
            doc["output_dir"] = str(self.output_dir)
        return doc


def validate_run_config(doc) -> list[str]:
    """Schema errors as readable strings (empty when valid)."""
    validator = jsonschema.Draft202012Validator(run_config_schema())
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    return errors


def load_run_config(path, defaults: dict | None = None) -> RunConfig:
    """Read and validate a run config; ``defaults`` fill train keys the file omits."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    errors = validate_run_config(doc)
    if errors:
        raise ConfigError(f"{path}: " + "; ".join(errors))
    section = dict(doc["train"])
    merged = dict(defaults or {})
    merged.update(section)
    manifest = Path(doc["dataset"]["manifest"])
    if not manifest.is_absolute():
        manifest = path.parent / manifest
    out = doc.get("output_dir")
    if out is not None and not Path(out).is_absolute():
        out = path.parent / out
    return RunConfig(TrainConfig.from_dict(merged), manifest, None if out is None else Path(out), section)


def desk_config(**overrides) -> TrainConfig:
    """Small configuration used for the synthetic 4-class runs.

    Depth matters more than width for mean-pooled features at this scale, so
    the point MLP is deep and narrow with one hidden head layer. Chains start
    from the per-axis Gaussian fit to the training clouds.
    """
    base = TrainConfig(
        epochs=60,
        batch_size=64,
        n_classes=4,
        n_points=256,
        point_widths=(16, 16, 16, 64),
        head_widths=(32,),
        sgld=SgldConfig(init_mode="data_gaussian"),
        sam=SamConfig(),
        adam=AdamConfig(),
    )
    return dataclasses.replace(base, **overrides)
