"""Pipeline configuration: one TOML file, every field overridable.

The dataclass tree mirrors the per-module parameter sets; defaults here are
the same defaults the modules use on their own. A stable hash of the
resolved configuration is stamped into models and run records so results
can be traced back to the exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .fluor import BlobConfig
from .imagecore import FilterBankConfig
from .segmenter import SegmenterConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class BoostingConfig:
    segmenter_rounds: int = 200
    stripe_rounds: int = 50
    phenotype_rounds: int = 50
    bag_size: int = 7
    subsample_fraction: float = 0.7
    with_replacement: bool = False


@dataclass
class TrainingConfig:
    positive_spacing: float = 3.0
    negatives_per_positive: float = 3.0
    mining_rounds: int = 3
    mined_per_image: int = 200
    threshold_candidates: int = 64
    # regions below this area carry too little stripe context to classify
    # (mostly track fragments); they stay in the segmentation output but are
    # excluded from phenotype examples
    phenotype_min_region_area: int = 400


@dataclass
class PipelineConfig:
    filter_bank: FilterBankConfig = field(default_factory=FilterBankConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    blobs: BlobConfig = field(default_factory=BlobConfig)
    boosting: BoostingConfig = field(default_factory=BoostingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    workspace: str = "workspace"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(value, target):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(target, int) and not isinstance(target, bool):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(type(target[0])(v) for v in value) if target \
            else tuple(value)
    return type(target)(value) if target is not None else value


def _apply(cfg, dotted: str, value):
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise KeyError(f"unknown config section {p!r} in {dotted!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or not hasattr(obj, leaf):
        raise KeyError(f"unknown config key {dotted!r}")
    setattr(obj, leaf, _coerce(value, getattr(obj, leaf)))


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> PipelineConfig:
    """Build a config from defaults, an optional TOML file, and overrides.

    Overrides are "section.key=value" strings, e.g. from the command line.
    """
    cfg = PipelineConfig()
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        for section, values in doc.items():
            if not isinstance(values, dict):
                _apply(cfg, section, values)
                continue
            for key, value in values.items():
                _apply(cfg, f"{section}.{key}", value)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        dotted, value = item.split("=", 1)
        _apply(cfg, dotted.strip(), value.strip())
    return cfg
