"""Experiment configuration: one JSON document, defaults always materialized.

Every run records its fully resolved configuration, so a config hash pins the
experiment exactly. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .augment import AugSpec, ROTATION_MENU, WeakJitter
from .scene import REAL_DEFAULT, SYNTHETIC_DEFAULT, DomainConfig


class ConfigError(ValueError):
    """The configuration file or overrides are invalid."""


@dataclass(frozen=True)
class StageCfg:
    lr: float
    momentum: float
    epochs: int
    batch: int

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"stage lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"stage momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"stage epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"stage batch must be >= 1, got {self.batch}")


@dataclass(frozen=True)
class DataCfg:
    synth_pool: int = 200
    real_train: int = 64
    real_unlabeled: int = 128
    real_test: int = 64
    base_seed: int = 77000
    synthetic: DomainConfig = SYNTHETIC_DEFAULT
    real: DomainConfig = REAL_DEFAULT

    def __post_init__(self):
        for name in ("synth_pool", "real_train", "real_unlabeled", "real_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")

    def split_seed(self, split: str) -> int:
        offsets = {"synth_pool": 0, "real_train": 100000, "real_unlabeled": 200000, "real_test": 300000}
        return self.base_seed + offsets[split]


@dataclass(frozen=True)
class UnitsCfg:
    strategy: str = "dbss"
    lr: float | None = None  # None: derived as 0.1 * pretrain.lr
    epochs: int | None = None  # None: derived as round(0.5 * finetune.epochs)
    momentum: float | None = None  # None: pretrain momentum
    pseudo_threshold: float = 0.5
    confidence_band: tuple[float, float] | None = None
    synth_batch: int = 8
    unlabeled_batch: int = 8
    loss_weight_units: float = 1.0
    loss_weight_synth: float = 1.0
    augment_synth_strong: bool = False
    brightness_max: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.25)
    strong_enabled: bool = True
    strong_menu: tuple[str, ...] = ROTATION_MENU

    def __post_init__(self):
        if self.strategy not in ("sbss", "dbss", "dbds"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    def aug_spec(self) -> AugSpec:
        return AugSpec(
            weak=WeakJitter(self.brightness_max, tuple(self.contrast_range)),
            strong_enabled=self.strong_enabled,
            strong_menu=tuple(self.strong_menu),
        )


@dataclass(frozen=True)
class EvalCfg:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"eval.iou_threshold must be in (0,1)")


@dataclass(frozen=True)
class AblationCfg:
    include_multi_augmentation: bool = False
    extended_baseline_factor: float = 1.5


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = tuple(range(1, 11))
    data: DataCfg = DataCfg()
    pretrain: StageCfg = StageCfg(lr=0.5, momentum=0.9, epochs=10, batch=8)
    finetune: StageCfg = StageCfg(lr=0.5, momentum=0.9, epochs=12, batch=8)
    units: UnitsCfg = UnitsCfg()
    eval: EvalCfg = EvalCfg()
    ablation: AblationCfg = AblationCfg()
    out_dir: str = "runs"
    # reserved for pooling several unlabeled sources; only 0 or 1 supported
    unlabeled_pools: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(self.unlabeled_pools) > 1:
            raise ConfigError("multiple unlabeled pools are reserved and not supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["synthetic"] = asdict(self.data.synthetic)
        d["data"]["real"] = asdict(self.data.real)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return data


def _tuple_or_none(v):
    return None if v is None else tuple(v)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(_build(ExperimentConfig, raw, "config"))
    kwargs: dict = {}
    if "seeds" in raw:
        kwargs["seeds"] = tuple(int(s) for s in raw.pop("seeds"))
    if "data" in raw:
        d = dict(_build(DataCfg, raw.pop("data"), "data"))
        for domain_key, default in (("synthetic", SYNTHETIC_DEFAULT), ("real", REAL_DEFAULT)):
            if domain_key in d:
                dom = dict(_build(DomainConfig, d[domain_key], f"data.{domain_key}"))
                for tup in ("stroke_intensity_range", "instance_count_range"):
                    if tup in dom:
                        dom[tup] = tuple(dom[tup])
                d[domain_key] = replace(default, **dom)
        try:
            kwargs["data"] = DataCfg(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data: {e}") from e
    for stage in ("pretrain", "finetune"):
        if stage in raw:
            s = _build(StageCfg, raw.pop(stage), stage)
            try:
                kwargs[stage] = StageCfg(**s)
            except TypeError as e:
                raise ConfigError(f"{stage}: {e}") from e
    if "units" in raw:
        u = dict(_build(UnitsCfg, raw.pop("units"), "units"))
        if "confidence_band" in u:
            u["confidence_band"] = _tuple_or_none(u["confidence_band"])
        for tup in ("contrast_range", "strong_menu"):
            if tup in u:
                u[tup] = tuple(u[tup])
        kwargs["units"] = UnitsCfg(**u)
    if "eval" in raw:
        kwargs["eval"] = EvalCfg(**_build(EvalCfg, raw.pop("eval"), "eval"))
    if "ablation" in raw:
        kwargs["ablation"] = AblationCfg(**_build(AblationCfg, raw.pop("ablation"), "ablation"))
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw.pop("out_dir"))
    if "unlabeled_pools" in raw:
        kwargs["unlabeled_pools"] = tuple(raw.pop("unlabeled_pools"))
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    try:
        return config_from_dict(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config {path}: {e}") from e
