"""Parameter blocks shared by the pipeline, the model file and the run config."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .candidates import ObjectnessParams
from .classifier import ForestConfig
from .features import FeatureParams
from .grouping import DissimilarityParams, GroupingParams
from .image_core import MapParams
from .truth import HitCriterion

PREPROCESS_MODES = ("none", "log_negate", "local_mean", "log_negate+local_mean")


def to_plain(obj):
    """Dataclass -> nested dict/list of JSON-able values."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def from_plain(cls, d, where: str = ""):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ValueError(f"{where or cls.__name__}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ValueError(f"{where or cls.__name__}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    kw = {}
    for k, v in d.items():
        sub = hints.get(k)
        if isinstance(sub, type) and dataclasses.is_dataclass(sub) and isinstance(v, dict):
            kw[k] = from_plain(sub, v, f"{where}.{k}" if where else k)
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


@dataclass(frozen=True)
class PipelineParams:
    maps: MapParams = field(default_factory=MapParams)
    objectness: ObjectnessParams = field(default_factory=ObjectnessParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    dissimilarity: DissimilarityParams = field(default_factory=DissimilarityParams)
    grouping: GroupingParams = field(default_factory=GroupingParams)
    preprocess: str = "none"
    local_mean_radius_mm: float = 2.0

    def __post_init__(self):
        if self.preprocess not in PREPROCESS_MODES:
            raise ValueError(f"preprocess must be one of {PREPROCESS_MODES}")

    def with_normalization(self, mode: str) -> "PipelineParams":
        return dataclasses.replace(self, features=dataclasses.replace(self.features,
                                                                      normalization=mode))

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d) -> "PipelineParams":
        return from_plain(cls, d, "pipeline")


@dataclass(frozen=True)
class TrainConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    target_sensitivity: float = 0.98
    # thresholds from out-of-fold scores (folds by case index mod K); 0 = resubstitution
    cv_folds: int = 3
    label_rule: str = "member"
    # also train on local-mean-subtracted copies of every 2D image
    augment_local_mean: bool = False
    hit: HitCriterion = field(default_factory=HitCriterion)
    # stage-3 training hypotheses: grouped over stage-2 survivors only ("stage2"), or also
    # over each case's top stage3_pool_top candidates by stage-1 score ("union"); the
    # wider pool supplies the false-positive clusters a clean stage 2 never leaves
    stage3_pool: str = "union"
    stage3_pool_top: int = 60

    def __post_init__(self):
        if self.stage3_pool not in ("stage2", "union"):
            raise ValueError("stage3_pool must be 'stage2' or 'union'")
        if not 0.0 < self.target_sensitivity <= 1.0:
            raise ValueError("target_sensitivity must be in (0, 1]")
        if self.cv_folds < 0 or self.cv_folds == 1:
            raise ValueError("cv_folds must be 0 or >= 2")

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return from_plain(cls, d, "training")
