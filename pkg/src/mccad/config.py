"""Run configuration: one TOML file, every key optional, unknown keys rejected."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

from .params import PipelineParams, TrainConfig, from_plain, to_plain
from .phantom import PhantomSpec
from .truth import HitCriterion

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SEED_ENV = "MCCAD_SEED"


@dataclass(frozen=True)
class SynthConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 10
    # cases 0, k, 2k, ... carry the phantom's groups; the rest are negative
    positive_every: int = 2

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("synth.n_cases must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    # operating points reported as sens@FP=k
    fp_rates: tuple[float, ...] = (0.5, 1.0, 2.0)
    hit: HitCriterion = field(default_factory=HitCriterion)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    training: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return to_plain(self)

    def dumps(self) -> str:
        # jobs is left out so echoed configs do not depend on parallelism
        d = self.to_dict()
        d.pop("jobs", None)
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    return from_plain(RunConfig, tomllib.loads(text), "config")


def load_config(path=None, env=None) -> RunConfig:
    """Defaults, then the TOML file, then ``MCCAD_SEED``."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as fh:
            cfg = from_plain(RunConfig, tomllib.load(fh), "config")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer") from None
    return cfg
