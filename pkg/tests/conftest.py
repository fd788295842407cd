from dataclasses import replace

import pytest

from mccad.classifier import ForestConfig
from mccad.evaluation import synth_dataset
from mccad.params import PipelineParams, TrainConfig
from mccad.phantom import PhantomSpec

# small phantoms so end-to-end tests stay fast
SMALL_SPEC = PhantomSpec(width=320, height=320, n_distractors=2, distractor_clearance_mm=8.0,
                         disk_radius_mm=(2.5, 4.0))
SMALL_TRAIN = TrainConfig(forest=ForestConfig(n_trees=20), cv_folds=2)


def small_pipeline() -> PipelineParams:
    p = PipelineParams()
    return replace(p, objectness=replace(p.objectness, max_candidates=300))


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(SMALL_SPEC, 24, seed=7)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    from mccad.cascade import train_cascade
    return train_cascade(small_dataset, small_pipeline(), SMALL_TRAIN, seed=3)
