import copy
from dataclasses import replace

import numpy as np
import pytest

from mccad.cascade import (
    ModelLayoutError, prepare_case, prepare_training_cases, run_cascade, train_cascade,
)
from mccad.classifier import Forest, ForestConfig, load_model, save_model
from mccad.evaluation import match_detections
from mccad.features import build_neighborhood
from mccad.grouping import agglomerate, select_detections
from mccad.phantom import synth_phantom
from mccad.truth import HitCriterion

from conftest import SMALL_SPEC, SMALL_TRAIN, small_pipeline


def with_thresholds(model, t1=None, t2=None, t3=None):
    m = copy.deepcopy(model)
    for f, t in zip(m.stages, (t1, t2, t3)):
        if t is not None:
            f.threshold = t
    return m


@pytest.fixture(scope="module")
def test_case():
    return synth_phantom(replace(SMALL_SPEC, seed=12345))


def test_model_layout(small_model):
    assert [f.n_features for f in small_model.stages] == [50, 100, 58]
    assert small_model.params["pipeline"]["objectness"]["max_candidates"] == 300
    for f in small_model.stages:
        assert 0.0 <= f.threshold < 1.0


def test_zero_thresholds_is_pure_grouping(small_model, test_case):
    img, _ = test_case
    r = run_cascade(with_thresholds(small_model, 0.0, 0.0, 0.0), img)
    n = len(r.cands)
    assert r.counts["stage1"] == n and r.counts["stage2"] == n
    ref = agglomerate(r.cands, build_neighborhood(r.cands, 10.0))
    assert [h.member_ids for h in r.hypotheses] == [h.member_ids for h in ref]
    assert r.detections == select_detections(r.hypotheses, 0.0)


def test_stage1_threshold_one_gives_nothing(small_model, test_case):
    img, _ = test_case
    r = run_cascade(with_thresholds(small_model, t1=1.0), img)
    assert r.counts["stage1"] == 0 and r.detections == [] and r.hypotheses == []


def test_end_to_end_phantom(small_model, test_case):
    img, truths = test_case
    r = run_cascade(small_model, img)
    assert truths and r.detections
    crit = HitCriterion()
    is_hit = [any(crit.hits(h.centroid(r.cands), t) for t in truths) for h in r.hypotheses]
    assert any(is_hit)
    best_true = max(h.prob for h, k in zip(r.hypotheses, is_hit) if k)
    # the true group outranks every false hypothesis
    assert all(best_true > h.prob for h, k in zip(r.hypotheses, is_hit) if not k)
    dm = match_detections([h.centroid(r.cands) for h in r.detections], truths)
    assert dm.hits == 1


def test_probabilities_written_into_candidates(small_model, test_case):
    img, _ = test_case
    r = run_cascade(small_model, img)
    p = np.array([c.prob for c in r.cands])
    assert np.all((p >= 0) & (p <= 1))
    assert np.array_equal(p[r.stage1_ids], r.p2)
    rest = np.setdiff1d(np.arange(len(r.cands)), r.stage1_ids)
    assert np.array_equal(p[rest], r.p1[rest])


def test_monotone_cascade(small_model, test_case):
    img, _ = test_case
    case = prepare_case(img, small_pipeline())
    for k in range(3):
        counts = []
        for t in np.linspace(0.0, 0.99, 12):
            ts = [None, None, None]
            ts[k] = float(t)
            r = run_cascade(with_thresholds(small_model, *ts), case=case)
            counts.append(r.counts["detections"])
        assert all(a >= b for a, b in zip(counts, counts[1:])), (k, counts)


def test_layout_mismatch_fails_before_scoring(small_model, test_case):
    img, _ = test_case
    bad = copy.deepcopy(small_model)
    bad.stage2.feature_names = bad.stage2.feature_names[::-1]
    with pytest.raises(ModelLayoutError):
        run_cascade(bad, img)
    bad = copy.deepcopy(small_model)
    bad.stage3 = Forest(bad.stage3.trees, 57, bad.stage3.feature_names[:57], 3)
    with pytest.raises(ModelLayoutError):
        run_cascade(bad, img)


def test_training_errors(small_dataset):
    with pytest.raises(ValueError, match="empty dataset"):
        train_cascade([], small_pipeline(), SMALL_TRAIN)
    negatives = [d for d in small_dataset if not d[1]][:3]
    with pytest.raises(ValueError, match="no positive candidates"):
        train_cascade(negatives, small_pipeline(), SMALL_TRAIN)


def test_target_sensitivity_one_uses_min_positive(small_dataset):
    cfg = replace(SMALL_TRAIN, target_sensitivity=1.0, cv_folds=0,
                  forest=ForestConfig(n_trees=5))
    data = small_dataset[:8]
    cases = prepare_training_cases(data, small_pipeline(), cfg)
    model = train_cascade(None, small_pipeline(), cfg, seed=0, cases=cases)
    X1 = np.vstack([np.hstack([tc.case.ctx.sa(), tc.case.ctx.sn1()]) for tc in cases])
    y1 = np.concatenate([tc.labels for tc in cases])
    p1 = model.stage1.predict_batch(X1)
    assert model.stage1.threshold == p1[y1 == 1].min()


def test_training_deterministic(small_dataset, tmp_path):
    cfg = replace(SMALL_TRAIN, forest=ForestConfig(n_trees=5))
    a = train_cascade(small_dataset[:10], small_pipeline(), cfg, seed=1)
    b = train_cascade(small_dataset[:10], small_pipeline(), cfg, seed=1, jobs=3)
    save_model(a, tmp_path / "a.json")
    save_model(b, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_saved_model_detects_identically(small_model, test_case, tmp_path):
    img, _ = test_case
    save_model(small_model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    r1, r2 = run_cascade(small_model, img), run_cascade(back, img)
    assert [h.prob for h in r1.hypotheses] == [h.prob for h in r2.hypotheses]
    assert [h.member_ids for h in r1.detections] == [h.member_ids for h in r2.detections]


def test_volume_path_and_jobs(small_model):
    vol, truths = synth_phantom(replace(SMALL_SPEC, nz=4, slice_blur_mm=0.05, quantize=False, seed=99))
    r1 = run_cascade(small_model, vol)
    r4 = run_cascade(small_model, vol, jobs=4)
    assert r1.is_volume
    assert r1.counts == r4.counts
    assert [h.prob for h in r1.hypotheses] == [h.prob for h in r4.hypotheses]
    assert all(c.z == c.slice_index * 1.0 for c in r1.cands)


def test_preprocess_modes(test_case):
    img, _ = test_case
    from mccad.params import PipelineParams
    for mode in ("log_negate", "local_mean", "log_negate+local_mean"):
        case = prepare_case(img, replace(small_pipeline(), preprocess=mode))
        assert case.cands
    with pytest.raises(ValueError):
        PipelineParams(preprocess="bogus")
    with pytest.raises(TypeError):
        prepare_case(np.zeros((4, 4)))
