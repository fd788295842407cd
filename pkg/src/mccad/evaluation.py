"""Truth matching, FROC curves and the 2D -> 3D transfer experiment."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cascade import pmap, prepare_case, prepare_training_cases, run_cascade, train_cascade
from .grouping import GroupHypothesis, select_detections
from .params import PipelineParams, TrainConfig, from_plain, to_plain
from .phantom import PhantomSpec, dataset_specs, synth_phantom
from .truth import HitCriterion, TruthGroup

log = logging.getLogger(__name__)


class InvariantViolation(RuntimeError):
    pass


@dataclass
class MatchResult:
    truth_hit: list[bool]
    det_truth: list[int]  # matched truth index per detection, -1 for a false positive

    @property
    def hits(self) -> int:
        return sum(self.truth_hit)

    @property
    def fp(self) -> int:
        return sum(1 for t in self.det_truth if t < 0)


def match_detections(points, truths, criterion: HitCriterion | None = None) -> MatchResult:
    """One-to-one assignment of detections to truths they hit.

    The assignment maximizes the number of hit truths (ties: smallest total
    centroid distance); every unassigned detection is a false positive.
    """
    criterion = criterion or HitCriterion()
    points = [tuple(map(float, p)) for p in points]
    nd, nt = len(points), len(truths)
    det_truth = [-1] * nd
    if nd and nt:
        ok = np.array([[criterion.hits(p, t) for t in truths] for p in points])
        dist = np.array([[math.dist(p, t.centroid) for t in truths] for p in points])
        big = 1.0 + 2.0 * float(dist[ok].sum()) if ok.any() else 1.0
        rows, cols = linear_sum_assignment(np.where(ok, dist, big * (nd + nt)))
        for r, c in zip(rows, cols):
            if ok[r, c]:
                det_truth[r] = int(c)
    hit = [False] * nt
    for t in det_truth:
        if t >= 0:
            hit[t] = True
    res = MatchResult(hit, det_truth)
    if res.hits + res.fp != nd:
        raise InvariantViolation("matching conservation: hits + FPs != detections")
    return res


@dataclass
class ScoredCase:
    hypotheses: list[GroupHypothesis]
    centroids: list[tuple[float, float, float]]
    truths: list[TruthGroup]


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fp_rates: np.ndarray
    sensitivities: np.ndarray
    n_cases: int = 0
    n_truths: int = 0

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_rates.tolist(), self.sensitivities.tolist()))


def _selection_order(case: ScoredCase):
    chosen = select_detections(case.hypotheses, -math.inf)
    pos = {id(h): i for i, h in enumerate(case.hypotheses)}
    return chosen, [case.centroids[pos[id(h)]] for h in chosen]


def check_froc(curve: FrocCurve) -> None:
    s, f = curve.sensitivities, curve.fp_rates
    if np.any(np.diff(curve.thresholds) > 0):
        raise InvariantViolation("FROC thresholds not in descending order")
    if np.any(np.diff(s) < 0) or np.any(np.diff(f) < 0):
        raise InvariantViolation("FROC not monotone as the threshold decreases")
    if np.any((s < 0) | (s > 1)):
        raise InvariantViolation("sensitivity outside [0, 1]")


def compute_froc(cases, criterion: HitCriterion | None = None) -> FrocCurve:
    """Sweep the final threshold over every distinct hypothesis probability.

    Selection is greedy in descending probability, so the detections at a
    threshold are a prefix of the full greedy order; each prefix is matched
    once.  The first point is the empty operating point at threshold +inf.
    """
    criterion = criterion or HitCriterion()
    cases = list(cases)
    if not cases:
        raise ValueError("need at least one case")
    n_truths = sum(len(c.truths) for c in cases)
    if n_truths == 0:
        raise ValueError("no positives to score")
    per_case = []
    for c in cases:
        chosen, pts = _selection_order(c)
        probs = np.array([h.prob for h in chosen])
        hits = np.zeros(len(chosen) + 1, dtype=np.int64)
        fps = np.zeros(len(chosen) + 1, dtype=np.int64)
        for k in range(1, len(chosen) + 1):
            m = match_detections(pts[:k], c.truths, criterion)
            hits[k], fps[k] = m.hits, m.fp
        per_case.append((probs, hits, fps))
    all_probs = np.unique(np.concatenate([[h.prob for h in c.hypotheses] for c in cases]
                                         + [np.zeros(0)]))[::-1]
    thresholds = np.concatenate([[math.inf], all_probs])
    sens = np.empty(len(thresholds))
    fpr = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        h = f = 0
        for probs, hits, fps in per_case:
            # probs are non-increasing along the greedy order
            k = int(np.sum(probs >= t))
            h += hits[k]
            f += fps[k]
        sens[i] = h / n_truths
        fpr[i] = f / len(cases)
    curve = FrocCurve(thresholds, fpr, sens, len(cases), n_truths)
    check_froc(curve)
    return curve


def sensitivity_at(curve: FrocCurve, fp_rate: float) -> float:
    ok = curve.fp_rates <= fp_rate + 1e-12
    return float(curve.sensitivities[ok].max()) if ok.any() else 0.0


def write_froc(path, curve: FrocCurve, title: str = "FROC") -> Path:
    """CSV ``threshold,fp_rate,sensitivity`` plus a gnuplot script beside it."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("threshold,fp_rate,sensitivity\n")
        for t, f, s in zip(curve.thresholds, curve.fp_rates, curve.sensitivities):
            fh.write(f"{float(t)!r},{float(f)!r},{float(s)!r}\n")
    gp = path.with_suffix(".gp")
    with open(gp, "w") as fh:
        fh.write(f"set datafile separator ','\nset key autotitle columnhead\n"
                 f"set title '{title}'\nset xlabel 'false positives per case'\n"
                 f"set ylabel 'sensitivity'\nset yrange [0:1.05]\n"
                 f"set terminal pngcairo size 800,600\nset output '{path.stem}.png'\n"
                 f"plot '{path.name}' using 2:3 with steps lw 2 title '{title}'\n")
    return gp


def score_result(result, truths) -> ScoredCase:
    cents = [h.centroid(result.cands) for h in result.hypotheses]
    return ScoredCase(result.hypotheses, cents, truths)


# ---------------------------------------------------------------------------
# transfer experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shift:
    """Acquisition change applied to the test distribution."""

    brightness_offset: float = 900.0
    contrast_scale: float = 3.0
    extra_blur_mm: float = 0.1
    # smooth multiplicative gain: exp(log_std * unit field), correlation gain_corr_mm
    gain_log_std: float = 0.5
    gain_corr_mm: float = 10.0

    def apply(self, spec: PhantomSpec) -> PhantomSpec:
        return replace(spec, brightness_offset=self.brightness_offset,
                       contrast_scale=self.contrast_scale, extra_blur_mm=self.extra_blur_mm,
                       gain_log_std=self.gain_log_std, gain_corr_mm=self.gain_corr_mm)


IDENTITY_SHIFT = Shift(0.0, 1.0, 0.0, 0.0)


def _default_pipeline() -> PipelineParams:
    p = PipelineParams()
    return replace(p, objectness=replace(p.objectness, max_candidates=500))


@dataclass(frozen=True)
class ExperimentConfig:
    train: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 200
    n_test: int = 40
    test_nz: int = 12
    slice_blur_mm: float = 0.05
    shift: Shift = field(default_factory=Shift)
    pipeline: PipelineParams = field(default_factory=_default_pipeline)
    training: TrainConfig = field(default_factory=TrainConfig)
    fp_rate: float = 2.0
    ablation: bool = True

    def test_spec(self) -> PhantomSpec:
        return self.shift.apply(replace(self.train, nz=self.test_nz,
                                        slice_blur_mm=self.slice_blur_mm, quantize=False))

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return from_plain(cls, d, "experiment")


def synth_dataset(base: PhantomSpec, n: int, seed: int, jobs: int = 1):
    return pmap(synth_phantom, dataset_specs(base, n, seed), jobs)


def evaluate_models(models: dict, specs, jobs: int = 1, criterion: HitCriterion | None = None,
                    pipeline: PipelineParams | None = None) -> dict:
    """Detect with every model on each case (maps shared), then one FROC per model."""
    from .cascade import model_params
    first = next(iter(models.values()))
    pipeline = pipeline or model_params(first)

    def work(spec):
        data, truths = synth_phantom(spec) if isinstance(spec, PhantomSpec) else spec
        case = prepare_case(data, pipeline)
        out = {}
        for name, m in models.items():
            r = run_cascade(m, case=case, params=model_params(m))
            out[name] = score_result(r, truths)
        return out

    scored = pmap(work, specs, jobs)
    return {name: compute_froc([s[name] for s in scored], criterion) for name in models}


def transfer_experiment(cfg: ExperimentConfig | None = None, seed: int = 0, jobs: int = 1) -> dict:
    """Train on 2D phantoms, test without retraining on shifted 3D phantom volumes.

    With ``cfg.ablation`` a twin cascade using whole-image normalization is
    trained on the same cases and scored on the same volumes.
    """
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    train_set = synth_dataset(cfg.train, cfg.n_train, seed, jobs)
    cases = prepare_training_cases(train_set, cfg.pipeline, cfg.training, jobs)
    del train_set
    models = {"scope": train_cascade(None, cfg.pipeline, cfg.training, seed, jobs, cases)}
    if cfg.ablation:
        models["global"] = train_cascade(None, cfg.pipeline.with_normalization("global"),
                                         cfg.training, seed, jobs, cases)
    del cases
    t1 = time.perf_counter()
    log.info("trained %d model(s) in %.1fs", len(models), t1 - t0)
    specs = dataset_specs(cfg.test_spec(), cfg.n_test, seed + 1)
    curves = evaluate_models(models, specs, jobs, cfg.training.hit, cfg.pipeline)
    t2 = time.perf_counter()
    report = {"seed": seed, "config": cfg.to_dict(), "models": models, "curves": curves,
              "sensitivity": {k: sensitivity_at(c, cfg.fp_rate) for k, c in curves.items()},
              "timing_s": {"train": t1 - t0, "test": t2 - t1}}
    return report
