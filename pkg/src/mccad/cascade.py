"""The detection pipeline (maps -> candidates -> three-stage cascade -> groups) and its training."""
from __future__ import annotations

import ctypes
import ctypes.util
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .candidates import Candidate, slice_maps_and_candidates, sort_candidates
from .classifier import (
    CascadeModel, Forest, keep_mask, sensitivity_threshold, train_forest,
)
from .features import (
    STAGE1_NAMES, STAGE2_NAMES, STAGE3_NAMES, FeatureContext, build_neighborhood,
)
from .grouping import GroupHypothesis, agglomerate, select_detections
from .image_core import Image2D, MapStack, Volume3D, log_negate, subtract_local_mean
from .params import PipelineParams, TrainConfig
from .truth import candidate_is_positive

log = logging.getLogger(__name__)


class ModelLayoutError(ValueError):
    pass


def _load_libc():
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        return libc if hasattr(libc, "malloc_trim") else None
    except OSError:
        return None


_LIBC = _load_libc()


def release_free_memory() -> None:
    """Return freed heap pages to the OS (glibc only).

    Worker threads allocate slice-sized temporaries in per-thread arenas that
    glibc otherwise keeps resident after they are freed.
    """
    if _LIBC is not None:
        _LIBC.malloc_trim(0)


def pmap(fn, items, jobs: int = 1) -> list:
    """Ordered map, optionally over a thread pool; results never depend on ``jobs``."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def preprocess(img: Image2D, params: PipelineParams) -> Image2D:
    mode = params.preprocess
    if mode.startswith("log_negate"):
        img = log_negate(img)
    if mode.endswith("local_mean"):
        img = subtract_local_mean(img, params.local_mean_radius_mm)
    return img


@dataclass
class Case:
    stack: MapStack
    ctx: FeatureContext

    @property
    def cands(self) -> list[Candidate]:
        return self.ctx.cands

    @property
    def is_volume(self) -> bool:
        return self.stack.is_volume


def prepare_case(data, params: PipelineParams | None = None, jobs: int = 1,
                 dtype=None) -> Case:
    """Feature maps and ranked candidates for an image (2D path) or volume (3D path).

    Volumes are processed slice by slice into a float32 stack; ``dtype``
    overrides the storage type of a 2D stack (float64 by default).
    """
    params = params or PipelineParams()
    op = params.objectness
    if isinstance(data, Image2D):
        maps, cands = slice_maps_and_candidates(preprocess(data, params), params.maps, op)
        stack = MapStack.from_maps(maps)
        if dtype is not None:
            stack = MapStack({k: v.astype(dtype) for k, v in stack.arrays.items()},
                             stack.spacing, False)
    elif isinstance(data, Volume3D):
        sz = data.spacing[2]
        stack = MapStack.empty((data.nz, data.ny, data.nx), data.spacing,
                               dtype or np.float32)

        def work(k):
            img = preprocess(data.slice_image(k), params)
            return slice_maps_and_candidates(img, params.maps, op, k, sz)

        cands = []
        if jobs > 1:
            # at most `jobs` float64 slice map sets alive at once
            with ThreadPoolExecutor(jobs) as ex:
                for k0 in range(0, data.nz, jobs):
                    ks = range(k0, min(k0 + jobs, data.nz))
                    for k, (maps, cs) in zip(ks, ex.map(work, ks)):
                        stack.set_slice(k, maps)
                        cands.extend(cs)
                    del maps
                    release_free_memory()
        else:
            for k in range(data.nz):
                maps, cs = work(k)
                stack.set_slice(k, maps)
                cands.extend(cs)
        cands = sort_candidates(cands)[:op.cap_3d(data.nz)]
    else:
        raise TypeError(f"expected Image2D or Volume3D, got {type(data).__name__}")
    return Case(stack, FeatureContext(stack, cands, params.features))


def check_layout(model: CascadeModel) -> None:
    for forest, names in zip(model.stages, (STAGE1_NAMES, STAGE2_NAMES, STAGE3_NAMES)):
        if tuple(forest.feature_names) != names or forest.n_features != len(names):
            raise ModelLayoutError(f"stage {forest.stage} feature layout does not match this "
                                   f"build ({forest.n_features} features)")


def model_params(model: CascadeModel) -> PipelineParams:
    return PipelineParams.from_dict(model.params.get("pipeline", {}))


@dataclass
class CascadeResult:
    cands: list[Candidate]
    p1: np.ndarray
    stage1_ids: np.ndarray
    p2: np.ndarray
    stage2_ids: np.ndarray
    hypotheses: list[GroupHypothesis]
    detections: list[GroupHypothesis]
    is_volume: bool = False
    counts: dict = field(default_factory=dict)


def _stage2_matrix(ctx: FeatureContext) -> np.ndarray:
    index = build_neighborhood(ctx.cands, ctx.params.l_max)
    return np.hstack([ctx.sa(), ctx.sn1(), ctx.sn2(index)])


def _hypotheses(ctx: FeatureContext, params: PipelineParams):
    index = build_neighborhood(ctx.cands, params.features.l_max)
    hyps = agglomerate(ctx.cands, index, params.dissimilarity, params.grouping)
    X = np.array([ctx.sc(h) for h in hyps]).reshape(len(hyps), len(STAGE3_NAMES))
    return hyps, X


def _remap(h: GroupHypothesis, ids: np.ndarray) -> GroupHypothesis:
    return GroupHypothesis(tuple(int(ids[i]) for i in h.member_ids),
                           [(int(ids[a]), int(ids[b]), d) for a, b, d in h.pair_links],
                           h.bbox_min, h.bbox_max, h.features, h.prob)


def run_cascade(model: CascadeModel, data=None, *, case: Case | None = None,
                params: PipelineParams | None = None, jobs: int = 1) -> CascadeResult:
    """Score an image or volume with a trained cascade.

    ``case`` reuses prepared maps/candidates; its feature context is switched
    to the model's normalization mode.  Candidate ``prob`` fields receive the
    stage-1 score, overwritten by the stage-2 score for stage-1 survivors.
    """
    check_layout(model)
    params = params or model_params(model)
    if case is None:
        case = prepare_case(data, params, jobs)
    ctx = case.ctx
    if ctx.params != params.features:
        ctx = ctx.with_params(params.features)
    cands = ctx.cands
    n = len(cands)
    p1 = model.stage1.predict_batch(np.hstack([ctx.sa(), ctx.sn1()])) if n else np.zeros(0)
    for c, p in zip(cands, p1):
        c.prob = float(p)
    ids1 = np.nonzero(keep_mask(p1, model.stage1.threshold))[0]
    sub = ctx.subset(ids1)
    p2 = model.stage2.predict_batch(_stage2_matrix(sub)) if len(ids1) else np.zeros(0)
    for c, p in zip(sub.cands, p2):
        c.prob = float(p)
    keep2 = np.nonzero(keep_mask(p2, model.stage2.threshold))[0]
    ids2 = ids1[keep2]
    sub2 = sub.subset(keep2)
    hyps, X3 = _hypotheses(sub2, params)
    p3 = model.stage3.predict_batch(X3) if hyps else np.zeros(0)
    out = []
    for h, x, p in zip(hyps, X3, p3):
        h.features, h.prob = x, float(p)
        out.append(_remap(h, ids2))
    dets = select_detections(out, model.stage3.threshold) if model.stage3.threshold < 1.0 else []
    counts = {"candidates": n, "stage1": int(len(ids1)), "stage2": int(len(ids2)),
              "hypotheses": len(out), "detections": len(dets)}
    return CascadeResult(cands, p1, ids1, p2, ids2, out, dets, case.is_volume, counts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainCase:
    case: Case
    truths: list
    fold: int
    labels: np.ndarray


def _labels(case: Case, truths, rule: str) -> np.ndarray:
    depth = 0.5 * case.stack.spacing[2] + 1e-9
    return np.array([candidate_is_positive(c, truths, rule, depth_mm=depth) for c in case.cands],
                    dtype=np.int64)


def prepare_training_cases(dataset, params: PipelineParams, cfg: TrainConfig,
                           jobs: int = 1) -> list[TrainCase]:
    """``dataset``: sequence of ``(image_or_volume, truths)``; case ``i`` lands in fold ``i % K``."""
    items = []
    k = max(cfg.cv_folds, 1)
    for i, (data, truths) in enumerate(dataset):
        items.append((data, truths, i % k))
        if cfg.augment_local_mean and isinstance(data, Image2D):
            items.append((subtract_local_mean(data, params.local_mean_radius_mm), truths, i % k))

    def work(item):
        data, truths, fold = item
        case = prepare_case(data, params, dtype=np.float32)
        return TrainCase(case, truths, fold, _labels(case, truths, cfg.label_rule))

    return pmap(work, items, jobs)


def stage_seed(seed: int, stage: int, fold: int = -1) -> int:
    return int(np.random.SeedSequence([int(seed), stage, fold + 1]).generate_state(1)[0])


def _fit_stage(X, y, folds, cfg: TrainConfig, seed: int, stage: int, names):
    """Final forest on all rows plus out-of-fold scores for threshold setting."""
    forest = train_forest(X, y, cfg.forest, stage_seed(seed, stage), names, stage)
    if cfg.cv_folds == 0:
        return forest, forest.predict_batch(X)
    oof = np.empty(len(y))
    for f in range(cfg.cv_folds):
        test = folds == f
        if not test.any():
            continue
        train = ~test
        if len(np.unique(y[train])) < 2:
            oof[test] = forest.predict_batch(X[test])
            continue
        part = train_forest(X[train], y[train], cfg.forest, stage_seed(seed, stage, f), names, stage)
        oof[test] = part.predict_batch(X[test])
    return forest, oof


def _require_both(y, what: str, detail: str) -> None:
    npos = int(np.sum(y))
    if npos == 0:
        raise ValueError(f"no positive {what} for training ({detail})")
    if npos == len(y):
        raise ValueError(f"no negative {what} for training ({detail})")


def train_cascade(dataset, params: PipelineParams | None = None, cfg: TrainConfig | None = None,
                  seed: int = 0, jobs: int = 1, cases: list[TrainCase] | None = None) -> CascadeModel:
    """Sequential stage training on survivors of the previous stage.

    Each stage threshold keeps ``cfg.target_sensitivity`` of the positive
    training samples, measured on out-of-fold scores.
    """
    params = params or PipelineParams()
    cfg = cfg or TrainConfig()
    if cases is None:
        if not len(dataset):
            raise ValueError("empty dataset")
        cases = prepare_training_cases(dataset, params, cfg, jobs)
    if not cases:
        raise ValueError("empty dataset")
    ctxs = [tc.case.ctx if tc.case.ctx.params == params.features
            else tc.case.ctx.with_params(params.features) for tc in cases]
    n_members = sum(len(t.members) for tc in cases for t in tc.truths)
    n_cands = sum(len(c.cands) for c in ctxs)
    diag = f"{len(cases)} cases, {n_cands} candidates, {n_members} truth members"

    # stage 1
    X1 = np.vstack([np.hstack([c.sa(), c.sn1()]) for c in ctxs] or [np.zeros((0, 50))])
    y1 = np.concatenate([tc.labels for tc in cases])
    f1 = np.concatenate([np.full(len(tc.labels), tc.fold) for tc in cases])
    _require_both(y1, "candidates", diag)
    forest1, oof1 = _fit_stage(X1, y1, f1, cfg, seed, 1, STAGE1_NAMES)
    forest1.threshold = sensitivity_threshold(oof1[y1 == 1], cfg.target_sensitivity)
    log.info("stage 1: %d candidates (%d positive), threshold %.6g", len(y1), int(y1.sum()),
             forest1.threshold)

    # stage 2 on stage-1 survivors, neighborhoods rebuilt over survivors
    subs, X2, y2, f2 = [], [], [], []
    off = 0
    for tc, ctx in zip(cases, ctxs):
        n = len(ctx.cands)
        p = oof1[off:off + n]
        off += n
        ids = np.nonzero(keep_mask(p, forest1.threshold))[0]
        sub = ctx.subset(ids)
        subs.append((ctx, sub, ids, p))
        if len(ids):
            X2.append(_stage2_matrix(sub))
            y2.append(tc.labels[ids])
            f2.append(np.full(len(ids), tc.fold))
    X2 = np.vstack(X2) if X2 else np.zeros((0, len(STAGE2_NAMES)))
    y2 = np.concatenate(y2) if y2 else np.zeros(0, dtype=np.int64)
    f2 = np.concatenate(f2) if f2 else np.zeros(0, dtype=np.int64)
    _require_both(y2, "stage-1 survivors", diag)
    forest2, oof2 = _fit_stage(X2, y2, f2, cfg, seed, 2, STAGE2_NAMES)
    forest2.threshold = sensitivity_threshold(oof2[y2 == 1], cfg.target_sensitivity)
    log.info("stage 2: %d survivors (%d positive), threshold %.6g", len(y2), int(y2.sum()),
             forest2.threshold)

    # stage 3 on group hypotheses over stage-2 survivors, plus (``union``) hypotheses over
    # a wider pool rescored by stage 2, as if stage 1 had kept its top-K candidates
    X3, y3, f3 = [], [], []
    off = 0
    for tc, (ctx, sub, ids1, p1) in zip(cases, subs):
        n = len(sub.cands)
        p = oof2[off:off + n]
        off += n
        for c, pv in zip(sub.cands, p):
            c.prob = float(pv)
        keep = np.nonzero(keep_mask(p, forest2.threshold))[0]
        seen = set()

        def add(ctx_, ids):
            hyps, X = _hypotheses(ctx_, params)
            for h, x in zip(hyps, X):
                key = tuple(int(ids[i]) for i in h.member_ids)
                if key in seen:
                    continue
                seen.add(key)
                X3.append(x)
                y3.append(int(any(cfg.hit.hits(h.centroid(ctx_.cands), t) for t in tc.truths)))
                f3.append(tc.fold)

        add(sub.subset(keep), ids1[keep])
        if cfg.stage3_pool == "union":
            top = np.argsort(-p1, kind="stable")[:cfg.stage3_pool_top]
            pool = np.union1d(top, ids1)
            pctx = ctx.subset(pool)
            if len(pool):
                for c, pv in zip(pctx.cands, forest2.predict_batch(_stage2_matrix(pctx))):
                    c.prob = float(pv)
                add(pctx, pool)
    X3 = np.array(X3).reshape(len(X3), len(STAGE3_NAMES))
    y3 = np.array(y3, dtype=np.int64)
    f3 = np.array(f3, dtype=np.int64)
    _require_both(y3, "group hypotheses", diag)
    forest3, oof3 = _fit_stage(X3, y3, f3, cfg, seed, 3, STAGE3_NAMES)
    forest3.threshold = sensitivity_threshold(oof3[y3 == 1], cfg.target_sensitivity)
    log.info("stage 3: %d hypotheses (%d positive), threshold %.6g", len(y3), int(y3.sum()),
             forest3.threshold)

    meta = {"pipeline": params.to_dict(), "training": cfg.to_dict(), "seed": int(seed),
            "samples": {"stage1": [int(len(y1)), int(y1.sum())],
                        "stage2": [int(len(y2)), int(y2.sum())],
                        "stage3": [int(len(y3)), int(y3.sum())]}}
    return CascadeModel(forest1, forest2, forest3, params=meta)
