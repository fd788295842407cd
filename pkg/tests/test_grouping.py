import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccad.candidates import Candidate
from mccad.features import build_neighborhood
from mccad.grouping import (
    DissimilarityParams, GroupHypothesis, GroupingParams, agglomerate, detections_to_json,
    dissimilarity, select_detections, write_detections,
)


def cand(x, y, p, z=0.0):
    return Candidate(x, y, z, 0, 0, 0, -1.0, -1.0, 0.0, 0.2, 1.0, p)


def test_dissimilarity_examples():
    assert dissimilarity(cand(0, 0, 1.0), cand(0, 0, 1.0)) == 0.0
    assert dissimilarity(cand(0, 0, 0.8), cand(3, 4, 0.6)) == pytest.approx(1.0, abs=1e-12)
    assert dissimilarity(cand(0, 0, 0.0), cand(10, 0, 0.0)) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError, match="undefined"):
        dissimilarity(cand(0, 0, 0.5), cand(10.5, 0, 0.5))
    with pytest.raises(ValueError):
        DissimilarityParams(a=-1)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0, 7), y=st.floats(0, 7), pi=st.floats(0, 1), pj=st.floats(0, 1),
       a=st.floats(0, 3), b=st.floats(0, 3))
def test_dissimilarity_symmetric_and_ranged(x, y, pi, pj, a, b):
    prm = DissimilarityParams(a, b, 10.0)
    ci, cj = cand(0, 0, pi), cand(x, y, pj)
    d = dissimilarity(ci, cj, prm)
    assert d == dissimilarity(cj, ci, prm)
    assert -1e-12 <= d <= 1 + a + b + 1e-12


@settings(max_examples=200, deadline=None)
@given(r=st.floats(0, 4), dr=st.floats(0, 4), pi=st.floats(0, 1), pj=st.floats(0, 1),
       shift=st.floats(0, 0.5))
def test_dissimilarity_monotone(r, dr, pi, pj, shift):
    base = dissimilarity(cand(0, 0, pi), cand(r, 0, pj))
    assert dissimilarity(cand(0, 0, pi), cand(r + dr, 0, pj)) >= base - 1e-12
    # lowering both probabilities lowers the mean p and leaves |dp| fixed
    lo = min(shift, pi, pj)
    assert dissimilarity(cand(0, 0, pi - lo), cand(r, 0, pj - lo)) >= base - 1e-12


# -- agglomeration ------------------------------------------------------------

def brute_single_linkage(cands, prm, gp):
    """O(n^3) reference: repeatedly merge the closest pair of clusters.

    Cluster distance is the minimum linked-pair d; ties go to the smallest
    (d, i, j) link, the same total order the implementation uses.
    """
    n = len(cands)
    links = {}
    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(cands[i].center, cands[j].center) <= prm.l_max:
                links[(i, j)] = dissimilarity(cands[i], cands[j], prm)
    clusters = [{i} for i in range(n)]
    out = []
    while True:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            for i in clusters[a]:
                for j in clusters[b]:
                    key = (min(i, j), max(i, j))
                    if key in links:
                        cand_key = (links[key],) + key
                        if best is None or cand_key < best[0]:
                            best = (cand_key, a, b)
        if best is None:
            break
        _, a, b = best
        merged = clusters[a] | clusters[b]
        clusters = [c for k, c in enumerate(clusters) if k not in (a, b)] + [merged]
        pts = np.array([cands[i].center for i in merged])
        if len(merged) >= gp.min_group_size and \
                math.dist(pts.min(axis=0), pts.max(axis=0)) <= gp.max_group_extent:
            out.append(tuple(sorted(merged)))
    return out


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), vol=st.booleans())
def test_agglomerate_matches_reference(seed, vol):
    rng = np.random.default_rng(seed)
    cs = [cand(*rng.uniform(0, 25, 2), float(rng.uniform()), z=float(rng.integers(0, 4)) if vol else 0.0)
          for _ in range(12)]
    prm, gp = DissimilarityParams(), GroupingParams(max_group_extent=25.0)
    hyps = agglomerate(cs, build_neighborhood(cs, prm.l_max), prm, gp)
    assert [h.member_ids for h in hyps] == brute_single_linkage(cs, prm, gp)
    for h in hyps:
        mset = set(h.member_ids)
        expect = [(i, j) for i, j in itertools.combinations(sorted(mset), 2)
                  if math.dist(cs[i].center, cs[j].center) <= prm.l_max]
        assert [(i, j) for i, j, _ in h.pair_links] == expect
        for i, j, d in h.pair_links:
            assert d == dissimilarity(cs[i], cs[j], prm)


def test_agglomerate_examples():
    rng = np.random.default_rng(0)
    disk = []
    while len(disk) < 5:
        x, y = rng.uniform(-3, 3, 2)
        if x * x + y * y <= 9:
            disk.append(cand(10 + x, 10 + y, 0.9))
    hyps = agglomerate(disk, build_neighborhood(disk, 10.0))
    assert any(h.member_ids == (0, 1, 2, 3, 4) for h in hyps)
    clumps = [cand(x, 0, 0.9) for x in (0, 1, 2, 3)] + [cand(x, 0, 0.9) for x in (33, 34, 35, 36)]
    for h in agglomerate(clumps, build_neighborhood(clumps, 10.0)):
        assert set(h.member_ids) <= {0, 1, 2, 3} or set(h.member_ids) <= {4, 5, 6, 7}
    assert agglomerate([], build_neighborhood([], 10.0)) == []


def test_agglomerate_permutation_invariant():
    rng = np.random.default_rng(3)
    cs = [cand(*rng.uniform(0, 20, 2), round(float(rng.uniform()), 2)) for _ in range(15)]
    base = {tuple(sorted((cs[i].x, cs[i].y) for i in h.member_ids))
            for h in agglomerate(cs, build_neighborhood(cs, 10.0))}
    perm = rng.permutation(15)
    shuffled = [cs[i] for i in perm]
    got = {tuple(sorted((shuffled[i].x, shuffled[i].y) for i in h.member_ids))
           for h in agglomerate(shuffled, build_neighborhood(shuffled, 10.0))}
    assert got == base


# -- selection ----------------------------------------------------------------

def hyp(members, lo, hi, p):
    return GroupHypothesis(tuple(members), [], tuple(lo), tuple(hi), prob=p)


def test_select_examples():
    a = hyp((0, 1, 2), (0, 0, 0), (1, 1, 0), 0.6)
    b = hyp((0, 1, 2, 3), (0, 0, 0), (2, 2, 0), 0.8)
    assert select_detections([a, b]) == [b]
    c = hyp((5, 6, 7), (10, 10, 0), (11, 11, 0), 0.7)
    d = hyp((8, 9, 10), (20, 20, 0), (21, 21, 0), 0.2)
    assert select_detections([c, d, a]) == [c, a, d]
    assert select_detections([c, d, a], threshold=0.5) == [c, a]


def brute_greedy(hyps, threshold):
    """Simulate the loop literally: pick the best, delete overlaps, repeat."""
    pool = [h for h in hyps if h.prob >= threshold]
    out = []
    while pool:
        best = pool[0]
        for h in pool[1:]:
            kb = (-best.prob, -len(best.member_ids), best.bbox_min + best.bbox_max, best.member_ids)
            kh = (-h.prob, -len(h.member_ids), h.bbox_min + h.bbox_max, h.member_ids)
            if kh < kb:
                best = h
        out.append(best)
        pool = [h for h in pool if h is not best and not (
            set(h.member_ids) & set(best.member_ids) or
            all(h.bbox_min[k] <= best.bbox_max[k] and best.bbox_min[k] <= h.bbox_max[k] for k in range(3)))]
    return out


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.floats(0, 0.8))
def test_select_matches_greedy_simulation(seed, t):
    rng = np.random.default_rng(seed)
    hyps = []
    for _ in range(10):
        m = tuple(sorted(rng.choice(30, size=int(rng.integers(3, 6)), replace=False).tolist()))
        lo = rng.uniform(0, 20, 2)
        hi = lo + rng.uniform(0.5, 5, 2)
        hyps.append(hyp(m, (*lo, 0.0), (*hi, 0.0), round(float(rng.uniform()), 1)))
    got = select_detections(hyps, t)
    assert got == brute_greedy(hyps, t)
    for a, b in itertools.combinations(got, 2):
        assert not set(a.member_ids) & set(b.member_ids)


def test_detection_json(tmp_path):
    h = hyp((2, 0, 1), (0, 0, 0), (1, 2, 3), 0.5)
    rec = detections_to_json([h], member_ids=[10, 11, 12])
    assert rec == [{"members": [12, 10, 11], "prob": 0.5,
                    "bbox_mm": {"min": [0.0, 0.0, 0.0], "max": [1.0, 2.0, 3.0]}}]
    write_detections(tmp_path / "d.json", rec)
    assert json.loads((tmp_path / "d.json").read_text()) == rec
