"""Group hypotheses by agglomerative (single-linkage) clustering, and final selection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import NeighborhoodIndex


@dataclass(frozen=True)
class DissimilarityParams:
    a: float = 1.0
    b: float = 1.0
    l_max: float = 10.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.l_max <= 0:
            raise ValueError("need a >= 0, b >= 0, l_max > 0")


@dataclass(frozen=True)
class GroupingParams:
    min_group_size: int = 3
    # bounding-box diagonal of member centers, mm
    max_group_extent: float = 40.0


@dataclass
class GroupHypothesis:
    member_ids: tuple[int, ...]
    pair_links: list[tuple[int, int, float]]
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]
    features: np.ndarray | None = None
    prob: float = 0.0

    def overlaps(self, other: "GroupHypothesis") -> bool:
        if set(self.member_ids) & set(other.member_ids):
            return True
        return all(self.bbox_min[k] <= other.bbox_max[k] and other.bbox_min[k] <= self.bbox_max[k]
                   for k in range(3))

    def centroid(self, cands) -> tuple[float, float, float]:
        pts = np.array([[cands[i].x, cands[i].y, cands[i].z] for i in self.member_ids])
        return tuple(float(v) for v in pts.mean(axis=0))


def distance(ci, cj) -> float:
    return math.sqrt((ci.x - cj.x) ** 2 + (ci.y - cj.y) ** 2 + (ci.z - cj.z) ** 2)


def dissimilarity(ci, cj, params: DissimilarityParams | None = None) -> float:
    """Spatial distance, probability disagreement and joint unlikeliness, combined.

    Only defined for pairs within ``l_max``.
    """
    params = params or DissimilarityParams()
    dist = distance(ci, cj)
    if dist > params.l_max * (1.0 + 1e-12):
        raise ValueError(f"dissimilarity undefined for dist {dist:.4g} > l_max {params.l_max}")
    return dist / params.l_max + params.a * abs(ci.prob - cj.prob) \
        + params.b * (1.0 - 0.5 * (ci.prob + cj.prob))


def _bbox(cands, members):
    pts = np.array([[cands[i].x, cands[i].y, cands[i].z] for i in members])
    return tuple(pts.min(axis=0).tolist()), tuple(pts.max(axis=0).tolist())


def linked_pairs(cands, index: NeighborhoodIndex, params: DissimilarityParams):
    """All (d, i, j) with i < j and dist <= l_max, sorted by (d, i, j)."""
    out = [(dissimilarity(cands[i], cands[j], params), int(i), int(j)) for i, j in index.pairs]
    out.sort()
    return out


def agglomerate(cands, index: NeighborhoodIndex, params: DissimilarityParams | None = None,
                gparams: GroupingParams | None = None) -> list[GroupHypothesis]:
    """Single-linkage merging in ascending dissimilarity.

    Every merge whose result has at least ``min_group_size`` members and a
    bounding-box diagonal within ``max_group_extent`` emits a hypothesis, so
    nested hypotheses along the merge tree are all returned.
    """
    params = params or DissimilarityParams()
    gparams = gparams or GroupingParams()
    n = len(cands)
    parent = list(range(n))
    members = {i: [i] for i in range(n)}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    links = linked_pairs(cands, index, params)
    link_d = {(i, j): d for d, i, j in links}
    hyps = []
    for d, i, j in links:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        if len(members[ri]) < len(members[rj]) or (len(members[ri]) == len(members[rj]) and rj < ri):
            ri, rj = rj, ri
        parent[rj] = ri
        members[ri] = members[ri] + members.pop(rj)
        mem = tuple(sorted(members[ri]))
        if len(mem) < gparams.min_group_size:
            continue
        lo, hi = _bbox(cands, mem)
        if math.dist(lo, hi) > gparams.max_group_extent:
            continue
        mset = set(mem)
        plinks = []
        for a in mem:
            for b in index.neighbors[a]:
                b = int(b)
                if b > a and b in mset:
                    plinks.append((a, b, link_d[(a, b)]))
        hyps.append(GroupHypothesis(mem, plinks, lo, hi))
    return hyps


def _selection_key(h: GroupHypothesis):
    return (-h.prob, -len(h.member_ids), tuple(h.bbox_min) + tuple(h.bbox_max), h.member_ids)


def select_detections(hyps, threshold: float = 0.0) -> list[GroupHypothesis]:
    """Greedy: best remaining hypothesis at or above threshold, drop overlaps, repeat."""
    chosen: list[GroupHypothesis] = []
    for h in sorted(hyps, key=_selection_key):
        if h.prob < threshold:
            break
        if any(h.overlaps(c) for c in chosen):
            continue
        chosen.append(h)
    return chosen


def detections_to_json(dets, cands=None, member_ids=None) -> list[dict]:
    """Serializable records; ``member_ids`` may remap hypothesis ids to output ids."""
    out = []
    for h in dets:
        ids = [int(member_ids[i]) if member_ids is not None else int(i) for i in h.member_ids]
        out.append({"members": ids, "prob": float(h.prob),
                    "bbox_mm": {"min": [float(v) for v in h.bbox_min],
                                "max": [float(v) for v in h.bbox_max]}})
    return out


def write_detections(path, records) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
