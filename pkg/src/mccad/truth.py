"""Ground-truth groups and the detection hit rule."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import convex_hull, distance_to_hull


@dataclass(frozen=True)
class TruthMember:
    x: float
    y: float
    z: float
    r: float


@dataclass
class TruthGroup:
    members: list[TruthMember]

    def __post_init__(self):
        if len(self.members) < 3:
            raise ValueError("a truth group needs at least 3 members")
        if any(m.r <= 0 for m in self.members):
            raise ValueError("member radii must be positive")

    @property
    def hull(self) -> list[tuple[float, float]]:
        return convex_hull([(m.x, m.y) for m in self.members])

    @property
    def centroid(self) -> tuple[float, float, float]:
        p = np.array([[m.x, m.y, m.z] for m in self.members])
        return tuple(float(v) for v in p.mean(axis=0))

    def to_json(self) -> dict:
        return {"members": [{"x_mm": m.x, "y_mm": m.y, "z_mm": m.z, "r_mm": m.r}
                            for m in self.members]}

    @classmethod
    def from_json(cls, d) -> "TruthGroup":
        return cls([TruthMember(float(m["x_mm"]), float(m["y_mm"]), float(m.get("z_mm", 0.0)),
                                float(m["r_mm"])) for m in d["members"]])


@dataclass(frozen=True)
class HitCriterion:
    hull_margin_mm: float = 1.0
    centroid_radius_mm: float = 5.0
    # a hull hit in a volume also needs the detection within this depth of the group
    depth_tolerance_mm: float = 5.0

    def hits(self, point, truth: TruthGroup) -> bool:
        x, y, z = point
        cx, cy, cz = truth.centroid
        if math.dist((x, y, z), (cx, cy, cz)) <= self.centroid_radius_mm:
            return True
        if abs(z - cz) > self.depth_tolerance_mm:
            return False
        return distance_to_hull((x, y), truth.hull) <= self.hull_margin_mm


def candidate_is_positive(c, truths, rule: str = "member", margin_mm: float = 1.0,
                          depth_mm: float = 0.5) -> bool:
    """Training label of a candidate.

    ``rule="member"``: center inside a member disk (within ``depth_mm`` of the
    member's depth); ``rule="hull"``: inside a group hull dilated by ``margin_mm``.
    """
    if rule == "member":
        return any(abs(c.z - m.z) <= depth_mm and math.hypot(c.x - m.x, c.y - m.y) <= m.r
                   for t in truths for m in t.members)
    if rule == "hull":
        for t in truths:
            zs = [m.z for m in t.members]
            if min(zs) - depth_mm <= c.z <= max(zs) + depth_mm and \
                    distance_to_hull((c.x, c.y), t.hull) <= margin_mm:
                return True
        return False
    raise ValueError(f"unknown label rule {rule!r}")


def write_truth(path, truths) -> None:
    with open(path, "w") as fh:
        json.dump([t.to_json() for t in truths], fh, indent=1)
        fh.write("\n")


def read_truth(path) -> list[TruthGroup]:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ValueError(f"{path}: truth file must hold a JSON array")
    return [TruthGroup.from_json(d) for d in doc]
