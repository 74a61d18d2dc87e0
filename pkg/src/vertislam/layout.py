"""Multi-scale fiducial marker layouts for the vertiport TLOF.

Two layouts are supported:

* non-nested: twenty Standard36h11 tags at three scales 1:5:28 (one large tag
  in the middle of the touchdown and liftoff area, medium tags at its corners
  and small tags along its border);
* nested: three concentric Custom52h12 tags at scales 1:4:30, each smaller
  tag sitting in the free center of the next larger one.

All markers lie in the z=0 plane of the layout frame with their normal along
+z. Marker corners are ordered top-left, top-right, bottom-right, bottom-left
with "top" meaning -y in the marker frame, which is counter-clockwise when
viewed from +z.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import LayoutError
from .geometry import Pose

NON_NESTED_SCALES = (1.0, 5.0, 28.0)
NESTED_SCALES = (1.0, 4.0, 30.0)
NON_NESTED_COUNT = 20
DEFAULT_PARTITION = (15, 4, 1)  # small, medium, large


class MarkerFamily(str, enum.Enum):
    Standard36h11 = "Standard36h11"
    Custom52h12 = "Custom52h12"


class LayoutKind(str, enum.Enum):
    NonNested = "NonNested"
    Nested = "Nested"


def square_corners(side: float) -> np.ndarray:
    """Corners of a square marker of the given side in its own frame, ``(4, 3)``."""
    h = 0.5 * side
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


@dataclass(frozen=True)
class MarkerSpec:
    id: int
    family: MarkerFamily
    side: float
    pose: Pose
    parent: int | None = None

    def __post_init__(self):
        if not self.side > 0:
            raise LayoutError(f"marker {self.id}: side must be positive, got {self.side}")
        normal = self.pose.R[:, 2]
        if abs(normal[2] - 1.0) > 1e-9 or abs(self.pose.t[2]) > 1e-12:
            raise LayoutError(f"marker {self.id}: pose must keep the marker in the z=0 plane facing +z")

    def footprint(self) -> np.ndarray:
        """Corner xy coordinates in the layout frame, ``(4, 2)``."""
        return self.pose.act(square_corners(self.side))[:, :2]


@dataclass(frozen=True)
class MarkerLayout:
    kind: LayoutKind
    base_side: float
    markers: tuple[MarkerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(self.markers))
        self.validate()

    def validate(self) -> None:
        ids = [m.id for m in self.markers]
        if len(set(ids)) != len(ids):
            raise LayoutError("marker ids must be unique")
        sides = sorted({m.side for m in self.markers})
        if self.kind is LayoutKind.NonNested:
            if len(self.markers) != NON_NESTED_COUNT:
                raise LayoutError(f"non-nested layout needs {NON_NESTED_COUNT} markers, got {len(self.markers)}")
            _check_ratio(sides, NON_NESTED_SCALES)
            fps = [m.footprint() for m in self.markers]
            for i in range(len(fps)):
                for j in range(i + 1, len(fps)):
                    if squares_overlap(fps[i], fps[j]):
                        raise LayoutError(f"markers {ids[i]} and {ids[j]} overlap")
        else:
            if len(self.markers) != 3:
                raise LayoutError(f"nested layout needs 3 markers, got {len(self.markers)}")
            _check_ratio(sides, NESTED_SCALES)
            by_side = sorted(self.markers, key=lambda m: m.side)
            for child, parent in zip(by_side[:-1], by_side[1:]):
                if child.parent != parent.id:
                    raise LayoutError(f"marker {child.id} must have parent {parent.id}")
                if not footprint_inside(child.footprint(), parent.footprint()):
                    raise LayoutError(f"marker {child.id} is not inside its parent {parent.id}")
            if by_side[-1].parent is not None:
                raise LayoutError("the largest nested marker cannot have a parent")
        if abs(max(sides) - self.base_side) > 1e-12 * self.base_side:
            raise LayoutError("base_side must equal the largest marker side")

    def get(self, marker_id: int) -> MarkerSpec:
        for m in self.markers:
            if m.id == marker_id:
                return m
        raise LayoutError(f"unknown marker id {marker_id}")

    def __contains__(self, marker_id) -> bool:
        return any(m.id == marker_id for m in self.markers)

    @property
    def ids(self) -> list[int]:
        return [m.id for m in self.markers]

    def side_table(self) -> dict[int, float]:
        return {m.id: m.side for m in self.markers}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "base_side": self.base_side,
            "markers": [
                {"id": m.id, "family": m.family.value, "side": m.side,
                 "pose": m.pose.to_dict(), "parent": m.parent}
                for m in self.markers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MarkerLayout:
        markers = tuple(
            MarkerSpec(int(m["id"]), MarkerFamily(m["family"]), float(m["side"]),
                       Pose.from_dict(m["pose"]), None if m.get("parent") is None else int(m["parent"]))
            for m in d["markers"]
        )
        return cls(LayoutKind(d["kind"]), float(d["base_side"]), markers)


def _check_ratio(sides: Sequence[float], scales: Sequence[float]) -> None:
    if len(sides) != 3:
        raise LayoutError(f"expected 3 distinct marker sides, got {len(sides)}")
    ref = sides[-1] / scales[-1]
    for s, k in zip(sides, scales):
        if abs(s / ref - k) > 1e-9 * k:
            raise LayoutError(f"side ratios {[s / ref for s in sides]} do not match {list(scales)}")


def _separated(a: np.ndarray, b: np.ndarray) -> bool:
    # separating axis test over the edge normals of a
    for i in range(len(a)):
        e = a[(i + 1) % len(a)] - a[i]
        n = np.array([-e[1], e[0]])
        pa, pb = a @ n, b @ n
        if pa.max() <= pb.min() or pb.max() <= pa.min():
            return True
    return False


def squares_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """True if two convex footprints share interior area."""
    return not (_separated(a, b) or _separated(b, a))


def footprint_inside(inner: np.ndarray, outer: np.ndarray) -> bool:
    """Strict containment of a footprint in a convex counter-clockwise polygon."""
    for i in range(len(outer)):
        e = outer[(i + 1) % len(outer)] - outer[i]
        rel = inner - outer[i]
        cross = e[0] * rel[:, 1] - e[1] * rel[:, 0]
        if np.any(cross <= 0):
            return False
    return True


def _ring_slots(half: float, counts: Sequence[int]) -> list[tuple[float, float]]:
    # evenly spaced points strictly between the corners on each side of a square ring,
    # walking counter-clockwise from the (+half, -half) corner
    corners = [(half, -half), (half, half), (-half, half), (-half, -half)]
    out = []
    for side, n in enumerate(counts):
        a = np.array(corners[side])
        b = np.array(corners[(side + 1) % 4])
        for j in range(n):
            p = a + (b - a) * (j + 1) / (n + 1)
            out.append((float(p[0]), float(p[1])))
    return out


def _split(n: int, parts: int = 4) -> list[int]:
    return [n // parts + (1 if i < n % parts else 0) for i in range(parts)]


def generate_non_nested(
    base_side: float = 1.0,
    seed_id: int = 0,
    partition: Sequence[int] = DEFAULT_PARTITION,
    ring_ratio: float = 0.7,
    family: MarkerFamily = MarkerFamily.Standard36h11,
) -> MarkerLayout:
    """Build the 20-marker layout at scales 1:5:28.

    Args:
        base_side: side of the largest marker in meters.
        seed_id: id of the first marker; ids are consecutive from here.
        partition: number of (small, medium, large) markers, summing to 20.
        ring_ratio: half-size of the ring carrying the medium and small
            markers, as a fraction of ``base_side``.
    """
    if not base_side > 0:
        raise LayoutError("base_side must be positive")
    partition = tuple(int(n) for n in partition)
    if len(partition) != 3 or min(partition) < 1:
        raise LayoutError("partition must use exactly 3 scales with at least one marker each")
    if sum(partition) != NON_NESTED_COUNT:
        raise LayoutError(f"partition {partition} must total {NON_NESTED_COUNT}")
    n_small, n_medium, n_large = partition
    s_small, s_medium, s_large = (base_side * k / NON_NESTED_SCALES[-1] for k in NON_NESTED_SCALES)

    # large markers in a row through the origin
    gap = 0.1 * s_large
    row = [(i - (n_large - 1) / 2.0) * (s_large + gap) for i in range(n_large)]
    half = max(ring_ratio * base_side, max(abs(x) for x in row) + 0.5 * s_large + s_medium)

    placements: list[tuple[float, float, float]] = [(x, 0.0, s_large) for x in row]
    corner_pts = [(half, -half), (half, half), (-half, half), (-half, -half)]
    n_corner = min(4, n_medium)
    placements += [(x, y, s_medium) for x, y in corner_pts[:n_corner]]
    border = [s_medium] * (n_medium - n_corner) + [s_small] * n_small
    slots = _ring_slots(half, _split(len(border)))
    placements += [(x, y, s) for (x, y), s in zip(slots, border)]

    markers = [
        MarkerSpec(seed_id + i, family, s, Pose.from_translation((x, y, 0.0)))
        for i, (x, y, s) in enumerate(placements)
    ]
    return MarkerLayout(LayoutKind.NonNested, s_large, tuple(markers))


def generate_nested(
    base_side: float = 1.0,
    seed_id: int = 0,
    family: MarkerFamily = MarkerFamily.Custom52h12,
) -> MarkerLayout:
    """Build the three-marker concentric layout at scales 1:4:30."""
    if not base_side > 0:
        raise LayoutError("base_side must be positive")
    scales = sorted(NESTED_SCALES, reverse=True)
    markers = []
    for i, k in enumerate(scales):
        parent = seed_id + i - 1 if i > 0 else None
        markers.append(MarkerSpec(seed_id + i, family, base_side * k / scales[0], Pose(), parent))
    return MarkerLayout(LayoutKind.Nested, base_side, tuple(markers))


def marker_corners_world(layout: MarkerLayout, marker_id: int) -> np.ndarray:
    """Corners of a marker in the layout frame, ``(4, 3)``, in TL, TR, BR, BL order."""
    m = layout.get(marker_id)
    return m.pose.act(square_corners(m.side))


def all_corners(layout: MarkerLayout, ids: Iterable[int] | None = None) -> np.ndarray:
    ids = layout.ids if ids is None else list(ids)
    return np.stack([marker_corners_world(layout, i) for i in ids])
