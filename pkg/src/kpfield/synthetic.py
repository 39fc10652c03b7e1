"""Synthetic desk-scale shapes with exact surface ground truth.

Each generator draws points uniformly on an analytic surface and returns the
exact distance-to-surface function alongside the cloud.  Occupancy labels and
corner locations therefore need no mesh and no approximation, which makes
these shapes the test bed for the whole pipeline: train on a shape, then
check the learned fields against closed-form answers.

The occupancy convention is shell-based.  A query is "occupied" when it lies
within a given shell thickness of the surface manifold; the enclosed volume
of a closed shape does not count.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from kpfield.geometry import PointCloud, _as_points

KINDS = ("sphere", "box", "cylinder", "l-bracket", "two-box")

_DEFAULTS: dict[str, dict[str, float]] = {
    "sphere": {"radius": 0.4},
    "box": {"half_x": 0.40, "half_y": 0.28, "half_z": 0.20},
    "cylinder": {"radius": 0.3, "half_height": 0.4},
    "l-bracket": {"leg": 0.8, "width": 0.3, "height": 0.3},
    "two-box": {
        "a_half_x": 0.30,
        "a_half_y": 0.22,
        "a_half_z": 0.16,
        "b_half_x": 0.18,
        "b_half_y": 0.26,
        "b_half_z": 0.34,
        "separation": 0.9,
        "b_offset_y": 0.08,
        "b_offset_z": -0.06,
    },
}


@dataclass(frozen=True)
class ShapeSpec:
    """Recipe for one synthetic shape."""

    kind: str
    n_points: int = 2048
    seed: int = 0
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.n_points < 1:
            raise ValueError(f"n_points must be positive, got {self.n_points}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(
                f"unknown parameter(s) {sorted(unknown)} for kind {self.kind!r}; "
                f"valid keys: {sorted(_DEFAULTS[self.kind])}"
            )

    def resolved_params(self) -> dict[str, float]:
        merged = dict(_DEFAULTS[self.kind])
        for key, value in self.params.items():
            merged[key] = float(value)
        if not all(np.isfinite(v) for v in merged.values()):
            raise ValueError("shape parameters must be finite")
        return merged


@dataclass(frozen=True)
class ShapeSample:
    """A generated shape: surface samples plus analytic ground truth.

    `surface_distance` maps (M, 3) query points to their exact unsigned
    distance from the surface manifold.  `corners` holds the polyhedron
    vertices for polyhedral kinds and is empty for smooth ones.
    """

    kind: str
    cloud: PointCloud
    corners: np.ndarray
    surface_distance: Callable[[np.ndarray], np.ndarray]

    def occupancy(self, queries: np.ndarray, shell: float) -> np.ndarray:
        """Boolean labels: True where a query is within `shell` of the surface."""
        if shell <= 0:
            raise ValueError(f"shell thickness must be positive, got {shell}")
        return self.surface_distance(queries) <= shell


# --------------------------------------------------------------------------
# rectangular surface patches (shared by all polyhedral kinds)


@dataclass(frozen=True)
class _Rect:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))


def _sample_patches(rects: list[_Rect], n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array([r.area for r in rects])
    idx = rng.choice(len(rects), size=n, p=areas / areas.sum())
    s = rng.uniform(size=(n, 1))
    t = rng.uniform(size=(n, 1))
    origins = np.stack([rects[i].origin for i in idx])
    us = np.stack([rects[i].u for i in idx])
    vs = np.stack([rects[i].v for i in idx])
    return origins + s * us + t * vs


def _patch_distance(rects: list[_Rect], queries: np.ndarray) -> np.ndarray:
    """Exact distance to the union of rectangles: min over per-rect distances."""
    q = _as_points(queries)
    best = np.full(q.shape[0], np.inf)
    for r in rects:
        lu = float(np.linalg.norm(r.u))
        lv = float(np.linalg.norm(r.v))
        eu = r.u / lu
        ev = r.v / lv
        rel = q - r.origin
        cu = np.clip(rel @ eu, 0.0, lu)
        cv = np.clip(rel @ ev, 0.0, lv)
        closest = r.origin + cu[:, None] * eu + cv[:, None] * ev
        best = np.minimum(best, np.linalg.norm(q - closest, axis=1))
    return best


def _box_rects(center: np.ndarray, half: np.ndarray) -> list[_Rect]:
    eye = np.eye(3)
    rects = []
    for axis in range(3):
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            origin = (
                center
                + sign * half[axis] * eye[axis]
                - half[a1] * eye[a1]
                - half[a2] * eye[a2]
            )
            rects.append(_Rect(origin, 2 * half[a1] * eye[a1], 2 * half[a2] * eye[a2]))
    return rects


def _box_corners(center: np.ndarray, half: np.ndarray) -> np.ndarray:
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
    return center + signs * half


# --------------------------------------------------------------------------
# per-kind builders


def _make_sphere(p: dict[str, float], n: int, rng: np.random.Generator) -> ShapeSample:
    radius = p["radius"]
    if radius <= 0:
        raise ValueError("radius must be positive")
    directions = rng.normal(size=(n, 3))
    norms = np.linalg.norm(directions, axis=1)
    while (norms < 1e-12).any():  # essentially unreachable, but exactness matters
        bad = norms < 1e-12
        directions[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(directions, axis=1)
    points = radius * directions / norms[:, None]

    def surface_distance(queries: np.ndarray) -> np.ndarray:
        q = _as_points(queries)
        return np.abs(np.linalg.norm(q, axis=1) - radius)

    return ShapeSample("sphere", PointCloud(points), np.zeros((0, 3)), surface_distance)


def _make_box(p: dict[str, float], n: int, rng: np.random.Generator) -> ShapeSample:
    half = np.array([p["half_x"], p["half_y"], p["half_z"]])
    if (half <= 0).any():
        raise ValueError("box half extents must be positive")
    center = np.zeros(3)
    rects = _box_rects(center, half)
    points = _sample_patches(rects, n, rng)
    return ShapeSample(
        "box",
        PointCloud(points),
        _box_corners(center, half),
        lambda q: _patch_distance(rects, q),
    )


def _make_cylinder(p: dict[str, float], n: int, rng: np.random.Generator) -> ShapeSample:
    radius, half_height = p["radius"], p["half_height"]
    if radius <= 0 or half_height <= 0:
        raise ValueError("radius and half_height must be positive")
    lateral = 2.0 * np.pi * radius * 2.0 * half_height
    cap = np.pi * radius**2
    component = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    u1 = rng.uniform(size=n)
    u2 = rng.uniform(size=n)
    theta = 2.0 * np.pi * u1
    points = np.empty((n, 3))
    on_wall = component == 0
    rho = np.where(on_wall, radius, radius * np.sqrt(u2))
    points[:, 0] = rho * np.cos(theta)
    points[:, 1] = rho * np.sin(theta)
    points[on_wall, 2] = (2.0 * u2[on_wall] - 1.0) * half_height
    points[component == 1, 2] = half_height
    points[component == 2, 2] = -half_height

    def surface_distance(queries: np.ndarray) -> np.ndarray:
        q = _as_points(queries)
        dr = np.hypot(q[:, 0], q[:, 1]) - radius
        dz = np.abs(q[:, 2]) - half_height
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return np.abs(outside + inside)

    return ShapeSample("cylinder", PointCloud(points), np.zeros((0, 3)), surface_distance)


def _make_l_bracket(p: dict[str, float], n: int, rng: np.random.Generator) -> ShapeSample:
    leg, width, height = p["leg"], p["width"], p["height"]
    if min(leg, width, height) <= 0:
        raise ValueError("leg, width and height must be positive")
    if width >= leg:
        raise ValueError(f"width ({width}) must be smaller than leg ({leg})")
    shift = np.array([-leg / 2.0, -leg / 2.0, -height / 2.0])
    # footprint polygon, counterclockwise
    verts = np.array(
        [[0, 0], [leg, 0], [leg, width], [width, width], [width, leg], [0, leg]],
        dtype=np.float64,
    )
    up = np.array([0.0, 0.0, height])
    rects: list[_Rect] = []
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        origin = np.array([a[0], a[1], 0.0]) + shift
        edge = np.array([b[0] - a[0], b[1] - a[1], 0.0])
        rects.append(_Rect(origin, edge, up))
    for z in (0.0, height):
        base = np.array([0.0, 0.0, z]) + shift
        rects.append(_Rect(base, np.array([leg, 0.0, 0.0]), np.array([0.0, width, 0.0])))
        rects.append(
            _Rect(
                base + np.array([0.0, width, 0.0]),
                np.array([width, 0.0, 0.0]),
                np.array([0.0, leg - width, 0.0]),
            )
        )
    points = _sample_patches(rects, n, rng)
    corners = np.array(
        [[vx, vy, z] for z in (0.0, height) for vx, vy in verts], dtype=np.float64
    ) + shift
    return ShapeSample(
        "l-bracket", PointCloud(points), corners, lambda q: _patch_distance(rects, q)
    )


def _make_two_box(p: dict[str, float], n: int, rng: np.random.Generator) -> ShapeSample:
    half_a = np.array([p["a_half_x"], p["a_half_y"], p["a_half_z"]])
    half_b = np.array([p["b_half_x"], p["b_half_y"], p["b_half_z"]])
    if (half_a <= 0).any() or (half_b <= 0).any():
        raise ValueError("box half extents must be positive")
    center_a = np.array([-p["separation"] / 2.0, 0.0, 0.0])
    center_b = np.array([p["separation"] / 2.0, p["b_offset_y"], p["b_offset_z"]])
    lo_gap = (center_a - half_a) - (center_b + half_b)
    hi_gap = (center_b - half_b) - (center_a + half_a)
    if not (np.maximum(lo_gap, hi_gap) > 0).any():
        raise ValueError("the two boxes overlap; increase separation")
    rects = _box_rects(center_a, half_a) + _box_rects(center_b, half_b)
    points = _sample_patches(rects, n, rng)
    corners = np.concatenate(
        [_box_corners(center_a, half_a), _box_corners(center_b, half_b)]
    )
    return ShapeSample(
        "two-box", PointCloud(points), corners, lambda q: _patch_distance(rects, q)
    )


_BUILDERS = {
    "sphere": _make_sphere,
    "box": _make_box,
    "cylinder": _make_cylinder,
    "l-bracket": _make_l_bracket,
    "two-box": _make_two_box,
}


def generate(spec: ShapeSpec) -> ShapeSample:
    """Generate a shape sample deterministically from its spec."""
    rng = np.random.default_rng(spec.seed)
    return _BUILDERS[spec.kind](spec.resolved_params(), spec.n_points, rng)


def generate_shape(
    kind: str, n_points: int = 2048, seed: int = 0, **params: float
) -> ShapeSample:
    """Convenience wrapper around `generate` taking size params as keywords."""
    return generate(ShapeSpec(kind, n_points, seed, params))
