"""Canonical point-cloud geometry: normalization, rigid transforms, query grids,
trilinear volume sampling, NMS, and the input perturbations used for training
and evaluation.

All operations are pure functions over immutable inputs. Every stochastic
operation takes an explicit ``numpy.random.Generator``; results are bitwise
reproducible for a fixed generator state.

Coordinates live in the canonical cube [-0.5, 0.5]^3. Raw coordinates are
recovered through :class:`NormParams`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CUBE_HALF = 0.5

__all__ = [
    "CUBE_HALF",
    "PointCloud",
    "NormParams",
    "RigidTransform",
    "QueryGrid",
    "FeatureVolume",
    "normalize_cloud",
    "denormalize_points",
    "apply_transform",
    "random_se3",
    "random_downsample",
    "add_gaussian_noise",
    "build_query_grids",
    "make_query_grid",
    "cube_lattice",
    "trilinear_sample",
    "nms",
    "snap_to_input",
]


def _as_points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) coordinate array in a fixed frame.

    Clouds straight out of :func:`normalize_cloud` lie inside the canonical
    cube; derived clouds (transformed or noised views) may spill slightly
    outside and are accepted as-is.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"PointCloud needs an (N, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("PointCloud needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("PointCloud coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NormParams:
    """Invertible map between raw and canonical coordinates.

    canonical = (raw - centroid) / scale, with centroid the raw bounding-box
    center and scale the longest bounding-box side.
    """

    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        c = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        if not np.isfinite(c).all():
            raise ValueError("centroid must be finite")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be a positive finite scalar, got {self.scale}")
        object.__setattr__(self, "centroid", c)
        object.__setattr__(self, "scale", float(self.scale))

    def to_canonical(self, points) -> np.ndarray:
        return (_as_points(points) - self.centroid) / self.scale

    def to_raw(self, points) -> np.ndarray:
        return _as_points(points) * self.scale + self.centroid


def normalize_cloud(raw_points) -> tuple[PointCloud, NormParams]:
    """Center a raw cloud on its bounding-box center and scale the longest
    bounding-box side to 1, so the result fits the canonical cube.

    Raises on empty, non-finite, or degenerate (single repeated point) input.
    """
    pts = _as_points(raw_points)
    if pts.shape[0] == 0:
        raise ValueError("cannot normalize an empty cloud")
    if not np.isfinite(pts).all():
        raise ValueError("cannot normalize a cloud with NaN/Inf coordinates")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float((hi - lo).max())
    if scale <= 0.0:
        raise ValueError("degenerate cloud: all points identical, scale undefined")
    params = NormParams(centroid=(lo + hi) / 2.0, scale=scale)
    return PointCloud(params.to_canonical(pts)), params


def denormalize_points(points, params: NormParams) -> np.ndarray:
    return params.to_raw(points)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: y = R x + t with R orthonormal, det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray

    _ORTHO_TOL = 1e-6

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > self._ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must have det +1 (no reflections)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return _as_points(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def rotation_angle(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(c))


def apply_transform(points, transform: RigidTransform) -> np.ndarray:
    """Apply y_i = R x_i + t to every point. Lengths are preserved."""
    pts = _as_points(points)
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return transform.apply(pts)


def _rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues formula
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _sample_bounded_rotation_angle(rng: np.random.Generator, max_angle: float) -> float:
    # Uniform SO(3) restricted to angle <= max_angle has angle density
    # proportional to (1 - cos a); invert the CDF F(a) = (a - sin a) / Z by bisection.
    z = max_angle - np.sin(max_angle)
    u = rng.uniform() * z
    lo, hi = 0.0, max_angle
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if mid - np.sin(mid) < u:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_se3(
    rng: np.random.Generator, max_angle: float = np.pi, max_translation: float = 0.0
) -> RigidTransform:
    """Sample uniformly from SO(3) restricted to rotation angle <= max_angle,
    with translation uniform in the ball of radius max_translation.

    max_angle = 0 yields the exact identity rotation without consuming
    random state, so disabled augmentation stays bitwise reproducible.
    """
    if not (0.0 <= max_angle <= np.pi):
        raise ValueError(f"max_angle must lie in [0, pi], got {max_angle}")
    if max_translation < 0.0:
        raise ValueError(f"max_translation must be >= 0, got {max_translation}")
    if max_angle == 0.0:
        R = np.eye(3)
    else:
        # uniform axis on the unit sphere
        v = rng.normal(size=3)
        while np.linalg.norm(v) < 1e-12:
            v = rng.normal(size=3)
        angle = _sample_bounded_rotation_angle(rng, max_angle)
        R = _rotation_from_axis_angle(v, angle)
    if max_translation > 0.0:
        d = rng.normal(size=3)
        while np.linalg.norm(d) < 1e-12:
            d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = max_translation * rng.uniform() ** (1.0 / 3.0)
        t = r * d
    else:
        t = np.zeros(3)
    return RigidTransform(R, t)


def random_downsample(cloud: PointCloud, rate: float, rng: np.random.Generator) -> PointCloud:
    """Keep a uniformly chosen subset of floor(N / rate) points, no duplicates."""
    if rate < 1.0:
        raise ValueError(f"downsample rate must be >= 1, got {rate}")
    n = len(cloud)
    keep = int(np.floor(n / rate))
    if keep < 1:
        raise ValueError(f"rate {rate} leaves no points out of {n}")
    idx = rng.choice(n, size=keep, replace=False)
    return PointCloud(cloud.points[idx])


def add_gaussian_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    """Perturb each coordinate by i.i.d. N(0, sigma^2). Points are not
    re-clamped into the canonical cube; volume lookups clamp instead."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return PointCloud(cloud.points.copy())
    return PointCloud(cloud.points + rng.normal(scale=sigma, size=cloud.points.shape))


@dataclass(frozen=True)
class QueryGrid:
    """A local H_l x W_l x D_l lattice of query coordinates centered on a cloud
    point, spanning a cube of side ``extent`` (= 1/U) inclusive of endpoints."""

    center: np.ndarray
    extent: float
    resolution: tuple[int, int, int]
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if any(r < 2 for r in self.resolution):
            raise ValueError(f"grid resolution components must be >= 2, got {self.resolution}")
        if not self.extent > 0:
            raise ValueError(f"grid extent must be positive, got {self.extent}")
        pts = np.asarray(self.points, dtype=np.float64)
        n = self.resolution[0] * self.resolution[1] * self.resolution[2]
        if pts.shape != (n, 3):
            raise ValueError(f"lattice shape {pts.shape} does not match resolution {self.resolution}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def make_query_grid(center, extent: float, resolution: tuple[int, int, int]) -> QueryGrid:
    """Build the lattice spanning [center - extent/2, center + extent/2]^3 with
    evenly spaced points (spacing extent / (r - 1) along each axis)."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    axes = [
        center[k] + np.linspace(-extent / 2.0, extent / 2.0, int(resolution[k]))
        for k in range(3)
    ]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    return QueryGrid(center=center, extent=float(extent), resolution=resolution, points=pts)


def build_query_grids(
    cloud: PointCloud,
    n: int,
    u: float,
    resolution: tuple[int, int, int],
    rng: np.random.Generator,
) -> list[QueryGrid]:
    """Sample n local grids of physical side 1/u centered on cloud points.

    Centers are drawn without replacement when n <= N, with replacement
    otherwise, so duplicate loss terms only appear when unavoidable.
    """
    if n < 1:
        raise ValueError(f"need at least one grid, got n={n}")
    if not u > 0:
        raise ValueError(f"grid scale u must be positive, got {u}")
    replace = n > len(cloud)
    idx = rng.choice(len(cloud), size=n, replace=replace)
    return [make_query_grid(cloud.points[i], 1.0 / u, resolution) for i in idx]


def cube_lattice(resolution: tuple[int, int, int]) -> np.ndarray:
    """Voxel-center lattice covering the canonical cube: along each axis the
    points -0.5 + (i + 0.5)/r for i in range(r)."""
    axes = [(np.arange(int(r)) + 0.5) / int(r) - CUBE_HALF for r in resolution]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


@dataclass(frozen=True)
class FeatureVolume:
    """A C x H x W x D grid of feature vectors with an index -> coordinate map.

    ``origin`` is the coordinate of the (0, 0, 0) voxel center; voxel (i, j, k)
    is centered at origin + (i, j, k) * spacing.
    """

    values: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 4:
            raise ValueError(f"values must be (C, H, W, D), got shape {vals.shape}")
        if any(s < 2 for s in vals.shape[1:]):
            raise ValueError(f"every spatial dimension must be >= 2, got {vals.shape[1:]}")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        if not (spacing > 0).all():
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def for_cube(cls, values: np.ndarray) -> "FeatureVolume":
        """Wrap a (C, H, W, D) array as a cell-centered cover of the canonical cube."""
        vals = np.asarray(values)
        res = np.asarray(vals.shape[1:], dtype=np.float64)
        spacing = 1.0 / res
        origin = -CUBE_HALF + spacing / 2.0
        return cls(values=vals, origin=origin, spacing=spacing)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def world_to_index(self, points) -> np.ndarray:
        """Fractional voxel indices of world coordinates (no clamping)."""
        return (_as_points(points) - self.origin) / self.spacing


def trilinear_sample(volume: FeatureVolume, points) -> np.ndarray:
    """Trilinear interpolation of the 8 voxel centers enclosing each point.

    Points outside the volume are clamped to the boundary voxel centers, so the
    field is continuous (and constant along the clamped axis) past the border.
    Returns an (N, C) array.
    """
    pts = _as_points(points)
    if not np.isfinite(pts).all():
        raise ValueError("query points must be finite")
    vals = volume.values
    c, h, w, d = vals.shape
    res = np.array([h, w, d], dtype=np.float64)
    idx = np.clip(volume.world_to_index(pts), 0.0, res - 1.0)
    i0 = np.floor(np.minimum(idx, res - 2.0)).astype(np.int64)
    frac = idx - i0
    out = np.zeros((pts.shape[0], c), dtype=np.result_type(vals.dtype, np.float64))
    flat = vals.reshape(c, -1)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                lin = ((i0[:, 0] + dx) * w + (i0[:, 1] + dy)) * d + (i0[:, 2] + dz)
                out += (wx * wy * wz)[:, None] * flat[:, lin].T
    return out


def nms(candidates, scores, radius: float) -> np.ndarray:
    """Greedy non-maximum suppression by descending score.

    A candidate is suppressed if it lies within ``radius`` (Euclidean) of an
    already selected candidate. Score ties break toward the lower original
    index. Returns the selected indices in selection order.
    """
    pts = _as_points(candidates)
    sc = np.asarray(scores, dtype=np.float64).reshape(-1)
    if pts.shape[0] != sc.shape[0]:
        raise ValueError(f"{pts.shape[0]} candidates but {sc.shape[0]} scores")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    order = np.lexsort((np.arange(len(sc)), -sc))
    selected: list[int] = []
    suppressed = np.zeros(len(sc), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        selected.append(int(i))
        if radius > 0:
            dist = np.linalg.norm(pts - pts[i], axis=1)
            suppressed |= dist <= radius
    return np.asarray(selected, dtype=np.int64)


def snap_to_input(keypoints, cloud: PointCloud) -> np.ndarray:
    """Replace each keypoint by its nearest cloud point (ties -> lower index)."""
    kps = _as_points(keypoints)
    if len(cloud) < 1:
        raise ValueError("cannot snap to an empty cloud")
    if kps.shape[0] == 0:
        return kps.copy()
    d2 = ((kps[:, None, :] - cloud.points[None, :, :]) ** 2).sum(axis=2)
    return cloud.points[np.argmin(d2, axis=1)].copy()
