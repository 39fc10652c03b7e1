"""Explicit keypoint extraction, surface reconstruction, and slice exports.

Keypoints come out of the trained fields in seven moves: lay a uniform query
lattice over the canonical cube, keep the queries the occupancy field deems
occupied, push each survivor uphill on saliency by fixed-step gradient
descent, keep those whose final saliency clears the threshold, suppress
non-maxima, optionally snap to the nearest input point, and truncate to the
requested count.  An extraction that loses every candidate along the way
returns an empty KeypointSet carrying a diagnostic note instead of raising.

Surface reconstruction runs marching cubes over a dense occupancy evaluation;
the default isovalue is 0.4.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
import torch
from skimage.measure import marching_cubes

from kpfield.config import ExtractParams
from kpfield.geometry import (
    CUBE_HALF,
    FeatureVolume,
    NormParams,
    PointCloud,
    cube_lattice,
    nms,
    normalize_cloud,
    snap_to_input,
)
from kpfield.model import FieldModel, ensure_volume

_REFINE_CHUNK = 8192
_EVAL_CHUNK = 65536

AXES = ("x", "y", "z")
FIELD_NAMES = ("occupancy", "saliency")
SLICE_MODES = ("mid", "max-project")


@dataclass(frozen=True)
class ExtractDiagnostics:
    """Counter trail of one extraction, kept alongside the keypoints."""

    n_lattice: int
    n_occupied: int
    n_salient: int
    n_after_nms: int
    iterations: int
    saliency_threshold: float
    nms_radius: float
    snapped: bool = False
    note: str = ""


@dataclass(frozen=True)
class KeypointSet:
    """Extracted keypoints in the canonical frame, strongest first.

    Scores are the saliency values at the refined (pre-snap) positions.
    Pairwise separation respects the NMS radius except when coordinates were
    snapped onto input points afterwards, which may pull points closer.
    """

    coordinates: np.ndarray
    saliencies: np.ndarray
    provenance: ExtractDiagnostics

    def __post_init__(self) -> None:
        coords = np.asarray(self.coordinates, dtype=np.float64).reshape(-1, 3)
        scores = np.asarray(self.saliencies, dtype=np.float64).reshape(-1)
        if len(coords) != len(scores):
            raise ValueError(f"{len(coords)} coordinates vs {len(scores)} scores")
        if np.any(np.diff(scores) > 0):
            raise ValueError("saliency scores must be sorted descending")
        if len(scores) and scores.min() <= self.provenance.saliency_threshold:
            raise ValueError("every keypoint must clear the saliency threshold")
        if len(coords) > 1 and not self.provenance.snapped:
            deltas = coords[:, None, :] - coords[None, :, :]
            dists = np.linalg.norm(deltas, axis=2)
            dists[np.diag_indices(len(coords))] = np.inf
            if dists.min() <= self.provenance.nms_radius:
                raise ValueError("keypoints closer than the NMS radius survived")
        object.__setattr__(self, "coordinates", coords)
        object.__setattr__(self, "saliencies", scores)

    def __len__(self) -> int:
        return len(self.saliencies)


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh in the canonical frame; may be empty (see note)."""

    vertices: np.ndarray
    triangles: np.ndarray
    note: str = ""

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle indices out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    def __len__(self) -> int:
        return len(self.triangles)


def saliency_energy(model: FieldModel, volume, queries) -> torch.Tensor:
    """Mean (1 - saliency) over the queries; the quantity descent minimizes.

    Differentiable with respect to query coordinates: pass a torch tensor
    with requires_grad=True to pull gradients out.
    """
    vol = ensure_volume(model, volume)
    live = isinstance(queries, torch.Tensor)
    q = queries if live else model.tensor(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    if q.numel() == 0:
        raise ValueError("empty query set")
    _, sal = model.field_probs(vol, q)
    energy = (1.0 - sal).mean()
    return energy if live else energy.detach()


def descend_saliency(
    model: FieldModel,
    volume,
    queries: np.ndarray,
    step_size: float,
    n_steps: int,
) -> np.ndarray:
    """Fixed-step gradient descent of each query on its own (1 - saliency).

    The energy is a mean of independent per-query terms, so each query rides
    its own gradient; removing one query never moves another.  Queries are
    clamped into the canonical cube after every step.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(queries) == 0 or n_steps == 0:
        return queries.copy()
    vol = ensure_volume(model, volume)
    out = np.empty_like(queries)
    for start in range(0, len(queries), _REFINE_CHUNK):
        chunk = queries[start : start + _REFINE_CHUNK]
        q = model.tensor(chunk).clone().requires_grad_(True)
        for _ in range(n_steps):
            _, sal = model.field_probs(vol, q)
            # sum, not mean: the gradient of each term lands on its own query
            (grad,) = torch.autograd.grad((1.0 - sal).sum(), q)
            with torch.no_grad():
                q -= step_size * grad
                q.clamp_(-CUBE_HALF, CUBE_HALF)
        out[start : start + _REFINE_CHUNK] = q.detach().numpy()
    return out


def _eval_probs(model: FieldModel, vol: torch.Tensor, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    occ = np.empty(len(pts))
    sal = np.empty(len(pts))
    with torch.no_grad():
        for start in range(0, len(pts), _EVAL_CHUNK):
            chunk = model.tensor(pts[start : start + _EVAL_CHUNK])
            o, s = model.field_probs(vol, chunk)
            occ[start : start + _EVAL_CHUNK] = o.numpy()
            sal[start : start + _EVAL_CHUNK] = s.numpy()
    return occ, sal


def extract_keypoints(
    model: FieldModel, cloud: PointCloud | np.ndarray, params: ExtractParams
) -> KeypointSet:
    """Run the full extraction pipeline on one canonical cloud."""
    vol = ensure_volume(model, cloud)
    if vol.requires_grad:
        vol = vol.detach()
    lattice = cube_lattice(params.infer_grid_resolution)
    occ, _ = _eval_probs(model, vol, lattice)
    occupied = lattice[occ > 1.0 - params.occupancy_threshold]

    def empty(note: str, n_salient: int = 0) -> KeypointSet:
        diag = ExtractDiagnostics(
            n_lattice=len(lattice),
            n_occupied=len(occupied),
            n_salient=n_salient,
            n_after_nms=0,
            iterations=params.n_steps,
            saliency_threshold=params.saliency_threshold,
            nms_radius=params.nms_radius,
            snapped=False,
            note=note,
        )
        return KeypointSet(np.zeros((0, 3)), np.zeros(0), diag)

    if len(occupied) == 0:
        return empty("no lattice queries passed the occupancy filter")

    refined = descend_saliency(
        model, vol, occupied, params.step_size, params.n_steps
    )
    _, sal = _eval_probs(model, vol, refined)
    keep = sal > params.saliency_threshold
    candidates = refined[keep]
    scores = sal[keep]
    if len(candidates) == 0:
        return empty("no refined queries passed the saliency threshold")

    kept = nms(candidates, scores, params.nms_radius)
    coords = candidates[kept]
    scores = scores[kept]
    n_after_nms = len(coords)

    snapped = False
    if params.snap_to_input:
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
        coords = snap_to_input(coords, PointCloud(points))
        snapped = True
        # two keypoints landing on one input point carry the same information
        _, unique_idx = np.unique(coords, axis=0, return_index=True)
        mask = np.zeros(len(coords), dtype=bool)
        mask[unique_idx] = True
        coords = coords[mask]
        scores = scores[mask]
        order = np.argsort(-scores, kind="stable")
        coords = coords[order]
        scores = scores[order]

    if params.max_keypoints is not None:
        coords = coords[: params.max_keypoints]
        scores = scores[: params.max_keypoints]

    diag = ExtractDiagnostics(
        n_lattice=len(lattice),
        n_occupied=len(occupied),
        n_salient=int(keep.sum()),
        n_after_nms=n_after_nms,
        iterations=params.n_steps,
        saliency_threshold=params.saliency_threshold,
        nms_radius=params.nms_radius,
        snapped=snapped,
        note="",
    )
    return KeypointSet(coords, scores, diag)


def extract_from_raw(
    model: FieldModel, raw_points: np.ndarray, params: ExtractParams
) -> tuple[KeypointSet, NormParams]:
    """Extraction for a cloud in its own frame: normalize, extract, map back.

    Keypoint coordinates come back in the input frame; the provenance NMS
    radius is rescaled to input units so the separation invariant keeps its
    meaning.  Also returns the normalization used.
    """
    cloud, norm = normalize_cloud(raw_points)
    kps = extract_keypoints(model, cloud, params)
    coords = norm.to_raw(kps.coordinates) if len(kps) else kps.coordinates
    prov = replace(kps.provenance, nms_radius=params.nms_radius * norm.scale)
    return KeypointSet(coords, kps.saliencies, prov), norm


def reconstruct_surface(
    model: FieldModel,
    cloud: PointCloud | np.ndarray | FeatureVolume,
    iso_threshold: float = 0.4,
    resolution: int | tuple[int, int, int] = 64,
) -> SurfaceMesh:
    """Marching-cubes isosurface of the occupancy field in canonical coords.

    A field that never crosses the isovalue yields an empty mesh whose note
    says so.  Zero-area triangles are dropped.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    res = tuple(int(r) for r in resolution)
    if min(res) < 2:
        raise ValueError(f"resolution must be >= 2 per axis, got {res}")
    vol = ensure_volume(model, cloud)
    lattice = cube_lattice(res)
    occ, _ = _eval_probs(model, vol, lattice)
    grid = occ.reshape(res)
    if not (grid.min() < iso_threshold < grid.max()):
        return SurfaceMesh(
            np.zeros((0, 3)),
            np.zeros((0, 3), dtype=np.int64),
            note=(
                f"occupancy range [{grid.min():.4f}, {grid.max():.4f}] never "
                f"crosses the isovalue {iso_threshold}"
            ),
        )
    spacing = tuple(1.0 / r for r in res)
    verts, faces, _, _ = marching_cubes(grid, level=iso_threshold, spacing=spacing)
    origin = np.array([-CUBE_HALF + s / 2.0 for s in spacing])
    verts = verts + origin
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[areas > 1e-12]
    return SurfaceMesh(verts, faces.astype(np.int64))


def field_slice(
    model: FieldModel,
    cloud: PointCloud | np.ndarray | FeatureVolume,
    field_name: Literal["occupancy", "saliency"],
    axis: Literal["x", "y", "z"] = "z",
    mode: Literal["mid", "max-project"] = "mid",
    resolution: int = 64,
) -> np.ndarray:
    """(resolution, resolution) image of one field.

    `mid` samples the plane through the cube center; `max-project` takes the
    per-pixel maximum along the axis.  Rows follow the first remaining axis
    in xyz order, columns the second.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if field_name not in FIELD_NAMES:
        raise ValueError(f"field must be one of {FIELD_NAMES}, got {field_name!r}")
    if mode not in SLICE_MODES:
        raise ValueError(f"mode must be one of {SLICE_MODES}, got {mode!r}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    vol = ensure_volume(model, cloud)
    axis_idx = AXES.index(axis)
    row_axis, col_axis = [i for i in range(3) if i != axis_idx]
    centers = -CUBE_HALF + (np.arange(resolution) + 0.5) / resolution
    rows, cols = np.meshgrid(centers, centers, indexing="ij")

    def sample_plane(axis_value: float) -> np.ndarray:
        pts = np.zeros((resolution * resolution, 3))
        pts[:, row_axis] = rows.ravel()
        pts[:, col_axis] = cols.ravel()
        pts[:, axis_idx] = axis_value
        occ, sal = _eval_probs(model, vol, pts)
        values = occ if field_name == "occupancy" else sal
        return values.reshape(resolution, resolution)

    if mode == "mid":
        return sample_plane(0.0)
    image = np.full((resolution, resolution), -np.inf)
    for depth in centers:
        image = np.maximum(image, sample_plane(depth))
    return image
