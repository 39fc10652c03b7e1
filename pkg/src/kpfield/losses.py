"""The four self-supervised training objectives and occupancy-label sampling.

All loss functions run through torch and return 0-dim tensors so they can sit
in a training graph; wrap them in float() for reporting.  Each accepts numpy
or torch inputs.

The objectives, per query cloud P and its transformed view TP:

  occupancy        mean binary cross-entropy against sampled 0/1 labels
  repeatability    1 - mean cosine similarity between each local saliency
                   grid evaluated under P and its transported copy under TP
  surface          mean (1 - occupancy) * saliency: saliency may only live
                   where the model believes surface exists
  sparsity         1 - mean per-grid (max - mean) saliency over the grid
                   points the model deems occupied: rewards peaked fields

The total is their weighted sum, all weights defaulting to 1 so the default
objective is the plain unweighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from kpfield.geometry import (
    CUBE_HALF,
    NormParams,
    PointCloud,
    QueryGrid,
    RigidTransform,
    apply_transform,
)
from kpfield.model import FieldModel, ensure_volume

PROB_CLAMP = 1e-7
COSINE_EPS = 1e-8


@dataclass(frozen=True)
class OccupancyBatch:
    """Labeled occupancy queries: cloud members are 1, free-space draws are 0."""

    queries: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if len(queries) != len(labels):
            raise ValueError(f"{len(queries)} queries vs {len(labels)} labels")
        if not np.isin(labels, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "queries", queries)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class LossReport:
    """One step's loss components plus the optimized total.

    Component values are unweighted; `total` is the weighted sum, which
    equals l_o + l_r + l_m + l_s under the default all-ones weights.  The
    `tensor` field carries the differentiable total when the report comes
    out of a live graph.
    """

    l_o: float
    l_r: float
    l_m: float
    l_s: float
    total: float
    tensor: object = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        tol = 1e-6
        for name in ("l_o", "l_r", "l_m", "l_s", "total"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < -tol:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.l_r > 2 + tol:
            raise ValueError(f"l_r must lie in [0, 2], got {self.l_r}")
        if self.l_m > 1 + tol or self.l_s > 1 + tol:
            raise ValueError("l_m and l_s must lie in [0, 1]")

    def to_dict(self) -> dict[str, float]:
        return {
            "l_o": self.l_o,
            "l_r": self.l_r,
            "l_m": self.l_m,
            "l_s": self.l_s,
            "total": self.total,
        }


def sample_occupancy_batch(
    cloud: PointCloud | np.ndarray,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
) -> OccupancyBatch:
    """Draw n_pos surface queries from the cloud and n_neg uniform cube queries.

    Positives are drawn without replacement (n_pos may not exceed the cloud
    size).  Negatives are NOT filtered against the surface; the handful that
    land on it are noise the objective tolerates.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if n_pos < 0 or n_neg < 0:
        raise ValueError("n_pos and n_neg must be non-negative")
    if n_pos > len(points):
        raise ValueError(f"n_pos ({n_pos}) exceeds cloud size ({len(points)})")
    positives = points[rng.choice(len(points), size=n_pos, replace=False)]
    negatives = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n_neg, 3))
    queries = np.concatenate([positives, negatives], axis=0)
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return OccupancyBatch(queries, labels)


def _as_tensor(values, like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else torch.float64
    if isinstance(values, Tensor):
        return values
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=dtype)


def occupancy_loss(pred_probs, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    pred = _as_tensor(pred_probs)
    y = _as_tensor(labels, like=pred)
    if pred.shape != y.shape:
        raise ValueError(f"prediction/label shape mismatch: {tuple(pred.shape)} vs {tuple(y.shape)}")
    p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def surface_constraint_loss(occ_probs, sal_probs) -> Tensor:
    """Mean (1 - occupancy) * saliency over a shared query set."""
    occ = _as_tensor(occ_probs)
    sal = _as_tensor(sal_probs, like=occ)
    if occ.shape != sal.shape:
        raise ValueError(f"occupancy/saliency shape mismatch: {tuple(occ.shape)} vs {tuple(sal.shape)}")
    return ((1.0 - occ) * sal).mean()


def grid_cosine_loss(grid_values_a, grid_values_b) -> Tensor:
    """1 - mean per-row cosine similarity of two (n, G) value tables.

    Norms carry a small epsilon so all-zero rows compare as dissimilar
    instead of dividing by zero.
    """
    a = _as_tensor(grid_values_a)
    b = _as_tensor(grid_values_b, like=a)
    if a.shape != b.shape or a.dim() != 2:
        raise ValueError(f"expected matching (n, G) tables, got {tuple(a.shape)} vs {tuple(b.shape)}")
    dots = (a * b).sum(dim=1)
    norms = a.norm(dim=1) + COSINE_EPS
    norms_b = b.norm(dim=1) + COSINE_EPS
    return 1.0 - (dots / (norms * norms_b)).mean()


def peakiness_loss(occ_values, sal_values, occupancy_threshold: float) -> Tensor:
    """1 - mean per-grid (max - mean) saliency over occupied grid points.

    A grid point counts as occupied when its occupancy probability exceeds
    1 - occupancy_threshold.  Grids with no occupied points are skipped and
    the mean renormalized; with every grid empty there is no signal and the
    loss is 1.
    """
    if not 0.0 < occupancy_threshold <= 0.5:
        raise ValueError("occupancy_threshold must be in (0, 0.5]")
    occ = _as_tensor(occ_values)
    sal = _as_tensor(sal_values, like=occ)
    if occ.shape != sal.shape or occ.dim() != 2:
        raise ValueError(f"expected matching (n, G) tables, got {tuple(occ.shape)} vs {tuple(sal.shape)}")
    mask = (occ > 1.0 - occupancy_threshold).detach()
    counts = mask.sum(dim=1)
    surviving = counts > 0
    if not bool(surviving.any()):
        return torch.ones((), dtype=occ.dtype)
    neg_inf = torch.finfo(sal.dtype).min
    peak = torch.where(mask, sal, torch.full_like(sal, neg_inf)).max(dim=1).values
    mean = (sal * mask.to(sal.dtype)).sum(dim=1) / counts.clamp(min=1).to(sal.dtype)
    peakiness = (peak - mean)[surviving]
    return 1.0 - peakiness.mean()


def _volume_of(model: FieldModel, cloud_or_volume) -> Tensor:
    return ensure_volume(model, cloud_or_volume)


def _grid_array(grids) -> np.ndarray:
    """(n, G, 3) float array from a list of QueryGrids or a raw array."""
    if isinstance(grids, np.ndarray):
        array = grids.astype(np.float64)
    else:
        array = np.stack([g.points if isinstance(g, QueryGrid) else np.asarray(g) for g in grids])
    if array.ndim != 3 or array.shape[2] != 3 or array.shape[0] < 1:
        raise ValueError(f"grids must form a non-empty (n, G, 3) array, got {array.shape}")
    return array


def repeatability_loss(
    model: FieldModel,
    cloud,
    view_cloud,
    grids,
    transform: RigidTransform,
    view_params: NormParams | None = None,
) -> Tensor:
    """Saliency-field consistency between a cloud and its transformed view.

    Each local grid is evaluated under the first view, transported by the
    rigid transform (and the view's renormalization, when one was applied to
    the second cloud), evaluated under the second view, and compared by
    cosine similarity of the flattened per-grid vectors.
    """
    grid_pts = _grid_array(grids)
    n, g, _ = grid_pts.shape
    flat = grid_pts.reshape(-1, 3)
    moved = apply_transform(flat, transform)
    if view_params is not None:
        moved = view_params.to_canonical(moved)
    vol_a = _volume_of(model, cloud)
    vol_b = _volume_of(model, view_cloud)
    sal_a = model.field_probs(vol_a, model.tensor(flat))[1].reshape(n, g)
    sal_b = model.field_probs(vol_b, model.tensor(moved))[1].reshape(n, g)
    return grid_cosine_loss(sal_a, sal_b)


def sparsity_loss(model: FieldModel, cloud, grids, occupancy_threshold: float) -> Tensor:
    """Peakiness objective evaluated through the model on local grids."""
    grid_pts = _grid_array(grids)
    n, g, _ = grid_pts.shape
    volume = _volume_of(model, cloud)
    occ, sal = model.field_probs(volume, model.tensor(grid_pts.reshape(-1, 3)))
    return peakiness_loss(occ.reshape(n, g), sal.reshape(n, g), occupancy_threshold)


def total_loss(model: FieldModel, item, weights: tuple[float, float, float, float] | None = None) -> LossReport:
    """All four objectives on one training item, sharing encoder work.

    `item` carries: cloud, view_cloud, transform, grids, occupancy (an
    OccupancyBatch), occupancy_threshold, and optionally view_params and
    reverse_grids (grids on the second view, for symmetrized repeatability).
    Returns a LossReport whose `tensor` field is the differentiable total.
    """
    w_o, w_r, w_m, w_s = weights if weights is not None else (1.0, 1.0, 1.0, 1.0)
    vol_p = _volume_of(model, item.cloud)
    vol_tp = _volume_of(model, item.view_cloud)

    occ_q, sal_q = model.field_probs(vol_p, model.tensor(item.occupancy.queries))
    l_o = occupancy_loss(occ_q, item.occupancy.labels)
    l_m = surface_constraint_loss(occ_q, sal_q)

    grid_pts = _grid_array(item.grids)
    n, g, _ = grid_pts.shape
    flat = grid_pts.reshape(-1, 3)
    occ_g, sal_g = model.field_probs(vol_p, model.tensor(flat))
    l_s = peakiness_loss(
        occ_g.reshape(n, g), sal_g.reshape(n, g), item.occupancy_threshold
    )

    view_params = getattr(item, "view_params", None)
    moved = apply_transform(flat, item.transform)
    if view_params is not None:
        moved = view_params.to_canonical(moved)
    sal_tg = model.field_probs(vol_tp, model.tensor(moved))[1]
    l_r = grid_cosine_loss(sal_g.reshape(n, g), sal_tg.reshape(n, g))

    reverse_grids = getattr(item, "reverse_grids", None)
    if reverse_grids is not None:
        rev_pts = _grid_array(reverse_grids)
        rn, rg, _ = rev_pts.shape
        rev_flat = rev_pts.reshape(-1, 3)
        back = rev_flat if view_params is None else view_params.to_raw(rev_flat)
        back = apply_transform(back, item.transform.inverse())
        sal_rev_a = model.field_probs(vol_tp, model.tensor(rev_flat))[1].reshape(rn, rg)
        sal_rev_b = model.field_probs(vol_p, model.tensor(back))[1].reshape(rn, rg)
        l_r = 0.5 * (l_r + grid_cosine_loss(sal_rev_a, sal_rev_b))

    total = w_o * l_o + w_r * l_r + w_m * l_m + w_s * l_s
    return LossReport(
        l_o=float(l_o.detach()),
        l_r=float(l_r.detach()),
        l_m=float(l_m.detach()),
        l_s=float(l_s.detach()),
        total=float(total.detach()),
        tensor=total,
    )
