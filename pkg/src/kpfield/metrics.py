"""Evaluation metrics: repeatability, semantic mIoU, and registration.

Three metric families, each oracle-checkable at desk scale:

  relative repeatability   fraction of detections in one view whose rigid
                           transport lands within epsilon of a detection in
                           the other view
  semantic mIoU            greedy one-to-one matching of predicted against
                           reference keypoints under a distance cutoff;
                           IoU = matched / (n_pred + n_ref - matched)
  registration             mutual-nearest descriptor matching, inlier ratio
                           against the ground-truth transform, and RANSAC
                           pose recovery (FMR / IR / RR)

Detectors are callables cloud -> KeypointSet and descriptors callables
(cloud, keypoint coordinates) -> (K, W) array, so both learned fields and
baselines plug into the same harness.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from kpfield.config import ExtractParams
from kpfield.extraction import ExtractDiagnostics, KeypointSet, extract_from_raw
from kpfield.geometry import PointCloud, RigidTransform, apply_transform
from kpfield.model import FieldModel

DetectorInterface = Callable[[PointCloud], KeypointSet]
DescriptorInterface = Callable[[PointCloud, np.ndarray], np.ndarray]

# standard keypoint budgets of the registration protocol, largest first
REGISTRATION_KEYPOINT_BUDGETS = (2500, 1000, 500, 250, 100)

# fixed matching radius used by downsample / noise robustness sweeps
SWEEP_EPSILON = 0.04


def _coords(kps) -> np.ndarray:
    if isinstance(kps, KeypointSet):
        return kps.coordinates
    return np.asarray(kps, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# repeatability


def relative_repeatability(kps_a, kps_b, transform: RigidTransform, epsilon: float) -> float:
    """Fraction of A-keypoints repeatable in B under the ground-truth motion.

    A keypoint is repeatable when the nearest B-keypoint to its transported
    position lies within epsilon.  Direction-dependent (A toward B); an empty
    A scores 0 with a warning.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    a = _coords(kps_a)
    b = _coords(kps_b)
    if len(a) == 0:
        warnings.warn("empty reference keypoint set scores 0 repeatability")
        return 0.0
    if len(b) == 0:
        return 0.0
    moved = apply_transform(a, transform)
    nearest = cdist(moved, b).min(axis=1)
    return float(np.mean(nearest <= epsilon))


def repeatability_both_ways(
    kps_a, kps_b, transform: RigidTransform, epsilon: float
) -> tuple[float, float, float]:
    """(A->B, B->A, mean); the metric is not symmetric by construction."""
    ab = relative_repeatability(kps_a, kps_b, transform, epsilon)
    ba = relative_repeatability(kps_b, kps_a, transform.inverse(), epsilon)
    return ab, ba, 0.5 * (ab + ba)


# ---------------------------------------------------------------------------
# semantic consistency


def greedy_match_count(distances: np.ndarray, threshold: float) -> int:
    """One-to-one matches under the cutoff, taken in ascending distance,
    ties toward lower (row, column) indices."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"distance matrix must be 2-D, got shape {d.shape}")
    rows, cols = np.nonzero(d <= threshold)
    if len(rows) == 0:
        return 0
    order = np.lexsort((cols, rows, d[rows, cols]))
    used_rows = np.zeros(d.shape[0], dtype=bool)
    used_cols = np.zeros(d.shape[1], dtype=bool)
    matched = 0
    for k in order:
        i, j = rows[k], cols[k]
        if not used_rows[i] and not used_cols[j]:
            used_rows[i] = True
            used_cols[j] = True
            matched += 1
    return matched


def _ascending_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if len(t) == 0:
        raise ValueError("need at least one threshold")
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be ascending")
    return t


def _iou_curve(distances: np.ndarray, n_pred: int, n_ref: int, thresholds) -> np.ndarray:
    curve = np.zeros(len(thresholds))
    if n_pred == 0 or n_ref == 0:
        return curve
    for t_idx, t in enumerate(thresholds):
        matched = greedy_match_count(distances, float(t))
        curve[t_idx] = matched / (n_pred + n_ref - matched)
    assert np.all(np.diff(curve) >= -1e-12), "IoU curve must be non-decreasing"
    return curve


def _as_instances(pred, ref, aux) -> tuple[list, list, list]:
    pred_is_single = isinstance(pred, (np.ndarray, KeypointSet))
    if pred_is_single:
        return [pred], [ref], [aux]
    return list(pred), list(ref), list(aux)


def semantic_miou_annotated(pred_kps, annotated_kps, geodesic, thresholds) -> np.ndarray:
    """mIoU curve against annotated keypoints, matched by geodesic distance.

    Accepts one instance (arrays plus a (n_pred, n_annot) geodesic matrix) or
    parallel sequences of instances; the curve averages IoU over instances.
    An instance with no predictions contributes 0 at every threshold.
    """
    preds, refs, geos = _as_instances(pred_kps, annotated_kps, geodesic)
    if not (len(preds) == len(refs) == len(geos)):
        raise ValueError("instance lists must have equal length")
    if len(preds) == 0:
        raise ValueError("no instances to evaluate")
    thresholds = _ascending_thresholds(thresholds)
    total = np.zeros(len(thresholds))
    for pred, ref, geo in zip(preds, refs, geos):
        p = _coords(pred)
        r = _coords(ref)
        d = np.asarray(geo, dtype=np.float64)
        if len(p) and len(r) and d.shape != (len(p), len(r)):
            raise ValueError(
                f"geodesic matrix shape {d.shape} does not match "
                f"({len(p)}, {len(r)}) keypoints"
            )
        total += _iou_curve(d, len(p), len(r), thresholds)
    return total / len(preds)


def semantic_miou_pairwise(kps_1, kps_2, correspondence, thresholds) -> np.ndarray:
    """mIoU curve between two models linked by a surface correspondence.

    `correspondence` is a (sources, targets) pair of aligned point arrays:
    each first-model keypoint maps through its nearest source to the paired
    target, then matches second-model keypoints by Euclidean distance.
    Accepts a single instance or parallel sequences.
    """
    firsts, seconds, corrs = _as_instances(kps_1, kps_2, correspondence)
    if not (len(firsts) == len(seconds) == len(corrs)):
        raise ValueError("instance lists must have equal length")
    if len(firsts) == 0:
        raise ValueError("no instances to evaluate")
    thresholds = _ascending_thresholds(thresholds)
    total = np.zeros(len(thresholds))
    for one, two, (sources, targets) in zip(firsts, seconds, corrs):
        k1 = _coords(one)
        k2 = _coords(two)
        src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
        dst = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        if len(src) != len(dst) or len(src) == 0:
            raise ValueError("correspondence needs equal-length source/target arrays")
        if len(k1) == 0 or len(k2) == 0:
            continue
        nearest_src = cdist(k1, src).argmin(axis=1)
        expected = dst[nearest_src]
        total += _iou_curve(cdist(expected, k2), len(k1), len(k2), thresholds)
    return total / len(firsts)


def geodesic_distances(
    cloud: PointCloud | np.ndarray, sources, targets, k: int = 8
) -> np.ndarray:
    """(n_sources, n_targets) shortest-path distances over the k-NN graph.

    Graph geodesics approximate surface geodesics: nodes are cloud points,
    edges join k nearest neighbors with Euclidean weights.  Query points off
    the cloud attach to their nearest node.  Disconnected pairs come back
    infinite, with a warning.
    """
    if k < 4:
        raise ValueError(f"k must be >= 4 for a usable graph, got {k}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    k_eff = min(k, n - 1)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=k_eff + 1)
    rows = np.repeat(np.arange(n), k_eff)
    cols = idx[:, 1:].ravel()
    weights = dist[:, 1:].ravel()
    graph = csr_matrix((weights, (rows, cols)), shape=(n, n))
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    src_nodes = tree.query(src)[1]
    tgt_nodes = tree.query(tgt)[1]
    all_dist = dijkstra(graph, directed=False, indices=src_nodes)
    out = all_dist[:, tgt_nodes]
    if not np.isfinite(out).all():
        warnings.warn("k-NN graph is disconnected; some geodesics are infinite")
    return out


# ---------------------------------------------------------------------------
# registration


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """(M, 2) mutual-nearest-neighbor index pairs in descriptor space."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"descriptor widths differ: {a.shape} vs {b.shape}"
        )
    d = cdist(a, b)
    a_to_b = d.argmin(axis=1)
    b_to_a = d.argmin(axis=0)
    rows = np.arange(len(a))
    mutual = b_to_a[a_to_b] == rows
    pairs = np.stack([rows[mutual], a_to_b[mutual]], axis=1)
    return pairs.astype(np.int64)


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform src -> dst (orthogonal Procrustes)."""
    a = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(a) != len(b) or len(a) < 3:
        raise ValueError("need at least 3 paired points")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = cb - rotation @ ca
    return RigidTransform(rotation, translation)


def ransac_rigid(
    correspondences: tuple[np.ndarray, np.ndarray],
    inlier_radius: float,
    iterations: int,
    rng: np.random.Generator,
) -> tuple[RigidTransform, np.ndarray]:
    """Best rigid transform from 3-point hypotheses, Procrustes-refined.

    `correspondences` is a (source points, target points) pair of equal
    length.  Returns the refined transform and the indices of its inliers
    (pairs within inlier_radius after the refined transform).
    """
    src, dst = correspondences
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"{len(src)} source vs {len(dst)} target points")
    if len(src) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(src)}")
    if inlier_radius <= 0 or iterations < 1:
        raise ValueError("inlier_radius must be positive and iterations >= 1")

    def inliers_of(transform: RigidTransform) -> np.ndarray:
        residual = np.linalg.norm(apply_transform(src, transform) - dst, axis=1)
        return np.nonzero(residual <= inlier_radius)[0]

    best_inliers = np.zeros(0, dtype=np.int64)
    for _ in range(iterations):
        pick = rng.choice(len(src), size=3, replace=False)
        try:
            hypothesis = fit_rigid(src[pick], dst[pick])
        except np.linalg.LinAlgError:
            continue
        current = inliers_of(hypothesis)
        if len(current) > len(best_inliers):
            best_inliers = current
    if len(best_inliers) < 3:
        return RigidTransform(np.eye(3), np.zeros(3)), np.zeros(0, dtype=np.int64)
    refined = fit_rigid(src[best_inliers], dst[best_inliers])
    return refined, inliers_of(refined)


@dataclass(frozen=True)
class RegistrationPair:
    """Two clouds of the same scene with the ground-truth motion A -> B."""

    cloud_a: PointCloud
    cloud_b: PointCloud
    transform: RigidTransform


@dataclass(frozen=True)
class RegistrationParams:
    """Thresholds of the registration protocol, in canonical units."""

    tau1: float = 0.1
    tau2: float = 0.05
    rotation_tolerance: float = math.radians(15.0)
    translation_tolerance: float = 0.3
    ransac_iterations: int = 1000
    ransac_inlier_radius: float = 0.1

    def __post_init__(self) -> None:
        if min(self.tau1, self.tau2, self.rotation_tolerance, self.translation_tolerance) <= 0:
            raise ValueError("all thresholds must be positive")
        if self.ransac_iterations < 1 or self.ransac_inlier_radius <= 0:
            raise ValueError("invalid RANSAC settings")


@dataclass(frozen=True)
class RegistrationReport:
    """FMR / mean inlier ratio / RR over a pair set, plus per-pair detail."""

    fmr: float
    rr: float
    inlier_ratio: float
    pair_diagnostics: tuple[dict, ...]

    def __post_init__(self) -> None:
        for name in ("fmr", "rr", "inlier_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def registration_metrics(
    pairs: Sequence[RegistrationPair],
    detector: DetectorInterface,
    descriptor: DescriptorInterface,
    n_keypoints: int,
    params: RegistrationParams | None = None,
    rng: np.random.Generator | None = None,
) -> RegistrationReport:
    """Run the full detect/describe/match/register protocol over cloud pairs.

    Per pair: top-n keypoints per side, descriptor matching by mutual nearest
    neighbor, inlier ratio against the ground-truth transform (tau1), FMR as
    the fraction of pairs beating tau2, and RR as the fraction whose RANSAC
    pose lands within the rotation/translation tolerances.  A side with no
    keypoints fails its pair.
    """
    if len(pairs) == 0:
        raise ValueError("no registration pairs supplied")
    if n_keypoints < 1:
        raise ValueError("n_keypoints must be >= 1")
    params = params or RegistrationParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    diagnostics = []
    hits = 0
    registered = 0
    ratio_sum = 0.0
    for pair in pairs:
        kps_a = detector(pair.cloud_a)
        kps_b = detector(pair.cloud_b)
        a = _coords(kps_a)[:n_keypoints]
        b = _coords(kps_b)[:n_keypoints]
        diag: dict = {"n_kps_a": len(a), "n_kps_b": len(b)}
        inlier_ratio = 0.0
        success = False
        rotation_error = math.inf
        translation_error = math.inf
        n_matches = 0
        if len(a) and len(b):
            desc_a = np.asarray(descriptor(pair.cloud_a, a), dtype=np.float64)
            desc_b = np.asarray(descriptor(pair.cloud_b, b), dtype=np.float64)
            if not (np.isfinite(desc_a).all() and np.isfinite(desc_b).all()):
                raise ValueError("descriptor produced non-finite values")
            matches = match_descriptors(desc_a, desc_b)
            n_matches = len(matches)
            if n_matches:
                src = a[matches[:, 0]]
                dst = b[matches[:, 1]]
                moved = apply_transform(src, pair.transform)
                residual = np.linalg.norm(moved - dst, axis=1)
                inlier_ratio = float(np.mean(residual <= params.tau1))
            if n_matches >= 3:
                estimate, _ = ransac_rigid(
                    (src, dst), params.ransac_inlier_radius, params.ransac_iterations, rng
                )
                relative = estimate.inverse().compose(pair.transform)
                rotation_error = relative.rotation_angle()
                translation_error = float(
                    np.linalg.norm(estimate.translation - pair.transform.translation)
                )
                success = (
                    rotation_error <= params.rotation_tolerance
                    and translation_error <= params.translation_tolerance
                )
        diag.update(
            n_matches=n_matches,
            inlier_ratio=inlier_ratio,
            registered=success,
            rotation_error=rotation_error,
            translation_error=translation_error,
        )
        diagnostics.append(diag)
        ratio_sum += inlier_ratio
        hits += inlier_ratio > params.tau2
        registered += success
    n = len(pairs)
    return RegistrationReport(
        fmr=hits / n,
        rr=registered / n,
        inlier_ratio=ratio_sum / n,
        pair_diagnostics=tuple(diagnostics),
    )


# ---------------------------------------------------------------------------
# baseline detector and descriptor


def random_detector(cloud: PointCloud, n: int, rng: np.random.Generator) -> KeypointSet:
    """n uniformly chosen input points, each scored 1/n: the null baseline."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(cloud):
        raise ValueError(f"n ({n}) exceeds cloud size ({len(cloud)})")
    idx = rng.choice(len(cloud), size=n, replace=False)
    coords = cloud.points[idx]
    scores = np.full(n, 1.0 / n)
    diag = ExtractDiagnostics(
        n_lattice=len(cloud),
        n_occupied=len(cloud),
        n_salient=n,
        n_after_nms=n,
        iterations=0,
        saliency_threshold=0.0,
        nms_radius=0.0,
        snapped=True,
        note="uniform random baseline",
    )
    return KeypointSet(coords, scores, diag)


def histogram_descriptor(
    cloud: PointCloud,
    keypoints: np.ndarray,
    radius: float = 0.1,
    n_bins: int = 8,
) -> np.ndarray:
    """Radial-distance + normal-angle histograms over a ball neighborhood.

    A deliberately simple local-geometry descriptor for harness plumbing:
    per keypoint, the distance histogram of neighbors within `radius` and
    the histogram of |cos| angles between neighbor directions and the local
    PCA normal, each normalized, concatenated to width 2 * n_bins.  Rotation
    invariant; not a learned-descriptor substitute.
    """
    if radius <= 0 or n_bins < 2:
        raise ValueError("radius must be positive and n_bins >= 2")
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    pts = cloud.points
    tree = cKDTree(pts)
    out = np.zeros((len(kps), 2 * n_bins))
    dist_edges = np.linspace(0.0, radius, n_bins + 1)
    angle_edges = np.linspace(0.0, 1.0, n_bins + 1)
    for i, kp in enumerate(kps):
        neighbors = pts[tree.query_ball_point(kp, radius)]
        offsets = neighbors - kp
        lengths = np.linalg.norm(offsets, axis=1)
        keep = lengths > 1e-12
        offsets = offsets[keep]
        lengths = lengths[keep]
        if len(offsets) == 0:
            continue
        d_hist = np.histogram(lengths, bins=dist_edges)[0].astype(np.float64)
        out[i, :n_bins] = d_hist / d_hist.sum()
        if len(offsets) >= 3:
            centered = neighbors - neighbors.mean(axis=0)
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            normal = vt[-1]
            cosines = np.abs((offsets / lengths[:, None]) @ normal)
            a_hist = np.histogram(np.clip(cosines, 0.0, 1.0), bins=angle_edges)[0]
            out[i, n_bins:] = a_hist / a_hist.sum()
    return out


def make_field_detector(
    model: FieldModel, params: ExtractParams
) -> DetectorInterface:
    """Detector adapter: per-view normalize, extract, return input-frame
    keypoints.  This is the harness-facing face of the trained fields."""

    def detect(cloud: PointCloud) -> KeypointSet:
        kps, _ = extract_from_raw(model, cloud.points, params)
        return kps

    return detect


# ---------------------------------------------------------------------------
# report output

CSV_COLUMNS = ("instance", "metric", "parameter", "value")


def write_metric_csv(
    path: str | Path,
    rows: Sequence[Mapping[str, object]],
    summary: Mapping[str, float] | None = None,
) -> None:
    """Write an evaluation report: one row per (instance, metric, parameter).

    `parameter` is whatever the metric was swept over (a distance threshold,
    downsample rate, noise sigma); pass an empty string for scalar metrics.
    Summary entries append as instance="summary" rows with a blank parameter.
    """
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            missing = set(CSV_COLUMNS) - set(row)
            if missing:
                raise ValueError(f"report row is missing columns {sorted(missing)}")
            writer.writerow({key: row[key] for key in CSV_COLUMNS})
        for name, value in (summary or {}).items():
            writer.writerow(
                {"instance": "summary", "metric": name, "parameter": "", "value": value}
            )


def read_metric_csv(path: str | Path) -> tuple[list[dict], dict[str, float]]:
    """Inverse of :func:`write_metric_csv`: (rows, summary) with float values."""
    rows: list[dict] = []
    summary: dict[str, float] = {}
    with Path(path).open(newline="") as handle:
        for record in csv.DictReader(handle):
            if record["instance"] == "summary":
                summary[record["metric"]] = float(record["value"])
            else:
                record["value"] = float(record["value"])
                rows.append(record)
    return rows, summary
