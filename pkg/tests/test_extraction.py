"""Keypoint extraction, surface reconstruction, and slice-export tests.

Analytic stand-in fields (exact closed-form occupancy/saliency) drive most
checks, so lattice bookkeeping, descent updates, and marching-cubes
coordinate mapping are verified against known geometry instead of a trained
network.
"""

import math

import numpy as np
import pytest
import torch

from kpfield.config import ExtractParams, ModelConfig
from kpfield.extraction import (
    ExtractDiagnostics,
    KeypointSet,
    SurfaceMesh,
    descend_saliency,
    extract_keypoints,
    field_slice,
    reconstruct_surface,
    saliency_energy,
)
from kpfield.geometry import PointCloud, cube_lattice
from kpfield.model import FieldModel, evaluate_field
from kpfield.synthetic import generate_shape

LITE = ModelConfig(
    c1=8,
    c2=8,
    ce=8,
    volume_resolution=(8, 8, 8),
    encoder_variant="lite",
    decoder_width=16,
    decoder_blocks=1,
)

CLOUD = generate_shape("sphere", n_points=128, seed=0).cloud


class AnalyticModel:
    """Duck-typed field with closed-form probabilities, for exact oracles."""

    def __init__(self, occ_fn, sal_fn):
        self.occ_fn = occ_fn
        self.sal_fn = sal_fn

    def tensor(self, array):
        return torch.as_tensor(np.asarray(array), dtype=torch.float64)

    def feature_volume(self, pts):
        return torch.zeros((1, 2, 2, 2), dtype=torch.float64)

    def field_probs(self, volume, queries):
        return self.occ_fn(queries), self.sal_fn(queries)


def constant(value: float):
    return lambda q: torch.full((len(q),), value, dtype=torch.float64)


def bump_field(center, width=0.08, floor=0.05, height=0.9):
    c = torch.as_tensor(center, dtype=torch.float64)

    def fn(q):
        d2 = ((q - c) ** 2).sum(dim=1)
        return floor + height * torch.exp(-d2 / (2.0 * width**2))

    return fn


def biased_model(occ_bias: float = 0.0, sal_bias: float = 0.0) -> FieldModel:
    """Untrained lite model with the head output layers pinned to a bias."""
    model = FieldModel(LITE, seed=0)
    with torch.no_grad():
        for head, bias in ((model.occupancy_net, occ_bias), (model.saliency_net, sal_bias)):
            if bias != 0.0:
                head.fc_out.weight.zero_()
                head.fc_out.bias.fill_(bias)
    return model


class TestSaliencyEnergy:
    def test_saturated_saliency_gives_zero_energy(self):
        model = AnalyticModel(constant(0.5), constant(1.0))
        value = float(saliency_energy(model, CLOUD, CLOUD.points[:32]))
        assert abs(value) < 1e-12

    def test_dead_saliency_gives_unit_energy(self):
        model = AnalyticModel(constant(0.5), constant(0.0))
        value = float(saliency_energy(model, CLOUD, CLOUD.points[:32]))
        assert abs(value - 1.0) < 1e-12

    def test_empty_queries_rejected(self):
        model = biased_model()
        with pytest.raises(ValueError, match="empty query set"):
            saliency_energy(model, CLOUD, np.zeros((0, 3)))

    def test_query_gradient_matches_finite_differences(self):
        model = FieldModel(LITE, seed=1).double()
        with torch.no_grad():
            vol = model.feature_volume(model.tensor(CLOUD.points))
        rng = np.random.default_rng(5)
        # fractional voxel coordinates keep clear of interpolation seams
        base = (rng.uniform(0.25, 0.75, size=(6, 3)) - 0.5 + rng.integers(1, 7, size=(6, 3))) / 8.0 - 0.5
        base = np.clip(base, -0.45, 0.45)
        q = torch.tensor(base, dtype=torch.float64, requires_grad=True)
        energy = saliency_energy(model, vol, q)
        energy.backward()
        h = 1e-4
        for _ in range(5):
            i = int(rng.integers(len(base)))
            j = int(rng.integers(3))
            up = base.copy()
            up[i, j] += h
            down = base.copy()
            down[i, j] -= h
            fd = (
                float(saliency_energy(model, vol, up))
                - float(saliency_energy(model, vol, down))
            ) / (2.0 * h)
            grad = float(q.grad[i, j])
            scale = max(abs(fd), abs(grad), 1e-10)
            assert abs(fd - grad) / scale < 1e-3


class TestDescent:
    def test_zero_steps_returns_the_input(self):
        model = biased_model()
        queries = CLOUD.points[:10]
        out = descend_saliency(model, CLOUD, queries, 1e-3, 0)
        np.testing.assert_array_equal(out, queries)
        assert out is not queries

    def test_single_step_is_exactly_one_gradient_move(self):
        model = AnalyticModel(constant(0.9), bump_field((0.1, 0.0, -0.05)))
        queries = np.array([[0.0, 0.05, 0.0], [0.2, -0.1, 0.1]])
        lam = 1e-2
        out = descend_saliency(model, CLOUD, queries, lam, 1)
        q = torch.tensor(queries, requires_grad=True, dtype=torch.float64)
        sal = model.sal_fn(q)
        (grad,) = torch.autograd.grad((1.0 - sal).sum(), q)
        expected = np.clip(queries - lam * grad.numpy(), -0.5, 0.5)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_each_query_descends_independently(self):
        model = FieldModel(LITE, seed=2)
        rng = np.random.default_rng(7)
        queries = rng.uniform(-0.4, 0.4, size=(20, 3))
        full = descend_saliency(model, CLOUD, queries, 1e-3, 5)
        tail = descend_saliency(model, CLOUD, queries[1:], 1e-3, 5)
        np.testing.assert_allclose(full[1:], tail, atol=1e-6)

    def test_queries_stay_clamped_inside_the_cube(self):
        model = AnalyticModel(constant(0.9), bump_field((0.49, 0.49, 0.49), width=0.5))
        queries = np.array([[0.45, 0.45, 0.45], [-0.45, 0.0, 0.0]])
        out = descend_saliency(model, CLOUD, queries, 5.0, 20)
        assert np.all(np.abs(out) <= 0.5)

    def test_descent_climbs_the_bump(self):
        center = np.array([0.12, -0.08, 0.2])
        model = AnalyticModel(constant(0.9), bump_field(center, width=0.15))
        start = center + np.array([[0.1, -0.05, 0.08]])
        out = descend_saliency(model, CLOUD, start, 1e-2, 50)
        assert np.linalg.norm(out[0] - center) < np.linalg.norm(start[0] - center)


def standard_params(**kw) -> ExtractParams:
    base = dict(
        step_size=1e-3,
        n_steps=5,
        occupancy_threshold=0.5,
        saliency_threshold=0.7,
        infer_grid_resolution=(12, 12, 12),
        nms_radius=0.15,
    )
    base.update(kw)
    return ExtractParams(**base)


def four_bumps():
    centers = torch.tensor(
        [
            [0.25, 0.25, 0.0],
            [-0.25, 0.25, 0.1],
            [0.25, -0.3, -0.1],
            [-0.3, -0.25, 0.0],
        ],
        dtype=torch.float64,
    )
    heights = torch.tensor([0.92, 0.88, 0.85, 0.8], dtype=torch.float64)

    def fn(q):
        d2 = ((q[:, None, :] - centers[None, :, :]) ** 2).sum(dim=2)
        return 0.05 + (heights * torch.exp(-d2 / (2.0 * 0.09**2))).sum(dim=1).clamp(max=0.93)

    return fn, centers.numpy()


class TestExtractKeypoints:
    def test_dead_occupancy_yields_empty_set_with_note(self):
        model = biased_model(occ_bias=-40.0)
        result = extract_keypoints(model, CLOUD, standard_params())
        assert len(result) == 0
        assert "occupancy filter" in result.provenance.note
        assert result.provenance.n_occupied == 0
        assert result.provenance.n_lattice == 12**3

    def test_dead_saliency_yields_empty_set_with_note(self):
        model = biased_model(occ_bias=40.0, sal_bias=-40.0)
        result = extract_keypoints(model, CLOUD, standard_params())
        assert len(result) == 0
        assert "saliency threshold" in result.provenance.note
        assert result.provenance.n_occupied == 12**3

    def test_bump_field_extraction_finds_the_bumps(self):
        sal_fn, centers = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        result = extract_keypoints(model, CLOUD, standard_params(n_steps=20, step_size=5e-3))
        assert len(result) == 4
        for center in centers:
            gap = np.linalg.norm(result.coordinates - center, axis=1).min()
            assert gap < 0.05
        assert np.all(np.diff(result.saliencies) <= 0)

    def test_invariants_hold_on_every_extraction(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        result = extract_keypoints(model, CLOUD, standard_params())
        coords = result.coordinates
        deltas = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        deltas[np.diag_indices(len(coords))] = np.inf
        assert deltas.min() > result.provenance.nms_radius
        assert result.saliencies.min() > result.provenance.saliency_threshold
        assert result.provenance.n_lattice >= result.provenance.n_occupied
        assert result.provenance.n_occupied >= result.provenance.n_salient
        assert result.provenance.n_salient >= result.provenance.n_after_nms
        assert result.provenance.n_after_nms == len(result)

    def test_zero_iterations_is_the_threshold_nms_baseline(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        result = extract_keypoints(model, CLOUD, standard_params(n_steps=0))
        assert result.provenance.iterations == 0
        assert len(result) > 0
        lattice = cube_lattice((12, 12, 12))
        lattice_set = {tuple(np.round(p, 12)) for p in lattice}
        for coord in result.coordinates:
            assert tuple(np.round(coord, 12)) in lattice_set

    def test_descent_raises_survivor_saliency_over_baseline(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        baseline = extract_keypoints(model, CLOUD, standard_params(n_steps=0))
        refined = extract_keypoints(
            model, CLOUD, standard_params(n_steps=20, step_size=5e-3)
        )
        assert refined.saliencies.mean() >= baseline.saliencies.mean()

    def test_truncation_keeps_the_strongest(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        full = extract_keypoints(model, CLOUD, standard_params())
        cut = extract_keypoints(model, CLOUD, standard_params(max_keypoints=2))
        assert len(cut) == 2
        np.testing.assert_allclose(cut.saliencies, full.saliencies[:2])

    def test_snap_moves_coordinates_onto_the_cloud(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        result = extract_keypoints(
            model, CLOUD, standard_params(snap_to_input=True)
        )
        assert result.provenance.snapped
        cloud_set = {tuple(p) for p in CLOUD.points}
        for coord in result.coordinates:
            assert tuple(coord) in cloud_set

    def test_extraction_is_deterministic(self):
        sal_fn, _ = four_bumps()
        model = AnalyticModel(constant(0.9), sal_fn)
        a = extract_keypoints(model, CLOUD, standard_params())
        b = extract_keypoints(model, CLOUD, standard_params())
        np.testing.assert_array_equal(a.coordinates, b.coordinates)
        np.testing.assert_array_equal(a.saliencies, b.saliencies)


class TestKeypointSetValidation:
    def _diag(self, **kw):
        base = dict(
            n_lattice=8,
            n_occupied=8,
            n_salient=4,
            n_after_nms=2,
            iterations=3,
            saliency_threshold=0.5,
            nms_radius=0.1,
        )
        base.update(kw)
        return ExtractDiagnostics(**base)

    def test_rejects_unsorted_scores(self):
        with pytest.raises(ValueError, match="sorted descending"):
            KeypointSet(np.zeros((2, 3)), np.array([0.6, 0.8]), self._diag())

    def test_rejects_below_threshold_scores(self):
        with pytest.raises(ValueError, match="saliency threshold"):
            KeypointSet(np.zeros((1, 3)), np.array([0.4]), self._diag())

    def test_rejects_pairs_inside_the_nms_radius(self):
        coords = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
        with pytest.raises(ValueError, match="NMS radius"):
            KeypointSet(coords, np.array([0.9, 0.8]), self._diag())

    def test_snapped_sets_may_sit_closer(self):
        coords = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
        result = KeypointSet(coords, np.array([0.9, 0.8]), self._diag(snapped=True))
        assert len(result) == 2

    def test_empty_set_is_valid(self):
        result = KeypointSet(np.zeros((0, 3)), np.zeros(0), self._diag(note="empty"))
        assert len(result) == 0


def sphere_occupancy(radius=0.3, sharpness=50.0):
    def fn(q):
        r = torch.linalg.norm(q, dim=1)
        return torch.sigmoid(sharpness * (radius - r))

    return fn


class TestReconstructSurface:
    def test_sphere_isosurface_radius_matches_the_analytic_level_set(self):
        radius, sharpness = 0.3, 50.0
        model = AnalyticModel(sphere_occupancy(radius, sharpness), constant(0.5))
        mesh = reconstruct_surface(model, CLOUD, iso_threshold=0.4, resolution=48)
        assert len(mesh.vertices) > 100
        # sigmoid(s (r0 - r)) = 0.4  =>  r = r0 + logit(0.4)/s... sign: occ
        # falls with r, so the 0.4 level sits just outside r0
        iso_radius = radius - math.log(0.4 / 0.6) / sharpness
        radii = np.linalg.norm(mesh.vertices, axis=1)
        np.testing.assert_allclose(radii, iso_radius, atol=5e-3)

    def test_triangles_reference_valid_vertices_with_area(self):
        model = AnalyticModel(sphere_occupancy(), constant(0.5))
        mesh = reconstruct_surface(model, CLOUD, resolution=32)
        assert mesh.triangles.min() >= 0
        assert mesh.triangles.max() < len(mesh.vertices)
        a = mesh.vertices[mesh.triangles[:, 0]]
        b = mesh.vertices[mesh.triangles[:, 1]]
        c = mesh.vertices[mesh.triangles[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        assert areas.min() > 1e-12

    def test_constant_field_yields_empty_mesh_with_note(self):
        model = AnalyticModel(constant(0.9), constant(0.5))
        mesh = reconstruct_surface(model, CLOUD, resolution=16)
        assert len(mesh.vertices) == 0
        assert len(mesh.triangles) == 0
        assert "isovalue" in mesh.note

    def test_vertices_stay_inside_the_canonical_cube(self):
        model = AnalyticModel(sphere_occupancy(), constant(0.5))
        mesh = reconstruct_surface(model, CLOUD, resolution=24)
        assert np.all(np.abs(mesh.vertices) <= 0.5)

    def test_resolution_validation(self):
        model = AnalyticModel(sphere_occupancy(), constant(0.5))
        with pytest.raises(ValueError, match="resolution"):
            reconstruct_surface(model, CLOUD, resolution=1)

    def test_mesh_index_validation(self):
        with pytest.raises(ValueError, match="out of range"):
            SurfaceMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


class TestFieldSlice:
    def test_image_shape(self):
        model = biased_model()
        image = field_slice(model, CLOUD, "occupancy", "z", "mid", resolution=24)
        assert image.shape == (24, 24)
        image = field_slice(model, CLOUD, "saliency", "x", "max-project", resolution=9)
        assert image.shape == (9, 9)

    def test_mid_slice_matches_direct_field_evaluation(self):
        model = FieldModel(LITE, seed=3)
        resolution = 16
        image = field_slice(model, CLOUD, "saliency", "y", "mid", resolution)
        centers = -0.5 + (np.arange(resolution) + 0.5) / resolution
        rows, cols = np.meshgrid(centers, centers, indexing="ij")
        pts = np.zeros((resolution * resolution, 3))
        pts[:, 0] = rows.ravel()  # remaining axes for y: x rows, z cols
        pts[:, 2] = cols.ravel()
        pts[:, 1] = 0.0
        direct = np.array(
            [s.saliency for s in evaluate_field(model, CLOUD, pts)]
        ).reshape(resolution, resolution)
        np.testing.assert_allclose(image, direct, atol=1e-6)

    def test_max_projection_catches_an_off_plane_spike(self):
        spike = bump_field((0.2, -0.1, 0.3), width=0.06, floor=0.1, height=0.8)
        model = AnalyticModel(constant(0.5), spike)
        mid = field_slice(model, CLOUD, "saliency", "z", "mid", 32)
        projected = field_slice(model, CLOUD, "saliency", "z", "max-project", 32)
        assert np.all(projected >= mid - 1e-12)
        assert projected.max() > 0.8
        assert mid.max() < 0.5
        row, col = np.unravel_index(projected.argmax(), projected.shape)
        centers = -0.5 + (np.arange(32) + 0.5) / 32
        assert abs(centers[row] - 0.2) < 1.0 / 32
        assert abs(centers[col] - (-0.1)) < 1.0 / 32

    def test_row_axis_is_the_first_remaining_axis(self):
        def occ(q):
            return torch.sigmoid(5.0 * q[:, 0])

        model = AnalyticModel(occ, constant(0.5))
        image = field_slice(model, CLOUD, "occupancy", "z", "mid", 16)
        assert np.all(np.diff(image[:, 0]) > 0)
        np.testing.assert_allclose(image[0, :], image[0, 0])

    def test_argument_validation(self):
        model = biased_model()
        with pytest.raises(ValueError, match="axis"):
            field_slice(model, CLOUD, "occupancy", "w", "mid")
        with pytest.raises(ValueError, match="field"):
            field_slice(model, CLOUD, "density", "x", "mid")
        with pytest.raises(ValueError, match="mode"):
            field_slice(model, CLOUD, "occupancy", "x", "average")
