"""Implicit occupancy and keypoint-saliency fields over point clouds.

The package trains a pair of coordinate-conditioned probability fields on a
single point cloud or a stream of them: an occupancy field that answers "is
this location on the surface shell?" and a saliency field whose local maxima
are repeatable interest points.  Everything downstream of the fields is
classical geometry: gradient-descent keypoint refinement, marching-cubes
surface reconstruction, and detector / descriptor evaluation metrics.

Typical round trip::

    from kpfield import fit, preset, generate_shape, extract_keypoints

    sample = generate_shape("box", n_points=2048, seed=0)
    result = fit([sample.cloud], preset("lite-overfit"), "runs/box")
    state = load_train_state(result.checkpoint_path)
    keypoints = extract_keypoints(state.model, sample.cloud, state.config.extract)
"""

from kpfield.config import (
    ENCODER_VARIANTS,
    PRESET_NAMES,
    AugmentParams,
    ExtractParams,
    ModelConfig,
    RunConfig,
    TrainConfig,
    apply_overrides,
    load_config,
    preset,
    save_config,
)
from kpfield.extraction import (
    ExtractDiagnostics,
    KeypointSet,
    SurfaceMesh,
    descend_saliency,
    extract_from_raw,
    extract_keypoints,
    field_slice,
    reconstruct_surface,
    saliency_energy,
)
from kpfield.geometry import (
    CUBE_HALF,
    FeatureVolume,
    NormParams,
    PointCloud,
    QueryGrid,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    build_query_grids,
    cube_lattice,
    make_query_grid,
    nms,
    normalize_cloud,
    random_downsample,
    random_se3,
    snap_to_input,
    trilinear_sample,
)
from kpfield.io import (
    Checkpoint,
    DatasetManifest,
    load_annotations,
    load_checkpoint,
    load_cloud,
    load_keypoints,
    load_manifest,
    save_checkpoint,
    save_cloud,
    save_keypoints,
    save_mesh,
    save_slice,
)
from kpfield.losses import (
    LossReport,
    OccupancyBatch,
    occupancy_loss,
    peakiness_loss,
    repeatability_loss,
    sample_occupancy_batch,
    sparsity_loss,
    surface_constraint_loss,
    total_loss,
)
from kpfield.metrics import (
    REGISTRATION_KEYPOINT_BUDGETS,
    SWEEP_EPSILON,
    RegistrationPair,
    RegistrationParams,
    RegistrationReport,
    fit_rigid,
    geodesic_distances,
    histogram_descriptor,
    make_field_detector,
    match_descriptors,
    random_detector,
    ransac_rigid,
    read_metric_csv,
    registration_metrics,
    relative_repeatability,
    repeatability_both_ways,
    semantic_miou_annotated,
    semantic_miou_pairwise,
    write_metric_csv,
)
from kpfield.model import (
    FieldModel,
    FieldSample,
    decode_occupancy,
    decode_saliency,
    encode,
    ensure_volume,
    evaluate_field,
    new_model,
    positional_encode,
)
from kpfield.synthetic import KINDS, ShapeSample, ShapeSpec, generate, generate_shape
from kpfield.training import (
    FitResult,
    TrainState,
    fit,
    load_train_state,
    make_training_pair,
    new_train_state,
    save_train_state,
    train_step,
)

__all__ = [
    "AugmentParams",
    "CUBE_HALF",
    "Checkpoint",
    "DatasetManifest",
    "ENCODER_VARIANTS",
    "ExtractDiagnostics",
    "ExtractParams",
    "FeatureVolume",
    "FieldModel",
    "FieldSample",
    "FitResult",
    "KINDS",
    "KeypointSet",
    "LossReport",
    "ModelConfig",
    "NormParams",
    "OccupancyBatch",
    "PRESET_NAMES",
    "PointCloud",
    "QueryGrid",
    "REGISTRATION_KEYPOINT_BUDGETS",
    "RegistrationPair",
    "RegistrationParams",
    "RegistrationReport",
    "RigidTransform",
    "RunConfig",
    "SWEEP_EPSILON",
    "ShapeSample",
    "ShapeSpec",
    "SurfaceMesh",
    "TrainConfig",
    "TrainState",
    "add_gaussian_noise",
    "apply_overrides",
    "apply_transform",
    "build_query_grids",
    "cube_lattice",
    "decode_occupancy",
    "decode_saliency",
    "descend_saliency",
    "encode",
    "ensure_volume",
    "evaluate_field",
    "extract_from_raw",
    "extract_keypoints",
    "field_slice",
    "fit",
    "fit_rigid",
    "generate",
    "generate_shape",
    "geodesic_distances",
    "histogram_descriptor",
    "load_annotations",
    "load_checkpoint",
    "load_cloud",
    "load_config",
    "load_keypoints",
    "load_manifest",
    "load_train_state",
    "make_field_detector",
    "make_query_grid",
    "make_training_pair",
    "match_descriptors",
    "new_model",
    "new_train_state",
    "nms",
    "normalize_cloud",
    "occupancy_loss",
    "peakiness_loss",
    "positional_encode",
    "preset",
    "random_detector",
    "random_downsample",
    "random_se3",
    "ransac_rigid",
    "read_metric_csv",
    "reconstruct_surface",
    "registration_metrics",
    "relative_repeatability",
    "repeatability_both_ways",
    "repeatability_loss",
    "sample_occupancy_batch",
    "saliency_energy",
    "save_checkpoint",
    "save_cloud",
    "save_config",
    "save_keypoints",
    "save_mesh",
    "save_slice",
    "save_train_state",
    "semantic_miou_annotated",
    "semantic_miou_pairwise",
    "snap_to_input",
    "sparsity_loss",
    "surface_constraint_loss",
    "total_loss",
    "train_step",
    "trilinear_sample",
    "write_metric_csv",
]

__version__ = "0.1.0"
