"""The conditional implicit network behind both probability fields.

An input cloud is lifted to per-point features, scatter-averaged into a voxel
grid, and refined by a volumetric network into a feature volume.  Any query
coordinate is then answered by trilinearly sampling that volume, encoding the
coordinate itself, and pushing the concatenated features through two
independent heads that squash to [0, 1]: one for surface occupancy, one for
keypoint saliency.

Everything downstream needs exact gradients through both model parameters
and query coordinates, so the whole query path (trilinear sampling included)
is built from differentiable ops, and every nonlinearity is smooth (GELU)
to keep finite-difference validation meaningful.

Two encoder variants exist: `full` (residual point network plus a three-level
volumetric U-net) and `lite` (two-layer point MLP plus two 3D convolutions),
the latter sized for CPU-scale experiments.

The public functions at the bottom take and return numpy; the FieldModel
methods speak torch and are the differentiable core used by the losses and
the keypoint optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from kpfield.config import ModelConfig
from kpfield.geometry import CUBE_HALF, FeatureVolume, PointCloud, _as_points


@dataclass(frozen=True)
class FieldSample:
    """Both field values at one query point."""

    occupancy: float
    saliency: float

    def __post_init__(self) -> None:
        for name in ("occupancy", "saliency"):
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be a probability, got {value}")


class _ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(torch.nn.functional.gelu(x))))


class _Head(nn.Module):
    """Pointwise decoder: concat features -> residual stack -> probability."""

    def __init__(self, in_width: int, width: int, blocks: int):
        super().__init__()
        self.fc_in = nn.Linear(in_width, width)
        self.blocks = nn.ModuleList(_ResidualBlock(width) for _ in range(blocks))
        self.fc_out = nn.Linear(width, 1)

    def forward(self, x: Tensor) -> Tensor:
        x = self.fc_in(x)
        for block in self.blocks:
            x = block(x)
        return torch.sigmoid(self.fc_out(torch.nn.functional.gelu(x))).squeeze(-1)


class _PointNet(nn.Module):
    """Per-point feature network (no cross-point mixing; the volume does that)."""

    def __init__(self, c1: int, variant: str):
        super().__init__()
        self.fc_in = nn.Linear(3, c1)
        if variant == "full":
            self.blocks = nn.ModuleList(_ResidualBlock(c1) for _ in range(2))
        else:
            self.blocks = nn.ModuleList([])
        self.fc_out = nn.Linear(c1, c1)

    def forward(self, pts: Tensor) -> Tensor:
        x = torch.nn.functional.gelu(self.fc_in(pts))
        for block in self.blocks:
            x = block(x)
        return self.fc_out(x)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.nn.functional.gelu(self.conv(x))


class _LiteRefiner(nn.Module):
    """Two 3D convolutions; enough to propagate context on small volumes."""

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.conv1 = nn.Conv3d(c1, c2, kernel_size=3, padding=1)
        self.conv2 = nn.Conv3d(c2, c2, kernel_size=3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(torch.nn.functional.gelu(self.conv1(x)))


class _UNetRefiner(nn.Module):
    """Three-level volumetric U-net with channel doubling and skip links.

    Average pooling and smooth activations keep the map differentiable
    everywhere; upsampling targets the skip tensor's exact shape so odd
    volume resolutions survive the round trip.
    """

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.stem = _ConvBlock(c1, c2)
        self.enc0 = _ConvBlock(c2, c2)
        self.enc1 = _ConvBlock(c2, 2 * c2)
        self.enc2 = _ConvBlock(2 * c2, 4 * c2)
        self.dec1 = _ConvBlock(4 * c2 + 2 * c2, 2 * c2)
        self.dec0 = _ConvBlock(2 * c2 + c2, c2)
        self.out = nn.Conv3d(c2, c2, kernel_size=3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        e0 = self.enc0(self.stem(x))
        e1 = self.enc1(torch.nn.functional.avg_pool3d(e0, 2))
        e2 = self.enc2(torch.nn.functional.avg_pool3d(e1, 2))
        u1 = torch.nn.functional.interpolate(e2, size=e1.shape[2:], mode="nearest")
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        u0 = torch.nn.functional.interpolate(d1, size=e0.shape[2:], mode="nearest")
        d0 = self.dec0(torch.cat([u0, e0], dim=1))
        return self.out(d0)


class FieldModel(nn.Module):
    """Occupancy and saliency fields conditioned on a point cloud.

    Construction is deterministic per seed.  All tensor methods operate in
    the model's parameter dtype; call `.double()` for float64 evaluation.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.point_net = _PointNet(config.c1, config.encoder_variant)
        if config.encoder_variant == "full":
            self.refiner: nn.Module = _UNetRefiner(config.c1, config.c2)
        else:
            self.refiner = _LiteRefiner(config.c1, config.c2)
        self.pos_fc1 = nn.Linear(3, config.ce)
        self.pos_fc2 = nn.Linear(config.ce, config.ce)
        head_in = config.ce + config.c2
        self.occupancy_net = _Head(head_in, config.decoder_width, config.decoder_blocks)
        self.saliency_net = _Head(head_in, config.decoder_width, config.decoder_blocks)
        self._seed_parameters(seed)

    def _seed_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Conv3d)):
                    fan_in = module.weight.shape[1]
                    if module.weight.dim() > 2:
                        fan_in *= int(np.prod(module.weight.shape[2:]))
                    bound = 1.0 / math.sqrt(fan_in)
                    module.weight.uniform_(-bound, bound, generator=gen)
                    if module.bias is not None:
                        module.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_fc1.weight.dtype

    def tensor(self, array: np.ndarray) -> Tensor:
        return torch.as_tensor(np.asarray(array), dtype=self.dtype)

    # ---------------------------------------------------------------- encoder

    def _voxel_indices(self, pts: Tensor) -> Tensor:
        res = torch.tensor(self.config.volume_resolution, dtype=torch.long)
        scaled = (pts.detach() + CUBE_HALF) * res.to(pts.dtype)
        return scaled.floor().long().clamp(
            min=torch.zeros(3, dtype=torch.long), max=res - 1
        )

    def feature_volume(self, pts: Tensor) -> Tensor:
        """Encode a cloud tensor (N, 3) into a (c2, H, W, D) feature volume."""
        if pts.dim() != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"expected a non-empty (N, 3) cloud, got {tuple(pts.shape)}")
        if bool(pts.detach().abs().max() > 2 * CUBE_HALF + 1e-9):
            raise ValueError(
                "cloud extends outside the supported region; normalize it first "
                f"(max |coord| = {float(pts.detach().abs().max()):.4f}, limit 1.0)"
            )
        h, w, d = self.config.volume_resolution
        feats = self.point_net(pts)
        idx = self._voxel_indices(pts)
        flat = (idx[:, 0] * w + idx[:, 1]) * d + idx[:, 2]
        sums = torch.zeros(self.config.c1, h * w * d, dtype=pts.dtype)
        sums.index_add_(1, flat, feats.transpose(0, 1))
        counts = torch.zeros(h * w * d, dtype=pts.dtype)
        counts.index_add_(0, flat, torch.ones(len(pts), dtype=pts.dtype))
        mean = sums / counts.clamp(min=1.0)
        volume = mean.reshape(self.config.c1, h, w, d).unsqueeze(0)
        return self.refiner(volume).squeeze(0)

    # ---------------------------------------------------------------- sampling

    def sample_volume(self, volume: Tensor, queries: Tensor) -> Tensor:
        """Trilinear sampling of (C, H, W, D) at (M, 3); differentiable in both.

        Matches the numpy sampler: fractional indices clamp to the volume,
        so queries outside it read the nearest boundary value.
        """
        res = torch.tensor(volume.shape[1:], dtype=volume.dtype)
        spacing = (2 * CUBE_HALF) / res
        origin = -CUBE_HALF + spacing / 2
        idx = (queries - origin) / spacing
        idx = torch.minimum(torch.maximum(idx, torch.zeros_like(res)), res - 1)
        base = torch.minimum(torch.floor(idx), res - 2)
        frac = idx - base
        base = base.long()
        out = None
        for corner in range(8):
            dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
            weight = (
                (frac[:, 0] if dx else 1 - frac[:, 0])
                * (frac[:, 1] if dy else 1 - frac[:, 1])
                * (frac[:, 2] if dz else 1 - frac[:, 2])
            )
            values = volume[:, base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
            term = values * weight.unsqueeze(0)
            out = term if out is None else out + term
        return out.transpose(0, 1)

    # ---------------------------------------------------------------- decoders

    def positional(self, queries: Tensor) -> Tensor:
        return self.pos_fc2(torch.nn.functional.gelu(self.pos_fc1(queries)))

    def field_probs(self, volume: Tensor, queries: Tensor) -> tuple[Tensor, Tensor]:
        """(occupancy, saliency) probabilities for queries against a volume."""
        features = torch.cat([self.positional(queries), self.sample_volume(volume, queries)], dim=1)
        return self.occupancy_net(features), self.saliency_net(features)


def new_model(config: ModelConfig, seed: int = 0) -> FieldModel:
    """Build a FieldModel with deterministic seeded initialization."""
    return FieldModel(config, seed=seed)


# --------------------------------------------------------------------------
# numpy-facing API


def _cloud_points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)


def encode(model: FieldModel, cloud: PointCloud | np.ndarray) -> FeatureVolume:
    """Encode a canonical cloud into its feature volume (numpy values)."""
    pts = model.tensor(_cloud_points(cloud))
    with torch.no_grad():
        volume = model.feature_volume(pts)
    return FeatureVolume.for_cube(volume.numpy())


def ensure_volume(
    model: FieldModel,
    source: PointCloud | np.ndarray | FeatureVolume | Tensor,
) -> Tensor:
    """Feature volume tensor from a cloud, a cached FeatureVolume, or a
    volume tensor passed through unchanged (keeping any live graph)."""
    if isinstance(source, Tensor) and source.dim() == 4:
        return source
    if isinstance(source, FeatureVolume):
        return model.tensor(source.values)
    return model.feature_volume(model.tensor(_cloud_points(source)))


def positional_encode(model: FieldModel, queries: np.ndarray) -> np.ndarray:
    """Pointwise coordinate embedding of shape (M, ce)."""
    q = model.tensor(_as_points(queries))
    with torch.no_grad():
        return model.positional(q).numpy()


def _decode(model: FieldModel, head: nn.Module, q_e: np.ndarray, g_q: np.ndarray) -> np.ndarray:
    q_e = np.asarray(q_e, dtype=np.float64)
    g_q = np.asarray(g_q, dtype=np.float64)
    if q_e.ndim != 2 or q_e.shape[1] != model.config.ce:
        raise ValueError(f"positional features must be (M, {model.config.ce}), got {q_e.shape}")
    if g_q.ndim != 2 or g_q.shape[1] != model.config.c2:
        raise ValueError(f"volume features must be (M, {model.config.c2}), got {g_q.shape}")
    if len(q_e) != len(g_q):
        raise ValueError(f"feature batch mismatch: {len(q_e)} vs {len(g_q)}")
    features = torch.cat([model.tensor(q_e), model.tensor(g_q)], dim=1)
    with torch.no_grad():
        return head(features).numpy().astype(np.float64)


def decode_occupancy(model: FieldModel, q_e: np.ndarray, g_q: np.ndarray) -> np.ndarray:
    """Occupancy probabilities from positional and sampled volume features."""
    return _decode(model, model.occupancy_net, q_e, g_q)


def decode_saliency(model: FieldModel, q_e: np.ndarray, g_q: np.ndarray) -> np.ndarray:
    """Saliency probabilities from positional and sampled volume features."""
    return _decode(model, model.saliency_net, q_e, g_q)


_QUERY_CHUNK = 65536


def evaluate_field(
    model: FieldModel,
    cloud_or_volume: PointCloud | np.ndarray | FeatureVolume,
    queries: np.ndarray,
) -> list[FieldSample]:
    """Evaluate both fields at each query; accepts a cached FeatureVolume.

    Passing the FeatureVolume returned by `encode` skips re-encoding and
    yields identical values.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(queries) == 0:
        return []
    if isinstance(cloud_or_volume, FeatureVolume):
        volume = model.tensor(cloud_or_volume.values)
    else:
        with torch.no_grad():
            volume = model.feature_volume(model.tensor(_cloud_points(cloud_or_volume)))
    samples: list[FieldSample] = []
    with torch.no_grad():
        for start in range(0, len(queries), _QUERY_CHUNK):
            chunk = model.tensor(queries[start : start + _QUERY_CHUNK])
            occ, sal = model.field_probs(volume, chunk)
            samples.extend(
                FieldSample(float(o), float(s))
                for o, s in zip(occ.numpy(), sal.numpy())
            )
    return samples
