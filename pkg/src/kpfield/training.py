"""Training-pair construction, the optimization loop, and exact resumability.

A training step sees pairs (P, TP): the canonical cloud and a second view
produced by a rigid transform followed by downsampling and Gaussian noise.
Local query grids ride on P and transport to the second view through the
known transform, which is what makes the repeatability objective
self-supervised.

Checkpoints capture model parameters, optimizer moments, the batch rng, and
the loss history, so a resumed run reproduces the uninterrupted one bitwise.
"""

from __future__ import annotations

import ctypes
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from kpfield._atomic import atomic_write_text
from kpfield.config import (
    RunConfig,
    TrainConfig,
    run_config_from_dict,
    run_config_to_dict,
)
from kpfield.geometry import (
    NormParams,
    PointCloud,
    QueryGrid,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    build_query_grids,
    normalize_cloud,
    random_downsample,
    random_se3,
)
from kpfield.io import Checkpoint, load_checkpoint, save_checkpoint
from kpfield.losses import LossReport, OccupancyBatch, sample_occupancy_batch, total_loss
from kpfield.model import FieldModel

try:
    _LIBC = ctypes.CDLL("libc.so.6")
    _LIBC.malloc_trim
except (OSError, AttributeError):
    _LIBC = None

def _release_heap() -> None:
    # glibc keeps extending the heap instead of reusing freed chunks on some
    # step-allocation patterns, growing resident memory by megabytes per step
    # with no live object backing it; trimming after every step keeps the
    # footprint flat and costs microseconds against a multi-ms step
    if _LIBC is not None:
        _LIBC.malloc_trim(0)


@dataclass(frozen=True)
class TrainBatchItem:
    """One training pair plus the query sets the objectives consume.

    `view_cloud` is augment(transform(cloud)); when `view_params` is set the
    second view was additionally renormalized into the canonical cube and
    transported grid queries must pass through the same similarity.
    `reverse_grids` (grids on the second view) turn on symmetrized
    repeatability.
    """

    cloud: PointCloud
    view_cloud: PointCloud
    transform: RigidTransform
    grids: list[QueryGrid]
    occupancy: OccupancyBatch
    occupancy_threshold: float
    view_params: NormParams | None = None
    reverse_grids: list[QueryGrid] | None = None


def make_training_pair(
    cloud: PointCloud, config: TrainConfig, rng: np.random.Generator
) -> TrainBatchItem:
    """Build one TrainBatchItem: transform, augment, grids, occupancy labels.

    Downsampling (rate uniform in [1, max]) and noise apply AFTER the rigid
    transform.  With augmentation disabled and a zero rotation/translation
    range the second view equals the first bitwise.
    """
    if len(cloud) < 4:
        raise ValueError(f"degenerate cloud: {len(cloud)} points")
    aug = config.aug
    transform = random_se3(rng, aug.max_rotation, aug.max_translation)
    view = PointCloud(apply_transform(cloud.points, transform))
    if aug.max_downsample_rate > 1.0:
        rate = rng.uniform(1.0, aug.max_downsample_rate)
        view = random_downsample(view, rate, rng)
    sigma_lo, sigma_hi = aug.noise_sigma_range
    if sigma_hi > 0.0:
        view = add_gaussian_noise(view, rng.uniform(sigma_lo, sigma_hi), rng)
    view_params = None
    if config.renormalize_view:
        view, view_params = normalize_cloud(view.points)
    grids = build_query_grids(
        cloud, config.n_grids, config.grid_scale, config.grid_resolution, rng
    )
    occupancy = sample_occupancy_batch(cloud, config.n_pos, config.n_neg, rng)
    reverse_grids = None
    if config.symmetrize:
        reverse_grids = build_query_grids(
            view, config.n_grids, config.grid_scale, config.grid_resolution, rng
        )
    return TrainBatchItem(
        cloud=cloud,
        view_cloud=view,
        transform=transform,
        grids=grids,
        occupancy=occupancy,
        occupancy_threshold=config.occupancy_threshold,
        view_params=view_params,
        reverse_grids=reverse_grids,
    )


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Base learning rate through the first phase, then dropped once."""
    if not 0 <= epoch < config.epochs_total:
        raise ValueError(
            f"epoch {epoch} outside [0, {config.epochs_total})"
        )
    if epoch < config.epochs_first:
        return config.lr
    return config.lr / config.lr_drop_factor


@dataclass
class TrainState:
    """Everything the loop carries: model, optimizer, rng, counters, history."""

    model: FieldModel
    optimizer: torch.optim.Adam
    config: RunConfig
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    def loss_weights(self) -> tuple[float, float, float, float]:
        t = self.config.train
        return (
            t.weight_occupancy,
            t.weight_repeatability,
            t.weight_surface,
            t.weight_sparsity,
        )


def new_train_state(config: RunConfig) -> TrainState:
    """Fresh state: seeded model, Adam at the base rate, seeded batch rng."""
    model = FieldModel(config.model, seed=config.train.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.train.lr)
    rng = np.random.default_rng(config.train.seed)
    return TrainState(model=model, optimizer=optimizer, config=config, rng=rng)


def train_step(
    state: TrainState, items: Sequence[TrainBatchItem]
) -> tuple[TrainState, LossReport]:
    """One Adam update on the batch-mean total loss; returns the mean report.

    The learning rate follows the epoch schedule.  A non-finite loss aborts
    with a diagnostic naming the diverged term.
    """
    if len(items) != state.config.train.batch_size:
        raise ValueError(
            f"batch has {len(items)} items, expected batch_size="
            f"{state.config.train.batch_size}"
        )
    lr = lr_schedule(state.epoch, state.config.train)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    weights = state.loss_weights()
    reports = []
    try:
        for item in items:
            reports.append(total_loss(state.model, item, weights=weights))
    except ValueError as err:
        raise RuntimeError(
            f"training diverged at epoch={state.epoch} step={state.step}: {err}"
        ) from err
    mean_total = torch.stack([r.tensor for r in reports]).mean()
    state.optimizer.zero_grad()
    mean_total.backward()
    state.optimizer.step()
    state.step += 1
    n = float(len(reports))
    report = LossReport(
        l_o=sum(r.l_o for r in reports) / n,
        l_r=sum(r.l_r for r in reports) / n,
        l_m=sum(r.l_m for r in reports) / n,
        l_s=sum(r.l_s for r in reports) / n,
        total=float(mean_total.detach()),
        tensor=None,
    )
    return state, report


def progress_line(epoch: int, step: int, report: LossReport, lr: float) -> str:
    return (
        f"epoch={epoch} step={step} "
        f"l_o={report.l_o:.6f} l_r={report.l_r:.6f} "
        f"l_m={report.l_m:.6f} l_s={report.l_s:.6f} "
        f"total={report.total:.6f} lr={lr:g}"
    )


# ---------------------------------------------------------------------------
# checkpoint bridging


def _optimizer_arrays(optimizer: torch.optim.Adam) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    state = optimizer.state_dict()["state"]
    for pid, entry in state.items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                arrays[f"opt/{pid}/{key}"] = value.detach().cpu().numpy()
            else:
                arrays[f"opt/{pid}/{key}"] = np.asarray(value)
    return arrays


def _restore_optimizer(
    optimizer: torch.optim.Adam, arrays: dict[str, np.ndarray]
) -> None:
    base = optimizer.state_dict()
    state: dict[int, dict[str, object]] = {}
    for name, value in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, pid_text, key = name.split("/", 2)
        entry = state.setdefault(int(pid_text), {})
        entry[key] = torch.as_tensor(value)
    if state:
        optimizer.load_state_dict({"state": state, "param_groups": base["param_groups"]})


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    arrays = {
        f"model/{key}": value.detach().cpu().numpy()
        for key, value in state.model.state_dict().items()
    }
    arrays.update(_optimizer_arrays(state.optimizer))
    meta = {
        "run_config": run_config_to_dict(state.config),
        "step": state.step,
        "history": state.history,
    }
    return Checkpoint(
        model_config=state.config.model,
        arrays=arrays,
        epoch=state.epoch,
        rng_state=state.rng.bit_generator.state,
        meta=meta,
    )


def save_train_state(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    save_checkpoint(path, state_to_checkpoint(state))
    return path


def load_train_state(path: str | Path) -> TrainState:
    """Rebuild a TrainState so training continues bitwise-identically."""
    ckpt = load_checkpoint(path)
    config = run_config_from_dict(ckpt.meta["run_config"])
    model = FieldModel(config.model, seed=config.train.seed)
    model_arrays = {
        key[len("model/") :]: torch.as_tensor(value)
        for key, value in ckpt.arrays.items()
        if key.startswith("model/")
    }
    model.load_state_dict(model_arrays, strict=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.train.lr)
    _restore_optimizer(optimizer, ckpt.arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        rng=rng,
        epoch=ckpt.epoch,
        step=int(ckpt.meta["step"]),
        history=list(ckpt.meta["history"]),
    )


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class FitResult:
    checkpoint_path: Path
    history: list[dict[str, float]]


def _epoch_batches(
    n_items: int, config: TrainConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Index batches for one epoch: a shuffled pass over the dataset, padded
    by wrapping so every batch is full; or `epoch_steps` sampled batches."""
    b = config.batch_size
    if config.epoch_steps is not None:
        return [rng.integers(0, n_items, size=b) for _ in range(config.epoch_steps)]
    order = rng.permutation(n_items)
    n_batches = max(1, -(-n_items // b))
    padded = np.resize(order, n_batches * b)
    return [padded[i * b : (i + 1) * b] for i in range(n_batches)]


def fit(
    dataset: Sequence[PointCloud],
    config: RunConfig,
    out_dir: str | Path,
    progress: Callable[[str], None] | None = print,
    resume_from: str | Path | None = None,
) -> FitResult:
    """Run the full schedule, checkpointing and logging each epoch.

    Writes `epoch_NNNN.ckpt` plus a rolling `history.json` under `out_dir`
    and returns the final checkpoint path with the per-epoch mean losses.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_train_state(resume_from)
        if state.config != config:
            raise ValueError("resume checkpoint was written with a different config")
    else:
        state = new_train_state(config)

    tcfg = config.train
    path = None
    for epoch in range(state.epoch, tcfg.epochs_total):
        state.epoch = epoch
        sums = {"l_o": 0.0, "l_r": 0.0, "l_m": 0.0, "l_s": 0.0, "total": 0.0}
        batches = _epoch_batches(len(dataset), tcfg, state.rng)
        for batch_idx in batches:
            items = [
                make_training_pair(dataset[int(i)], tcfg, state.rng)
                for i in batch_idx
            ]
            state, report = train_step(state, items)
            _release_heap()
            for key in sums:
                sums[key] += report.to_dict()[key]
            if progress is not None:
                progress(
                    progress_line(
                        epoch, state.step - 1, report, lr_schedule(epoch, tcfg)
                    )
                )
        mean = {key: value / len(batches) for key, value in sums.items()}
        mean["epoch"] = epoch
        state.history.append(mean)
        state.epoch = epoch + 1
        path = save_train_state(state, out_dir / f"epoch_{epoch:04d}.ckpt")
        atomic_write_text(
            out_dir / "history.json", json.dumps(state.history, indent=2) + "\n"
        )
    if path is None:
        # resume handed us a state already past the schedule
        path = save_train_state(state, out_dir / f"epoch_{tcfg.epochs_total - 1:04d}.ckpt")
    return FitResult(checkpoint_path=path, history=state.history)
