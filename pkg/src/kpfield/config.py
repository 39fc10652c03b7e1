"""Configuration dataclasses, named presets, and the config file format.

A complete run is described by three blocks: the network shape (ModelConfig),
the training recipe (TrainConfig plus its AugmentParams), and the keypoint
extraction recipe (ExtractParams).  RunConfig bundles all three.

Config files are flat key-value text with an INI section per block.  A file
either names a `preset` under [run] and overrides individual keys, or spells
out every key explicitly.  Unknown sections and keys are rejected so typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from kpfield._atomic import atomic_write_text

ENCODER_VARIANTS = ("full", "lite")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape: feature widths, volume resolution, encoder variant."""

    c1: int = 32
    c2: int = 32
    ce: int = 32
    volume_resolution: tuple[int, int, int] = (64, 64, 64)
    encoder_variant: str = "full"
    decoder_width: int = 64
    decoder_blocks: int = 5

    def __post_init__(self) -> None:
        for name in ("c1", "c2", "ce", "decoder_width", "decoder_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        res = tuple(int(r) for r in self.volume_resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"volume_resolution must be 3 values >= 2, got {res}")
        object.__setattr__(self, "volume_resolution", res)
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ValueError(
                f"encoder_variant must be one of {ENCODER_VARIANTS}, "
                f"got {self.encoder_variant!r}"
            )


@dataclass(frozen=True)
class AugmentParams:
    """Second-view augmentation: downsample rate, noise, rigid-motion ranges.

    Downsampling and noise apply after the rigid transform.  A max rotation
    of 0 together with zero ranges everywhere disables augmentation, in which
    case the second view equals the first exactly.
    """

    max_downsample_rate: float = 4.0
    noise_sigma_range: tuple[float, float] = (0.0, 0.01)
    max_rotation: float = math.pi
    max_translation: float = 0.0

    def __post_init__(self) -> None:
        if self.max_downsample_rate < 1.0:
            raise ValueError("max_downsample_rate must be >= 1")
        lo, hi = self.noise_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"noise_sigma_range must be 0 <= lo <= hi, got {(lo, hi)}")
        object.__setattr__(self, "noise_sigma_range", (float(lo), float(hi)))
        if not 0.0 <= self.max_rotation <= math.pi:
            raise ValueError("max_rotation must be in [0, pi]")
        if self.max_translation < 0.0:
            raise ValueError("max_translation must be >= 0")

    @staticmethod
    def none() -> "AugmentParams":
        return AugmentParams(1.0, (0.0, 0.0), 0.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe: sampling sizes, schedule, loss weights, augmentation."""

    n_points: int = 2048
    grid_resolution: tuple[int, int, int] = (8, 8, 8)
    grid_scale: float = 8.0
    n_grids: int = 500
    batch_size: int = 16
    epochs_first: int = 40
    epochs_total: int = 60
    occupancy_threshold: float = 0.5
    lr: float = 1e-4
    lr_drop_factor: float = 10.0
    n_pos: int = 2048
    n_neg: int = 2048
    weight_occupancy: float = 1.0
    weight_repeatability: float = 1.0
    weight_surface: float = 1.0
    weight_sparsity: float = 1.0
    symmetrize: bool = False
    renormalize_view: bool = False
    epoch_steps: int | None = None
    seed: int = 0
    aug: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        res = tuple(int(r) for r in self.grid_resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"grid_resolution must be 3 values >= 2, got {res}")
        object.__setattr__(self, "grid_resolution", res)
        if self.grid_scale <= 0:
            raise ValueError("grid_scale must be positive")
        if self.n_grids < 1:
            raise ValueError("n_grids must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.epochs_first < self.epochs_total:
            raise ValueError(
                f"need 0 < epochs_first < epochs_total, "
                f"got {self.epochs_first}/{self.epochs_total}"
            )
        if not 0.0 < self.occupancy_threshold <= 0.5:
            raise ValueError("occupancy_threshold must be in (0, 0.5]")
        if self.lr < 0 or self.lr_drop_factor < 1.0:
            raise ValueError("lr must be >= 0 and lr_drop_factor >= 1")
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg < 1:
            raise ValueError("occupancy batch must contain at least one query")
        for name in (
            "weight_occupancy",
            "weight_repeatability",
            "weight_surface",
            "weight_sparsity",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epoch_steps is not None and self.epoch_steps < 1:
            raise ValueError("epoch_steps must be >= 1 when set")


@dataclass(frozen=True)
class ExtractParams:
    """Keypoint extraction recipe: descent step, iterations, thresholds, NMS."""

    step_size: float = 1e-3
    n_steps: int = 10
    occupancy_threshold: float = 0.5
    saliency_threshold: float = 0.7
    infer_grid_resolution: tuple[int, int, int] = (64, 64, 64)
    nms_radius: float = 0.03
    max_keypoints: int | None = None
    snap_to_input: bool = False

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if not 0.0 < self.occupancy_threshold <= 0.5:
            raise ValueError("occupancy_threshold must be in (0, 0.5]")
        if not 0.0 < self.saliency_threshold < 1.0:
            raise ValueError("saliency_threshold must be in (0, 1)")
        res = tuple(int(r) for r in self.infer_grid_resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"infer_grid_resolution must be 3 values >= 2, got {res}")
        object.__setattr__(self, "infer_grid_resolution", res)
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")
        if self.max_keypoints is not None and self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1 when set")


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: network, training recipe, extraction recipe."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract: ExtractParams = field(default_factory=ExtractParams)


# --------------------------------------------------------------------------
# named presets


def _object_extract(**kw) -> ExtractParams:
    base = dict(
        step_size=1e-3,
        n_steps=10,
        occupancy_threshold=0.5,
        saliency_threshold=0.7,
        infer_grid_resolution=(64, 64, 64),
    )
    base.update(kw)
    return ExtractParams(**base)


_PRESETS: dict[str, RunConfig] = {
    "keypointnet": RunConfig(
        model=ModelConfig(volume_resolution=(64, 64, 64)),
        train=TrainConfig(
            n_points=2048,
            grid_resolution=(8, 8, 8),
            grid_scale=8.0,
            n_grids=500,
            batch_size=16,
            epochs_first=40,
            epochs_total=60,
        ),
        extract=_object_extract(nms_radius=0.1),
    ),
    "smpl": RunConfig(
        model=ModelConfig(volume_resolution=(64, 64, 64)),
        train=TrainConfig(
            n_points=2048,
            grid_resolution=(8, 8, 8),
            grid_scale=8.0,
            n_grids=500,
            batch_size=16,
            epochs_first=20,
            epochs_total=30,
        ),
        extract=_object_extract(nms_radius=0.1),
    ),
    "modelnet40": RunConfig(
        model=ModelConfig(volume_resolution=(64, 64, 64)),
        train=TrainConfig(
            n_points=5000,
            grid_resolution=(8, 8, 8),
            grid_scale=6.0,
            n_grids=500,
            batch_size=16,
            epochs_first=40,
            epochs_total=60,
        ),
        extract=_object_extract(nms_radius=0.01, max_keypoints=64),
    ),
    "3dmatch": RunConfig(
        model=ModelConfig(volume_resolution=(100, 100, 100)),
        train=TrainConfig(
            n_points=10000,
            grid_resolution=(10, 10, 10),
            grid_scale=8.0,
            n_grids=150,
            batch_size=6,
            epochs_first=15,
            epochs_total=20,
        ),
        extract=_object_extract(
            nms_radius=0.04, infer_grid_resolution=(100, 100, 100)
        ),
    ),
    "registration": RunConfig(
        model=ModelConfig(volume_resolution=(64, 64, 64)),
        train=TrainConfig(
            n_points=2048,
            grid_resolution=(6, 6, 6),
            grid_scale=12.0,
            n_grids=500,
            batch_size=16,
            epochs_first=40,
            epochs_total=60,
        ),
        extract=_object_extract(
            saliency_threshold=0.4, nms_radius=0.05, snap_to_input=True
        ),
    ),
    # Desk-scale recipe used by the verification experiments and examples.
    "lite-overfit": RunConfig(
        model=ModelConfig(volume_resolution=(32, 32, 32), encoder_variant="lite"),
        train=TrainConfig(
            n_points=2048,
            grid_resolution=(6, 6, 6),
            grid_scale=8.0,
            n_grids=32,
            batch_size=1,
            epochs_first=8,
            epochs_total=10,
            lr=1e-3,
            n_pos=1024,
            n_neg=1024,
            renormalize_view=True,
            epoch_steps=200,
        ),
        extract=_object_extract(
            infer_grid_resolution=(32, 32, 32), nms_radius=0.1, max_keypoints=64
        ),
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> RunConfig:
    """Return the named preset bundle."""
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        ) from None


# --------------------------------------------------------------------------
# config file format

_SECTIONS = ("run", "model", "train", "augment", "extract")


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValueError(f"expected 3 integers, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _parse_float_pair(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected 2 floats, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_opt_int(text: str) -> int | None:
    return None if text.strip().lower() == "none" else int(text)


def _parse_str(text: str) -> str:
    return text.strip()


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_MODEL_PARSERS = {
    "c1": _parse_int,
    "c2": _parse_int,
    "ce": _parse_int,
    "volume_resolution": _parse_triple,
    "encoder_variant": _parse_str,
    "decoder_width": _parse_int,
    "decoder_blocks": _parse_int,
}

_TRAIN_PARSERS = {
    "n_points": _parse_int,
    "grid_resolution": _parse_triple,
    "grid_scale": _parse_float,
    "n_grids": _parse_int,
    "batch_size": _parse_int,
    "epochs_first": _parse_int,
    "epochs_total": _parse_int,
    "occupancy_threshold": _parse_float,
    "lr": _parse_float,
    "lr_drop_factor": _parse_float,
    "n_pos": _parse_int,
    "n_neg": _parse_int,
    "weight_occupancy": _parse_float,
    "weight_repeatability": _parse_float,
    "weight_surface": _parse_float,
    "weight_sparsity": _parse_float,
    "symmetrize": _parse_bool,
    "renormalize_view": _parse_bool,
    "epoch_steps": _parse_opt_int,
    "seed": _parse_int,
}

_AUGMENT_PARSERS = {
    "max_downsample_rate": _parse_float,
    "noise_sigma_range": _parse_float_pair,
    "max_rotation": _parse_float,
    "max_translation": _parse_float,
}

_EXTRACT_PARSERS = {
    "step_size": _parse_float,
    "n_steps": _parse_int,
    "occupancy_threshold": _parse_float,
    "saliency_threshold": _parse_float,
    "infer_grid_resolution": _parse_triple,
    "nms_radius": _parse_float,
    "max_keypoints": _parse_opt_int,
    "snap_to_input": _parse_bool,
}

_SECTION_PARSERS = {
    "model": _MODEL_PARSERS,
    "train": _TRAIN_PARSERS,
    "augment": _AUGMENT_PARSERS,
    "extract": _EXTRACT_PARSERS,
}


def _read_section(parser_map, section, raw, base) -> dict:
    """Parse one section's keys; with no base, every key is required."""
    values = {}
    for key, text in raw.items():
        if key not in parser_map:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        try:
            values[key] = parser_map[key](text)
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r} in section [{section}]: {exc}")
    if base is None:
        missing = sorted(set(parser_map) - set(values))
        if missing:
            raise ValueError(
                f"missing required key {missing[0]!r} in section [{section}]"
            )
    return values


def load_config(path: str | Path) -> RunConfig:
    """Load a RunConfig from a config file.

    Files naming a `preset` under [run] may override any subset of keys;
    files without one must specify every key of every section.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"malformed config file {path}: {exc}")

    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown section(s) {sorted(unknown)}; valid: {_SECTIONS}")

    base: RunConfig | None = None
    if cp.has_section("run"):
        run_keys = dict(cp.items("run"))
        extra = set(run_keys) - {"preset"}
        if extra:
            raise ValueError(f"unknown key {sorted(extra)[0]!r} in section [run]")
        if "preset" in run_keys:
            base = preset(run_keys["preset"].strip())

    sections = {
        name: _read_section(
            _SECTION_PARSERS[name],
            name,
            dict(cp.items(name)) if cp.has_section(name) else {},
            base,
        )
        for name in ("model", "train", "augment", "extract")
    }

    if base is None:
        aug = AugmentParams(**sections["augment"])
        return RunConfig(
            model=ModelConfig(**sections["model"]),
            train=TrainConfig(aug=aug, **sections["train"]),
            extract=ExtractParams(**sections["extract"]),
        )

    model_kw = {f.name: getattr(base.model, f.name) for f in fields(ModelConfig)}
    model_kw.update(sections["model"])
    train_kw = {
        f.name: getattr(base.train, f.name) for f in fields(TrainConfig) if f.name != "aug"
    }
    train_kw.update(sections["train"])
    aug_kw = {f.name: getattr(base.train.aug, f.name) for f in fields(AugmentParams)}
    aug_kw.update(sections["augment"])
    extract_kw = {f.name: getattr(base.extract, f.name) for f in fields(ExtractParams)}
    extract_kw.update(sections["extract"])
    return RunConfig(
        model=ModelConfig(**model_kw),
        train=TrainConfig(aug=AugmentParams(**aug_kw), **train_kw),
        extract=ExtractParams(**extract_kw),
    )


def save_config(config: RunConfig, path: str | Path) -> None:
    """Write a RunConfig as a fully explicit config file (loadable standalone)."""
    lines = ["[model]"]
    for name in _MODEL_PARSERS:
        lines.append(f"{name} = {_fmt(getattr(config.model, name))}")
    lines.append("")
    lines.append("[train]")
    for name in _TRAIN_PARSERS:
        lines.append(f"{name} = {_fmt(getattr(config.train, name))}")
    lines.append("")
    lines.append("[augment]")
    for name in _AUGMENT_PARSERS:
        lines.append(f"{name} = {_fmt(getattr(config.train.aug, name))}")
    lines.append("")
    lines.append("[extract]")
    for name in _EXTRACT_PARSERS:
        lines.append(f"{name} = {_fmt(getattr(config.extract, name))}")
    lines.append("")
    atomic_write_text(path, "\n".join(lines))


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply `section.key=value` string overrides to a RunConfig."""
    updates: dict[str, dict] = {"model": {}, "train": {}, "augment": {}, "extract": {}}
    for dotted, text in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in _SECTION_PARSERS or not key:
            raise ValueError(
                f"override {dotted!r} must look like section.key with section in "
                f"{tuple(_SECTION_PARSERS)}"
            )
        parser_map = _SECTION_PARSERS[section]
        if key not in parser_map:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        updates[section][key] = parser_map[key](text)

    model_kw = {f.name: getattr(config.model, f.name) for f in fields(ModelConfig)}
    model_kw.update(updates["model"])
    train_kw = {
        f.name: getattr(config.train, f.name)
        for f in fields(TrainConfig)
        if f.name != "aug"
    }
    train_kw.update(updates["train"])
    aug_kw = {f.name: getattr(config.train.aug, f.name) for f in fields(AugmentParams)}
    aug_kw.update(updates["augment"])
    extract_kw = {f.name: getattr(config.extract, f.name) for f in fields(ExtractParams)}
    extract_kw.update(updates["extract"])
    return RunConfig(
        model=ModelConfig(**model_kw),
        train=TrainConfig(aug=AugmentParams(**aug_kw), **train_kw),
        extract=ExtractParams(**extract_kw),
    )


# --------------------------------------------------------------------------
# dict round trip, for embedding a RunConfig in JSON-backed metadata


def run_config_to_dict(config: RunConfig) -> dict:
    """JSON-safe nested dict; inverse of :func:`run_config_from_dict`."""
    out = asdict(config)
    for block in out.values():
        for key, value in block.items():
            if isinstance(value, tuple):
                block[key] = list(value)
            elif isinstance(value, dict):
                block[key] = {
                    k: list(v) if isinstance(v, tuple) else v for k, v in value.items()
                }
    return out


def run_config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from :func:`run_config_to_dict` output."""

    def _coerce(cls, block: dict):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in block.items():
            if key not in kinds:
                raise ValueError(f"unknown {cls.__name__} key {key!r}")
            kw[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kw)

    train_block = dict(data["train"])
    aug = _coerce(AugmentParams, train_block.pop("aug"))
    return RunConfig(
        model=_coerce(ModelConfig, data["model"]),
        train=TrainConfig(aug=aug, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in train_block.items()
        }),
        extract=_coerce(ExtractParams, data["extract"]),
    )
