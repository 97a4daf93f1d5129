"""Synthetic two-modality phantoms, preprocessing and augmentation.

A phantom is a set of nested ellipsoidal blobs (label ``j`` lies inside blob
``j`` but outside blob ``j + 1``) pushed through a random smooth
deformation. Both pseudo-modalities are rendered from the same geometry by
feeding a soft "tissue coordinate" through two different monotone
piecewise-linear intensity maps and adding independent Gaussian noise, so the
images share anatomy while their intensities are not directly comparable.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .field import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    SpatialGrid,
    warp_labels,
    warp_scalar,
)


def _default_map_a(k):
    return tuple(np.linspace(0.0, 1.0, k).round(6).tolist())


def _default_map_b(k):
    return tuple(np.linspace(0.9, 0.0, k).round(6).tolist())


@dataclass(frozen=True)
class PhantomConfig:
    grid: SpatialGrid = field(default_factory=lambda: SpatialGrid.cube(32))
    num_labels: int = 3
    deform_amplitude: float = 5.0
    shape_jitter: float = 0.15
    noise_sigma_a: float = 0.05
    noise_sigma_b: float = 0.08
    intensity_map_a: tuple[float, ...] = ()
    intensity_map_b: tuple[float, ...] = ()
    edge_width: float = 0.7
    seed: int = 0

    def __post_init__(self):
        k = self.num_labels
        if k < 2:
            raise ConfigError("a phantom needs background plus at least one structure")
        if self.deform_amplitude < 0 or self.shape_jitter < 0:
            raise ConfigError("deformation magnitudes must be non-negative")
        if self.noise_sigma_a < 0 or self.noise_sigma_b < 0:
            raise ConfigError("noise levels must be non-negative")
        map_a = tuple(self.intensity_map_a) or _default_map_a(k)
        map_b = tuple(self.intensity_map_b) or _default_map_b(k)
        for name, m in (("intensity_map_a", map_a), ("intensity_map_b", map_b)):
            if len(m) != k:
                raise ConfigError(f"{name} needs one intensity per label ({k}), got {len(m)}")
            steps = np.diff(m)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ConfigError(f"{name} must be strictly monotone, got {m}")
        object.__setattr__(self, "intensity_map_a", map_a)
        object.__setattr__(self, "intensity_map_b", map_b)

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(range(self.num_labels))


@dataclass(frozen=True, eq=False)
class Subject:
    image_a: ScalarVolume
    image_b: ScalarVolume
    label: LabelVolume

    def __post_init__(self):
        if not (self.image_a.grid == self.image_b.grid == self.label.grid):
            raise ConfigError("subject images and label must share one grid")

    @property
    def grid(self) -> SpatialGrid:
        return self.label.grid

    def image(self, modality: str) -> ScalarVolume:
        if modality == "a":
            return self.image_a
        if modality == "b":
            return self.image_b
        raise ValueError(f"unknown modality {modality!r}")


@functools.lru_cache(maxsize=32)
def _spline_matrix(n: int, control: int) -> np.ndarray:
    """(n, control) matrix mapping lattice values to cubic-spline samples along one axis."""
    coords = np.linspace(0, control - 1, n)[None]
    eye = np.eye(control)
    return np.stack([ndimage.map_coordinates(e, coords, order=3, mode="nearest") for e in eye], axis=1)


def random_smooth_field(shape, amplitude: float, rng: np.random.Generator, control: int = 4) -> np.ndarray:
    """Smooth random displacement (3, X, Y, Z) whose largest vector has length ``amplitude``.

    Uniform noise on a ``control``-point lattice is upsampled with cubic
    splines over the whole grid (the spline is separable, so this is three
    small matrix products).
    """
    coarse = rng.uniform(-1.0, 1.0, size=(3, control, control, control))
    if amplitude == 0:
        return np.zeros((3, *shape))
    wx, wy, wz = (_spline_matrix(int(n), control) for n in shape)
    out = np.einsum("xi,yj,zk,cijk->cxyz", wx, wy, wz, coarse, optimize=True)
    peak = np.sqrt((out ** 2).sum(axis=0)).max()
    return out * (amplitude / peak) if peak > 0 else out


def _blobs(n: np.ndarray, k: int, rng: np.random.Generator, jitter: float):
    """Centres and semi-axes (voxels) of the k-1 nested blobs, outermost first."""
    base_radii = np.linspace(0.34, 0.19, k - 1) if k > 2 else np.array([0.34])
    base_aspect = np.array([1.0, 0.88, 0.94])
    blobs = []
    for j, r in enumerate(base_radii):
        axes = r * base_aspect * n * rng.uniform(1 - jitter, 1 + jitter, size=3)
        centre = n / 2 - 0.5 + np.array([0.03, -0.02, 0.0]) * n * (j > 0)
        blobs.append((centre, axes))
    return blobs


def generate_subject(cfg: PhantomConfig, subject_seed: int) -> Subject:
    """Deterministic phantom for ``(cfg.seed, subject_seed)``."""
    rng = np.random.default_rng([cfg.seed, subject_seed])
    shape = cfg.grid.shape
    n = np.asarray(shape, dtype=np.float64)
    blobs = _blobs(n, cfg.num_labels, rng, cfg.shape_jitter)
    disp = random_smooth_field(shape, cfg.deform_amplitude, rng)
    grid_pts = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    pts = grid_pts + disp

    labels = np.zeros(shape, dtype=np.int32)
    tissue = np.zeros(shape)
    for centre, axes in blobs:
        rel = (pts - centre.reshape(3, 1, 1, 1)) / axes.reshape(3, 1, 1, 1)
        radius = np.sqrt((rel ** 2).sum(axis=0))
        labels += (radius < 1).astype(np.int32)
        signed = (1 - radius) * axes.mean()
        tissue += 0.5 * (1 + np.tanh(signed / (2 * cfg.edge_width)))

    levels = np.arange(cfg.num_labels)
    clean_a = np.interp(tissue, levels, cfg.intensity_map_a)
    clean_b = np.interp(tissue, levels, cfg.intensity_map_b)
    image_a = clean_a + rng.normal(0.0, cfg.noise_sigma_a, size=shape)
    image_b = clean_b + rng.normal(0.0, cfg.noise_sigma_b, size=shape)
    return Subject(
        ScalarVolume(cfg.grid, image_a.astype(np.float32)),
        ScalarVolume(cfg.grid, image_b.astype(np.float32)),
        LabelVolume(cfg.grid, labels, cfg.label_set),
    )


def normalize(vol: ScalarVolume, var_floor: float = 1e-8) -> ScalarVolume:
    """Zero mean, unit variance; near-constant input maps to zeros."""
    v = vol.values.astype(np.float64)
    centred = v - v.mean()
    std = np.sqrt(max(centred.var(), var_floor))
    return ScalarVolume(vol.grid, (centred / std).astype(vol.values.dtype))


def normalize_subject(subject: Subject) -> Subject:
    return replace(subject, image_a=normalize(subject.image_a), image_b=normalize(subject.image_b))


def crop_window(lab: LabelVolume, side: int, structure: int | None = None) -> tuple[slice, ...]:
    shape = lab.grid.shape
    if side > min(shape) or side < 2:
        raise ConfigError(f"crop side {side} does not fit grid {shape}")
    mask = lab.labels == structure if structure is not None else lab.labels != 0
    if mask.any():
        centre = np.argwhere(mask).mean(axis=0)
    else:
        centre = (np.asarray(shape) - 1) / 2
    start = np.floor(centre + 0.5).astype(int) - side // 2
    start = np.clip(start, 0, np.asarray(shape) - side)
    return tuple(slice(int(s), int(s) + side) for s in start)


def crop_around(vol: ScalarVolume, lab: LabelVolume, side: int, structure: int | None = None):
    """Cube of ``side`` voxels centred on the structure's centroid, kept inside the grid.

    With ``structure=None`` the centroid of all non-zero labels is used.
    """
    window = crop_window(lab, side, structure)
    grid = SpatialGrid((side,) * 3, lab.grid.spacing)
    return (
        ScalarVolume(grid, vol.values[window].copy()),
        LabelVolume(grid, lab.labels[window].copy(), lab.label_set),
    )


def crop_subject(subject: Subject, side: int, structure: int | None = None) -> Subject:
    window = crop_window(subject.label, side, structure)
    grid = SpatialGrid((side,) * 3, subject.grid.spacing)
    return Subject(
        ScalarVolume(grid, subject.image_a.values[window].copy()),
        ScalarVolume(grid, subject.image_b.values[window].copy()),
        LabelVolume(grid, subject.label.labels[window].copy(), subject.label.label_set),
    )


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_translation: float = 3.0
    deform_amplitude: float = 3.0


def _rotation(angles):
    ax, ay, az = np.deg2rad(angles)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def affine_field(grid: SpatialGrid, matrix, translation) -> DisplacementField:
    """Displacement of the map ``x -> M (x - c) + c + t`` about the grid centre ``c``."""
    shape = grid.shape
    pts = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    centre = (np.asarray(shape, dtype=np.float64) - 1) / 2
    rel = pts - centre.reshape(3, 1, 1, 1)
    mapped = np.einsum("ij,j...->i...", np.asarray(matrix, dtype=np.float64), rel)
    mapped += centre.reshape(3, 1, 1, 1) + np.asarray(translation, dtype=np.float64).reshape(3, 1, 1, 1)
    return DisplacementField(grid, mapped - pts)


def augmentation_field(grid: SpatialGrid, mode: str, rng: np.random.Generator,
                       cfg: AugmentConfig = AugmentConfig()) -> DisplacementField:
    if mode == "affine":
        angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, size=3)
        scales = rng.uniform(*cfg.scale_range, size=3)
        shift = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3)
        return affine_field(grid, _rotation(angles) @ np.diag(scales), shift)
    if mode == "deformable":
        return DisplacementField(grid, random_smooth_field(grid.shape, cfg.deform_amplitude, rng))
    raise ValueError(f"unknown augmentation mode {mode!r}")


def paired_atlas(subject: Subject, modality: str, amplitude: float, seed) -> tuple[ScalarVolume, LabelVolume]:
    """The subject's own ``modality`` image and label under a small random deformation.

    Used as a stand-in for a well-registered atlas of the subject's other
    modality: patch pairs at one centre are near-identical in shape.
    """
    ddf = DisplacementField(subject.grid, random_smooth_field(subject.grid.shape, amplitude, np.random.default_rng(seed)))
    return warp_scalar(subject.image(modality), ddf), warp_labels(subject.label, ddf)


def augment(subject: Subject, mode: str, seed, cfg: AugmentConfig = AugmentConfig()) -> Subject:
    """Apply one random transform to both images (trilinear) and the label (nearest)."""
    ddf = augmentation_field(subject.grid, mode, np.random.default_rng(seed), cfg)
    return Subject(
        warp_scalar(subject.image_a, ddf),
        warp_scalar(subject.image_b, ddf),
        warp_labels(subject.label, ddf),
    )
