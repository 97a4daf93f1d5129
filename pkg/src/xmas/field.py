"""Grids, volumes, displacement fields and the warping kernels.

Arrays are indexed ``[x, y, z]``. A displacement field stores its three
components first, ``vectors[d]`` being the shift along axis ``d`` in voxels,
so warping a volume ``f`` by ``u`` evaluates ``f(x + u(x))``.

Out-of-domain coordinates are clamped to the grid hull, both for trilinear
intensity sampling and for nearest-neighbour label lookup.

The tensor kernels (``sample_linear``, ``sample_nearest``, ``warp``) work on
batched torch tensors of shape ``(B, C, X, Y, Z)`` and are differentiable in
both the volume and the coordinates; the dataclass-level functions wrap them
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class SpatialGrid:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) != 3 or len(spacing) != 3:
            raise ShapeError(f"grid needs 3 axes, got shape={shape} spacing={spacing}")
        if min(shape) < 2:
            raise ShapeError(f"every grid axis needs at least 2 voxels, got {shape}")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ShapeError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def cube(cls, side: int) -> "SpatialGrid":
        return cls((side, side, side))


def _grid_for(array: np.ndarray, grid: SpatialGrid | None) -> SpatialGrid:
    return grid if grid is not None else SpatialGrid(array.shape[-3:])


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if values.shape != self.grid.shape:
            raise ShapeError(f"values {values.shape} do not fill grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, grid: SpatialGrid | None = None) -> "ScalarVolume":
        values = np.asarray(values)
        return cls(_grid_for(values, grid), values)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    grid: SpatialGrid
    labels: np.ndarray
    label_set: tuple[int, ...] = field(default=())

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.shape:
            raise ShapeError(f"labels {labels.shape} do not fill grid {self.grid.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("label volume holds non-integer values")
        labels = labels.astype(np.int32)
        label_set = self.label_set or tuple(np.unique(labels).tolist())
        label_set = tuple(sorted({int(v) for v in label_set} | {0}))
        present = np.unique(labels)
        if not np.isin(present, label_set).all():
            extra = sorted(set(present.tolist()) - set(label_set))
            raise ValueError(f"labels {extra} are not in label_set {label_set}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_set", label_set)

    @classmethod
    def from_array(cls, labels, label_set: Sequence[int] = (), grid: SpatialGrid | None = None):
        labels = np.asarray(labels)
        return cls(_grid_for(labels, grid), labels, tuple(label_set))

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(l for l in self.label_set if l != 0)


@dataclass(frozen=True, eq=False)
class OneHotVolume:
    """One real-valued channel per entry of ``label_set``, in that order."""

    grid: SpatialGrid
    channels: np.ndarray
    label_set: tuple[int, ...]

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.shape != (len(self.label_set), *self.grid.shape):
            raise ShapeError(
                f"channels {channels.shape} do not match {len(self.label_set)} labels on {self.grid.shape}"
            )
        # trilinear warps can overshoot [0, 1] by rounding only
        if not np.all(np.isfinite(channels)) or channels.min() < -1e-9 or channels.max() > 1 + 1e-9:
            raise ValueError("one-hot channel values must lie in [0, 1]")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "label_set", tuple(int(l) for l in self.label_set))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    grid: SpatialGrid
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if not np.issubdtype(vectors.dtype, np.floating):
            vectors = vectors.astype(np.float64)
        if vectors.shape != (3, *self.grid.shape):
            raise ShapeError(f"field {vectors.shape} does not match 3 x {self.grid.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("displacement field contains non-finite components")
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, grid: SpatialGrid) -> "DisplacementField":
        return cls(grid, np.zeros((3, *grid.shape)))

    @classmethod
    def constant(cls, grid: SpatialGrid, shift) -> "DisplacementField":
        shift = np.asarray(shift, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(grid, np.broadcast_to(shift, (3, *grid.shape)).copy())

    @classmethod
    def from_array(cls, vectors, grid: SpatialGrid | None = None) -> "DisplacementField":
        vectors = np.asarray(vectors)
        return cls(_grid_for(vectors, grid), vectors)


def check_same_grid(*items) -> SpatialGrid:
    grids = {item.grid for item in items}
    if len(grids) != 1:
        raise ShapeError(f"grid mismatch: {sorted(g.shape for g in grids)}")
    return items[0].grid


# ---------------------------------------------------------------------------
# tensor kernels


def identity_coords(shape, dtype=torch.float64, device=None) -> torch.Tensor:
    """Voxel coordinates of every grid node, shape ``(3, X, Y, Z)``."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _flat_index(ix, iy, iz, shape):
    return (ix * shape[1] + iy) * shape[2] + iz


def _gather(flat, index, out_shape):
    b, c = flat.shape[:2]
    index = index.reshape(b, 1, -1).expand(b, c, -1)
    return torch.gather(flat, 2, index).reshape(b, c, *out_shape)


def sample_linear(vol: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of ``vol`` (B, C, X, Y, Z) at ``coords`` (B, 3, ...).

    Coordinates are clamped to ``[0, n - 1]`` per axis. At integer
    coordinates the result equals the node value bit for bit.
    """
    shape = vol.shape[2:]
    out_shape = coords.shape[2:]
    flat = vol.reshape(*vol.shape[:2], -1)
    strides = (shape[1] * shape[2], shape[2], 1)
    # per axis: (low, high) flat offsets and (1 - frac, frac) weights
    idx, wts = [], []
    for d, n in enumerate(shape):
        c = coords[:, d].clamp(0, n - 1)
        c0 = torch.floor(c)
        frac = c - c0
        i0 = c0.long()
        i1 = torch.clamp(i0 + 1, max=n - 1)
        idx.append((i0 * strides[d], i1 * strides[d]))
        wts.append((1 - frac, frac))
    # x-y corner products are shared by both z corners
    xy_idx = [idx[0][a] + idx[1][b] for a in (0, 1) for b in (0, 1)]
    xy_w = [wts[0][a] * wts[1][b] for a in (0, 1) for b in (0, 1)]
    out = None
    for k in range(4):
        for e in (0, 1):
            term = (xy_w[k] * wts[2][e]).unsqueeze(1) * _gather(flat, xy_idx[k] + idx[2][e], out_shape)
            out = term if out is None else out + term
    return out


def sample_nearest(vol: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Nearest-node lookup with clamping; halves round up."""
    shape = vol.shape[2:]
    flat = vol.reshape(*vol.shape[:2], -1)
    idx = [
        torch.floor(coords[:, d] + 0.5).clamp(0, n - 1).long() for d, n in enumerate(shape)
    ]
    return _gather(flat, _flat_index(*idx, shape), coords.shape[2:])


def warp(vol: torch.Tensor, ddf: torch.Tensor, mode: str = "linear") -> torch.Tensor:
    """Evaluate ``vol`` at ``x + ddf(x)`` for every voxel ``x``."""
    if vol.shape[0] != ddf.shape[0] or vol.shape[2:] != ddf.shape[2:] or ddf.shape[1] != 3:
        raise ShapeError(f"cannot warp {tuple(vol.shape)} with field {tuple(ddf.shape)}")
    coords = identity_coords(vol.shape[2:], dtype=ddf.dtype, device=ddf.device) + ddf
    if mode == "linear":
        return sample_linear(vol, coords)
    if mode == "nearest":
        return sample_nearest(vol, coords)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def consistency_residual_map(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Per-voxel ``|u(x) + v(x + u(x))|`` for batched fields (B, 3, X, Y, Z)."""
    return torch.linalg.vector_norm(u + warp(v, u), dim=1)


def to_tensor(array: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """Add batch (and, for 3-D input, channel) axes."""
    t = torch.as_tensor(np.ascontiguousarray(array), dtype=dtype)
    if t.dim() == 3:
        t = t[None]
    return t[None]


# ---------------------------------------------------------------------------
# volume-level operations


def trilinear_sample(vol: ScalarVolume, point) -> float:
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise ValueError(f"sample point must be 3 finite numbers, got {point!r}")
    coords = torch.as_tensor(point).reshape(1, 3, 1, 1, 1)
    return float(sample_linear(to_tensor(vol.values), coords).reshape(()))


def warp_scalar(vol: ScalarVolume, ddf: DisplacementField) -> ScalarVolume:
    grid = check_same_grid(vol, ddf)
    out = warp(to_tensor(vol.values), to_tensor(ddf.vectors))
    return ScalarVolume(grid, out[0, 0].numpy().astype(vol.values.dtype, copy=False))


def warp_labels(lab: LabelVolume, ddf: DisplacementField) -> LabelVolume:
    grid = check_same_grid(lab, ddf)
    labels = torch.as_tensor(lab.labels.astype(np.int64))[None, None]
    out = warp(labels, to_tensor(ddf.vectors), mode="nearest")
    return LabelVolume(grid, out[0, 0].numpy().astype(np.int32), lab.label_set)


def one_hot(lab: LabelVolume) -> OneHotVolume:
    channels = np.stack([(lab.labels == l) for l in lab.label_set]).astype(np.float64)
    return OneHotVolume(lab.grid, channels, lab.label_set)


def argmax_labels(oh: OneHotVolume) -> LabelVolume:
    """Per-voxel most likely label; ties go to the earlier (smaller) label."""
    idx = np.argmax(oh.channels, axis=0)
    return LabelVolume(oh.grid, np.asarray(oh.label_set)[idx], oh.label_set)


def warp_onehot(oh: OneHotVolume, ddf: DisplacementField) -> OneHotVolume:
    grid = check_same_grid(oh, ddf)
    out = warp(torch.as_tensor(oh.channels)[None], to_tensor(ddf.vectors))
    return OneHotVolume(grid, out[0].numpy(), oh.label_set)


def restore_by_composition(warped: OneHotVolume, second_ddf: DisplacementField) -> OneHotVolume:
    """Pull an already-warped label back through the opposite field.

    With ``warped = warp_onehot(one_hot(L), U)`` this returns
    ``L'(x) = warped(x + V(x))``, which reproduces ``L`` when ``V`` inverts ``U``.
    """
    return warp_onehot(warped, second_ddf)


def inverse_consistency_residual(
    u: DisplacementField, v: DisplacementField, margin: int = 0
) -> float:
    """Mean of ``|U(x) + V(x + U(x))|`` over voxels at least ``margin`` from the border."""
    check_same_grid(u, v)
    res = consistency_residual_map(to_tensor(u.vectors), to_tensor(v.vectors))[0]
    if margin:
        inner = tuple(slice(margin, n - margin) for n in u.grid.shape)
        res = res[inner]
        if res.numel() == 0:
            raise ShapeError(f"margin {margin} leaves no interior voxels")
    return float(res.mean())
