"""Combining warped atlas labels into one segmentation.

Weights come from the similarity network: on a lattice of centres spaced
``stride`` voxels apart, the target patch is the query and the N co-located
warped-atlas patches are its supports, so each lattice centre gets a softmax
over atlases. Every voxel takes the weights of its nearest lattice centre.

Label ties in the weighted vote go to the smallest label id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .field import LabelVolume, ScalarVolume, inverse_consistency_residual
from .losses import label_dice, mean_foreground_dice
from .regnet import RegNet, register_atlas
from .simnet import SimNet, embed_many, log_similarity

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CandidateSet:
    candidates: list[LabelVolume]
    images: list[ScalarVolume] = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set is empty")
        grids = {c.grid for c in self.candidates} | {im.grid for im in self.images}
        if len(grids) != 1:
            raise ShapeError("candidates and images must share one grid")
        if len({c.label_set for c in self.candidates}) != 1:
            raise ShapeError("candidates disagree on the label set")
        if self.images and len(self.images) != len(self.candidates):
            raise ShapeError(f"{len(self.images)} images for {len(self.candidates)} candidates")

    def __len__(self):
        return len(self.candidates)

    @property
    def grid(self):
        return self.candidates[0].grid

    @property
    def label_set(self):
        return self.candidates[0].label_set

    def stacked(self) -> np.ndarray:
        return np.stack([c.labels for c in self.candidates])


@dataclass(frozen=True, eq=False)
class FusionWeights:
    """Per-atlas, per-voxel weights of shape (N, X, Y, Z)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ShapeError(f"weights must be (N, X, Y, Z), got {w.shape}")
        if (w < 0).any():
            raise ValueError("fusion weights must be non-negative")
        if not np.allclose(w.sum(axis=0), 1.0, rtol=0, atol=1e-5):
            raise ValueError("fusion weights must sum to one at every voxel")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n: int, shape) -> "FusionWeights":
        return cls(np.full((n, *shape), 1.0 / n))


@dataclass(frozen=True)
class FusionConfig:
    method: str = "plf"
    patch_side: int = 15
    stride: int = 2
    structure: int = 1

    def __post_init__(self):
        if self.method not in ("plf", "mv"):
            raise ConfigError(f"fusion method must be 'plf' or 'mv', got {self.method!r}")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        if self.patch_side < 1 or self.patch_side % 2 == 0:
            raise ConfigError("patch_side must be odd")


def lattice_axis(n: int, stride: int) -> np.ndarray:
    return np.arange(0, n, stride)


def nearest_lattice_index(n: int, stride: int) -> np.ndarray:
    """For every voxel along an axis, the index of its nearest lattice centre (ties go up)."""
    count = len(lattice_axis(n, stride))
    return np.minimum(np.floor((np.arange(n) + stride / 2) / stride).astype(int), count - 1)


def _cut(values: np.ndarray, centers: np.ndarray, side: int) -> np.ndarray:
    """Clamped side^3 patches around each of the (C, 3) centres."""
    half = side // 2
    offs = np.arange(-half, half + 1)
    idx = [np.clip(centers[:, d, None] + offs, 0, values.shape[d] - 1) for d in range(3)]
    return values[idx[0][:, :, None, None], idx[1][:, None, :, None], idx[2][:, None, None, :]]


def compute_weight_maps(
    net: SimNet,
    target: ScalarVolume,
    cands: CandidateSet,
    patch_side: int | None = None,
    stride: int = 1,
    chunk: int = 512,
) -> FusionWeights:
    side = patch_side or net.patch_side
    shape = target.grid.shape
    if side > min(shape):
        raise ConfigError(f"patch side {side} exceeds volume {shape}")
    if stride < 1:
        raise ConfigError("stride must be at least 1")
    if not cands.images:
        raise ValueError("similarity weights need the warped atlas images")
    if cands.grid != target.grid:
        raise ShapeError("candidates and target live on different grids")
    axes = [lattice_axis(n, stride) for n in shape]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    n_atlas = len(cands)
    lattice_w = np.empty((len(centers), n_atlas))
    for start in range(0, len(centers), chunk):
        cc = centers[start:start + chunk]
        q = embed_many(net, _cut(target.values, cc, side), "target").double()
        s = torch.stack(
            [embed_many(net, _cut(img.values, cc, side), "atlas").double() for img in cands.images], dim=1
        )
        lattice_w[start:start + chunk] = log_similarity(q, s).exp().numpy()
    lattice_w = lattice_w.reshape(*(len(a) for a in axes), n_atlas)
    nearest = [nearest_lattice_index(n, stride) for n in shape]
    dense = lattice_w[np.ix_(*nearest)]
    return FusionWeights(np.moveaxis(dense, -1, 0))


def plf_fuse(cands: CandidateSet, w: FusionWeights) -> LabelVolume:
    """Per voxel, the label with the largest total weight among the candidates voting for it."""
    stack = cands.stacked()
    weights = w.weights
    if weights.shape != stack.shape:
        raise ShapeError(f"weights {weights.shape} do not match candidates {stack.shape}")
    labels = cands.label_set
    scores = np.zeros((len(labels), *stack.shape[1:]))
    # atlases are accumulated in a fixed order so equal vote sets give bit-equal scores
    for i in range(stack.shape[0]):
        for j, label in enumerate(labels):
            scores[j] += np.where(stack[i] == label, weights[i], 0.0)
    fused = np.asarray(labels)[np.argmax(scores, axis=0)]
    return LabelVolume(cands.grid, fused, labels)


def majority_vote(cands: CandidateSet) -> LabelVolume:
    stack = cands.stacked()
    labels = cands.label_set
    counts = np.stack([(stack == label).sum(axis=0) for label in labels])
    return LabelVolume(cands.grid, np.asarray(labels)[np.argmax(counts, axis=0)], labels)


def mas_segment(
    reg_net: RegNet,
    sim_net: SimNet | None,
    atlases: list[tuple[ScalarVolume, LabelVolume]],
    target_image: ScalarVolume,
    fusion_cfg: FusionConfig = FusionConfig(),
    gold: LabelVolume | None = None,
):
    """Register every atlas to the target, weight the candidates, fuse.

    Returns ``(label, diagnostics)``; diagnostics hold per-atlas residuals,
    weight statistics and, when ``gold`` is given, Dice scores.
    """
    if not atlases:
        raise ValueError("multi-atlas segmentation needs at least one atlas")
    warped_images, warped_labels, per_atlas = [], [], []
    for i, atlas in enumerate(atlases):
        w_img, w_lab, u, v = register_atlas(reg_net, atlas, target_image)
        warped_images.append(w_img)
        warped_labels.append(w_lab)
        row = {"atlas": i, "residual": inverse_consistency_residual(u, v)}
        if gold is not None:
            row["dice"] = label_dice(w_lab.labels, gold.labels, fusion_cfg.structure)
            row["dice_mean_fg"] = mean_foreground_dice(w_lab.labels, gold.labels, gold.label_set)
        per_atlas.append(row)
    cands = CandidateSet(warped_labels, warped_images)
    diagnostics = {"method": fusion_cfg.method, "per_atlas": per_atlas}
    if fusion_cfg.method == "mv":
        fused = majority_vote(cands)
    else:
        if sim_net is None:
            raise ValueError("patch-based fusion needs a similarity network")
        weights = compute_weight_maps(sim_net, target_image, cands, fusion_cfg.patch_side, fusion_cfg.stride)
        w = weights.weights
        diagnostics["weights"] = {
            "mean_per_atlas": w.mean(axis=(1, 2, 3)).tolist(),
            "min": float(w.min()),
            "max": float(w.max()),
            "mean_entropy": float(-(w * np.log(np.clip(w, 1e-300, None))).sum(axis=0).mean()),
        }
        fused = plf_fuse(cands, weights)
    if gold is not None:
        diagnostics["dice"] = label_dice(fused.labels, gold.labels, fusion_cfg.structure)
        diagnostics["dice_mean_fg"] = mean_foreground_dice(fused.labels, gold.labels, gold.label_set)
    return fused, diagnostics
