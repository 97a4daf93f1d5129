"""Registration objectives.

``soft_dice`` is a *dissimilarity*: ``1 - (2 sum(a b) + eps) / (sum(a) + sum(b) + eps)``
per foreground channel, averaged over channels (and the batch). Channel 0 of a
one-hot tensor is the background and never enters the average.

The smoothness penalty averages, over the three field components, the mean
squared forward difference along each axis summed over axes, i.e. the mean
squared gradient norm of one component:

    psi(u) = 1/3 * sum_c sum_d mean_x (u_c(x + e_d) - u_c(x))**2

so a unit ramp in a single component gives 1/3.

Every loss accepts either batched torch tensors (one-hot ``(B, K, X, Y, Z)``
with channels ordered like the label set, fields ``(B, 3, X, Y, Z)``) or the
volume dataclasses from :mod:`xmas.field`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .field import (
    DisplacementField,
    LabelVolume,
    OneHotVolume,
    one_hot,
    to_tensor,
    warp,
)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.3
    lambda2: float = 0.2
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.dice_epsilon > 0:
            raise ConfigError("dice_epsilon must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Terms of the registration objective.

    ``dice_forward`` compares the target label with the atlas label warped by
    U, ``dice_backward`` the atlas label with the target label warped by V.
    Fields hold 0-d tensors while training and floats once detached.
    """

    dice_forward: float
    dice_backward: float
    smooth_u: float
    smooth_v: float
    inv_a: float
    inv_t: float
    total: float

    @classmethod
    def compose(cls, cfg: LossConfig, *, dice_forward, dice_backward, smooth_u, smooth_v,
                inv_a, inv_t) -> "LossBreakdown":
        dice = dice_forward + dice_backward + cfg.lambda1 * (smooth_u + smooth_v)
        total = dice + cfg.lambda2 * (inv_a + inv_t)
        return cls(dice_forward, dice_backward, smooth_u, smooth_v, inv_a, inv_t, total)

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(**self.as_dict())

    def as_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def _onehot_tensor(x, label_set=None) -> tuple[torch.Tensor, tuple | None]:
    if isinstance(x, LabelVolume):
        x = one_hot(x)
    if isinstance(x, OneHotVolume):
        return torch.as_tensor(x.channels)[None], x.label_set
    return x, label_set


def _field_tensor(u) -> torch.Tensor:
    if isinstance(u, DisplacementField):
        return to_tensor(u.vectors)
    return u


def _prepare_labels(*items):
    out, sets = [], set()
    for item in items:
        t, ls = _onehot_tensor(item)
        if ls is not None:
            sets.add(ls)
        out.append(t)
    if len(sets) > 1:
        raise ValueError(f"label sets differ: {sorted(sets)}")
    shapes = {tuple(t.shape) for t in out}
    if len(shapes) > 1:
        raise ShapeError(f"one-hot shapes differ: {sorted(shapes)}")
    return out


def _foreground(oh: torch.Tensor) -> torch.Tensor:
    if oh.shape[1] < 2:
        raise ValueError("soft Dice needs at least one foreground channel")
    return oh[:, 1:]


def _dice_dissimilarity(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    """Mean soft Dice dissimilarity over the channels of two foreground-only tensors."""
    if a.shape[1] == 0:
        raise ValueError("soft Dice needs at least one foreground channel")
    dims = tuple(range(2, a.dim()))
    inter = (a * b).sum(dims)
    denom = a.sum(dims) + b.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def soft_dice(a, b, eps: float = 1e-5):
    """Soft Dice dissimilarity in ``[0, 1]``; returns a float for volume inputs."""
    ta, tb = _prepare_labels(a, b)
    out = _dice_dissimilarity(_foreground(ta), _foreground(tb), eps)
    return float(out) if isinstance(a, (LabelVolume, OneHotVolume)) else out


def _smoothness(u: torch.Tensor) -> torch.Tensor:
    total = 0
    for axis in (2, 3, 4):
        diff = torch.diff(u, dim=axis)
        # the mean runs over components too, which supplies the 1/3
        total = total + diff.pow(2).mean()
    return total


def smoothness(ddf):
    u = _field_tensor(ddf)
    out = _smoothness(u)
    return float(out) if isinstance(ddf, DisplacementField) else out


def registration_terms(lab_a, lab_t, u, v, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """All terms of the registration loss with tensors still attached to the graph."""
    oh_a, oh_t = _prepare_labels(lab_a, lab_t)
    u, v = _field_tensor(u), _field_tensor(v)
    if u.shape != v.shape or u.shape[2:] != oh_a.shape[2:] or u.shape[0] != oh_a.shape[0]:
        raise ShapeError(f"fields {tuple(u.shape)}/{tuple(v.shape)} vs labels {tuple(oh_a.shape)}")
    # only foreground channels enter the Dice terms, so only they are warped
    oh_a, oh_t = _foreground(oh_a).to(u.dtype), _foreground(oh_t).to(u.dtype)
    eps = cfg.dice_epsilon
    warped_t = warp(oh_t, v)
    # both volumes sampled through u share one set of indices and weights
    warped_a, restored_t = warp(torch.cat([oh_a, warped_t], dim=1), u).split(oh_a.shape[1], dim=1)
    restored_a = warp(warped_a, v)
    return LossBreakdown.compose(
        cfg,
        dice_forward=_dice_dissimilarity(oh_t, warped_a, eps),
        dice_backward=_dice_dissimilarity(oh_a, warped_t, eps),
        smooth_u=_smoothness(u),
        smooth_v=_smoothness(v),
        inv_a=_dice_dissimilarity(restored_a, oh_a, eps),
        inv_t=_dice_dissimilarity(restored_t, oh_t, eps),
    )


def _maybe_float(value, *inputs):
    if any(isinstance(x, (LabelVolume, OneHotVolume, DisplacementField)) for x in inputs):
        return float(value)
    return value


def symmetric_dice_loss(lab_a, lab_t, u, v, cfg: LossConfig = LossConfig()):
    """Dice of each label against the other one warped onto it, plus smoothness of both fields."""
    oh_a, oh_t = _prepare_labels(lab_a, lab_t)
    ut, vt = _field_tensor(u), _field_tensor(v)
    oh_a, oh_t = _foreground(oh_a).to(ut.dtype), _foreground(oh_t).to(ut.dtype)
    eps = cfg.dice_epsilon
    out = (
        _dice_dissimilarity(oh_a, warp(oh_t, vt), eps)
        + _dice_dissimilarity(oh_t, warp(oh_a, ut), eps)
        + cfg.lambda1 * (_smoothness(ut) + _smoothness(vt))
    )
    return _maybe_float(out, lab_a, u)


def invertible_loss(lab_a, lab_t, u, v, eps: float = 1e-5):
    """Dice between each label and its round trip through both fields."""
    oh_a, oh_t = _prepare_labels(lab_a, lab_t)
    ut, vt = _field_tensor(u), _field_tensor(v)
    oh_a, oh_t = _foreground(oh_a).to(ut.dtype), _foreground(oh_t).to(ut.dtype)
    restored_a = warp(warp(oh_a, ut), vt)
    restored_t = warp(warp(oh_t, vt), ut)
    out = _dice_dissimilarity(restored_a, oh_a, eps) + _dice_dissimilarity(restored_t, oh_t, eps)
    return _maybe_float(out, lab_a, u)


def total_loss(lab_a, lab_t, u, v, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    terms = registration_terms(lab_a, lab_t, u, v, cfg)
    if any(isinstance(x, (LabelVolume, OneHotVolume, DisplacementField)) for x in (lab_a, u)):
        return terms.detach()
    return terms


# ---------------------------------------------------------------------------
# crisp overlap scores used for labelling, diagnostics and reports


def label_dice(a: np.ndarray, b: np.ndarray, label: int) -> float:
    """Plain Dice similarity of one label; two empty masks count as perfect agreement."""
    ma, mb = np.asarray(a) == label, np.asarray(b) == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def mean_foreground_dice(a, b, label_set, eps: float = 1e-5) -> float:
    """Smoothed Dice similarity averaged over the non-zero labels of ``label_set``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"label arrays differ in shape: {a.shape} vs {b.shape}")
    scores = []
    for label in label_set:
        if label == 0:
            continue
        ma, mb = a == label, b == label
        inter = np.logical_and(ma, mb).sum()
        scores.append((2.0 * inter + eps) / (ma.sum() + mb.sum() + eps))
    if not scores:
        raise ValueError("label set has no foreground labels")
    return float(np.mean(scores))
