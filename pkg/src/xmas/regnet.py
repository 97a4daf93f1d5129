"""Joint forward/backward displacement network and its trainer.

One U-shaped encoder-decoder reads the channel-wise concatenation
``(atlas, target)`` and ends in two 1x1x1 heads: U warps the atlas onto the
target, V the target onto the atlas. With zero-initialised heads the network
starts at the identity transform.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AugmentConfig, augmentation_field
from .errors import ConfigError, NumericError, ShapeError
from .field import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    SpatialGrid,
    check_same_grid,
    inverse_consistency_residual,
    warp,
    warp_labels,
    warp_scalar,
)
from .losses import LossBreakdown, LossConfig, mean_foreground_dice, registration_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegNetConfig:
    input_grid: SpatialGrid = field(default_factory=lambda: SpatialGrid.cube(32))
    levels: int = 3
    base_channels: int = 8
    final_layer_zero_init: bool = True
    learning_rate: float = 1e-3
    iterations: int = 500
    batch_size: int = 2
    grad_clip: float = 1.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be positive")
        step = 2 ** self.levels
        if any(n % step for n in self.input_grid.shape):
            raise ConfigError(f"grid {self.input_grid.shape} is not divisible by 2**levels = {step}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_grid"] = {"shape": list(self.input_grid.shape), "spacing": list(self.input_grid.spacing)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegNetConfig":
        d = dict(d)
        g = d.pop("input_grid")
        return cls(input_grid=SpatialGrid(tuple(g["shape"]), tuple(g["spacing"])), **d)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class _ChannelsLastGrad(torch.autograd.Function):
    """Identity whose backward hands on the gradient in channels-last layout.

    The gradient reaching the decoder upsampling is a channel slice of the
    concatenation's gradient; the trilinear backward is several times slower
    on that strided layout.
    """

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.contiguous(memory_format=torch.channels_last_3d)


class RegNet(nn.Module):
    def __init__(self, cfg: RegNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.levels)]
        self.encoder = nn.ModuleList()
        cin = 2
        for w in widths:
            self.encoder.append(_conv_block(cin, w))
            cin = w
        self.decoder = nn.ModuleList()
        for skip in reversed(widths[:-1]):
            self.decoder.append(_conv_block(cin + skip, skip))
            cin = skip
        self.head_u = nn.Conv3d(cin, 3, 1)
        self.head_v = nn.Conv3d(cin, 3, 1)
        self._init_params()

    def _init_params(self):
        gen = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            head = name.startswith("head_")
            if head and self.cfg.final_layer_zero_init:
                nn.init.zeros_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            elif head:
                nn.init.normal_(p, std=1e-2, generator=gen)
            else:
                nn.init.kaiming_uniform_(p, a=0.2, nonlinearity="leaky_relu", generator=gen)

    def forward(self, atlas: torch.Tensor, target: torch.Tensor):
        x = torch.cat([atlas, target], dim=1)
        if x.dtype == torch.float32:
            x = x.contiguous(memory_format=torch.channels_last_3d)
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.avg_pool3d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if x.is_contiguous(memory_format=torch.channels_last_3d):
                x = _ChannelsLastGrad.apply(x)
            x = block(torch.cat([x, skip], dim=1))
        return self.head_u(x).contiguous(), self.head_v(x).contiguous()


def build_regnet(cfg: RegNetConfig) -> RegNet:
    net = RegNet(cfg)
    net.to(memory_format=torch.channels_last_3d)
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _image_tensor(vol: ScalarVolume, dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(vol.values), dtype=dtype)[None, None]


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


@torch.no_grad()
def predict_ddfs(net: RegNet, image_a: ScalarVolume, image_t: ScalarVolume):
    """Return ``(U, V)`` for one atlas/target image pair."""
    grid = check_same_grid(image_a, image_t)
    if grid.shape != net.cfg.input_grid.shape:
        raise ShapeError(f"network expects {net.cfg.input_grid.shape}, got {grid.shape}")
    dtype = _dtype(net)
    u, v = net(_image_tensor(image_a, dtype), _image_tensor(image_t, dtype))
    return (
        DisplacementField(grid, u[0].double().numpy()),
        DisplacementField(grid, v[0].double().numpy()),
    )


def register_atlas(net: RegNet, atlas: tuple[ScalarVolume, LabelVolume], target_image: ScalarVolume):
    """Warp an atlas onto a target.

    Returns ``(warped_image, warped_label, U, V)``.
    """
    image_a, label_a = atlas
    u, v = predict_ddfs(net, image_a, target_image)
    residual = inverse_consistency_residual(u, v)
    log.debug("inverse consistency residual %.4f", residual)
    return warp_scalar(image_a, u), warp_labels(label_a, u), u, v


# ---------------------------------------------------------------------------
# training


Pair = tuple[tuple[ScalarVolume, LabelVolume], tuple[ScalarVolume, LabelVolume]]


def make_optimizer(net: RegNet, cfg: RegNetConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)


def _onehot(labels: np.ndarray, label_set, dtype) -> torch.Tensor:
    lab = torch.as_tensor(labels.astype(np.int64))
    return torch.stack([(lab == l) for l in label_set]).to(dtype)


def _augmented(image: ScalarVolume, label: LabelVolume, rng, aug_cfg):
    mode = "affine" if rng.random() < 0.5 else "deformable"
    ddf = augmentation_field(image.grid, mode, rng, aug_cfg)
    ddf_t = torch.as_tensor(ddf.vectors)[None]
    img = warp(torch.as_tensor(image.values, dtype=torch.float64)[None, None], ddf_t)[0, 0]
    lab = warp(torch.as_tensor(label.labels.astype(np.int64))[None, None], ddf_t, mode="nearest")[0, 0]
    return img.numpy(), lab.numpy()


def make_batch(pairs, indices, label_set, dtype, rng=None, aug_cfg: AugmentConfig | None = None):
    """Stack the selected pairs into (atlas, target, onehot_atlas, onehot_target) tensors."""
    imgs_a, imgs_t, labs_a, labs_t = [], [], [], []
    for i in indices:
        (ia, la), (it, lt) = pairs[i]
        if aug_cfg is not None:
            a_vals, a_lab = _augmented(ia, la, rng, aug_cfg)
            t_vals, t_lab = _augmented(it, lt, rng, aug_cfg)
        else:
            a_vals, a_lab, t_vals, t_lab = ia.values, la.labels, it.values, lt.labels
        imgs_a.append(torch.as_tensor(np.asarray(a_vals), dtype=dtype)[None])
        imgs_t.append(torch.as_tensor(np.asarray(t_vals), dtype=dtype)[None])
        labs_a.append(_onehot(np.asarray(a_lab), label_set, dtype))
        labs_t.append(_onehot(np.asarray(t_lab), label_set, dtype))
    return torch.stack(imgs_a), torch.stack(imgs_t), torch.stack(labs_a), torch.stack(labs_t)


def _batch_indices(n_pairs: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_pairs, size=batch_size, replace=batch_size > n_pairs)


def reg_loss(net: RegNet, batch, loss_cfg: LossConfig) -> LossBreakdown:
    img_a, img_t, oh_a, oh_t = batch
    u, v = net(img_a, img_t)
    return registration_terms(oh_a, oh_t, u, v, loss_cfg)


def _label_set(pairs) -> tuple[int, ...]:
    sets = {lab.label_set for pair in pairs for (_, lab) in pair}
    if len(sets) != 1:
        raise ShapeError(f"training pairs disagree on label sets: {sorted(sets)}")
    return sets.pop()


def train_reg(
    net: RegNet,
    pairs: list[Pair],
    cfg: RegNetConfig | None = None,
    loss_cfg: LossConfig = LossConfig(),
    *,
    optimizer: torch.optim.Optimizer | None = None,
    start_iteration: int = 0,
    stop_iteration: int | None = None,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> tuple[RegNet, list[LossBreakdown]]:
    """Adam on the total registration loss, one mini-batch of pairs per iteration.

    Batch selection and augmentation draw from a generator seeded by
    ``(cfg.seed, iteration)``, so a run split at any iteration and resumed with
    the same optimizer state reproduces the unbroken run.
    """
    cfg = cfg or net.cfg
    if not pairs:
        raise ValueError("no training pairs")
    for pair in pairs:
        grid = check_same_grid(*pair[0], *pair[1])
        if grid.shape != cfg.input_grid.shape:
            raise ShapeError(f"pair grid {grid.shape} differs from network grid {cfg.input_grid.shape}")
    label_set = _label_set(pairs)
    dtype = _dtype(net)
    optimizer = optimizer or make_optimizer(net, cfg)
    stop = cfg.iterations if stop_iteration is None else stop_iteration
    history = []
    net.train()
    for it in range(start_iteration, stop):
        rng = np.random.default_rng([cfg.seed, it])
        idx = _batch_indices(len(pairs), cfg.batch_size, rng)
        batch = make_batch(pairs, idx, label_set, dtype, rng, augment_cfg if cfg.augment else None)
        terms = reg_loss(net, batch, loss_cfg)
        if not torch.isfinite(terms.total):
            raise NumericError(
                f"non-finite registration loss at iteration {it}",
                state={
                    "iteration": it,
                    "pairs": idx.tolist(),
                    "terms": {k: float(v) for k, v in terms.as_dict().items()},
                    "param_norms": {n: float(p.detach().norm()) for n, p in net.named_parameters()},
                },
            )
        optimizer.zero_grad()
        terms.total.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        optimizer.step()
        history.append(terms.detach())
        if it % 50 == 0:
            log.info("reg iter %d total %.4f", it, history[-1].total)
    net.eval()
    return net, history


def ema(values, alpha: float = 0.1) -> list[float]:
    out, acc = [], None
    for v in values:
        acc = v if acc is None else (1 - alpha) * acc + alpha * v
        out.append(acc)
    return out


def evaluate_pairs(net: RegNet, pairs: list[Pair]) -> dict[str, list[float]]:
    """Warped-label Dice and inverse-consistency residual for each pair."""
    before, after, residuals = [], [], []
    for (ia, la), (it, lt) in pairs:
        _, warped, u, v = register_atlas(net, (ia, la), it)
        before.append(mean_foreground_dice(la.labels, lt.labels, la.label_set))
        after.append(mean_foreground_dice(warped.labels, lt.labels, la.label_set))
        residuals.append(inverse_consistency_residual(u, v))
    return {"dice_identity": before, "dice_registered": after, "residual": residuals}


def state_blocks(net: RegNet, optimizer: torch.optim.Optimizer | None = None) -> dict[str, np.ndarray]:
    """Named float arrays for checkpointing: parameters, then Adam moments."""
    blocks = {name: p.detach().float().contiguous().numpy() for name, p in net.state_dict().items()}
    if optimizer is not None:
        names = dict(zip((id(p) for p in net.parameters()), (n for n, _ in net.named_parameters())))
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                blocks[f"adam.exp_avg.{name}"] = st["exp_avg"].float().contiguous().numpy()
                blocks[f"adam.exp_avg_sq.{name}"] = st["exp_avg_sq"].float().contiguous().numpy()
    return blocks


def load_state_blocks(net: RegNet, blocks: dict[str, np.ndarray], optimizer=None, step: int = 0):
    params = {k: torch.as_tensor(v) for k, v in blocks.items() if not k.startswith("adam.")}
    missing = set(net.state_dict()) - set(params)
    if missing:
        raise ShapeError(f"checkpoint lacks parameter blocks {sorted(missing)}")
    with torch.no_grad():
        for name, p in net.named_parameters():
            src = params[name]
            if src.shape != p.shape:
                raise ShapeError(f"block {name} has shape {tuple(src.shape)}, expected {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
    if optimizer is not None and step > 0:
        for name, p in net.named_parameters():
            key_m, key_v = f"adam.exp_avg.{name}", f"adam.exp_avg_sq.{name}"
            if key_m not in blocks:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.as_tensor(blocks[key_m]).to(p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(blocks[key_v]).to(p.dtype).clone(),
            }
    return net
