"""Patch similarity network and its episodic trainer.

Two convolutional branches embed patches: ``atlas_branch`` (theta) sees
patches cut from warped atlas images, ``target_branch`` (phi) sees patches
from the target image. The similarity of a query to each of M supports is a
softmax over negative squared Euclidean embedding distances.

Training triplets pair a query on the target's structure boundary with one
atlas patch whose label overlaps it well (Dice above ``thr1``, y = 1) and one
that overlaps poorly (Dice below ``thr2``, y = 0). Candidates falling between
the thresholds carry no label and are resampled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, NumericError, SamplingError, ShapeError
from .field import LabelVolume, ScalarVolume
from .losses import mean_foreground_dice

log = logging.getLogger(__name__)

REJECTED = None


@dataclass(frozen=True, eq=False)
class Patch:
    intensities: np.ndarray
    labels: np.ndarray
    center: tuple[int, int, int]
    source: int = -1

    def __post_init__(self):
        if self.intensities.shape != self.labels.shape:
            raise ShapeError("patch intensities and labels differ in shape")
        side = self.intensities.shape[0]
        if self.intensities.shape != (side,) * 3 or side % 2 == 0:
            raise ShapeError(f"patches must be odd-sided cubes, got {self.intensities.shape}")

    @property
    def side(self) -> int:
        return self.intensities.shape[0]


@dataclass
class SupportSet:
    patches: list[Patch] = field(default_factory=list)

    def __post_init__(self):
        if not self.patches:
            raise ValueError("a support set needs at least one patch")
        if len({p.side for p in self.patches}) != 1:
            raise ShapeError("support patches differ in side length")

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class SimTrainConfig:
    batch_size: int = 8
    iterations: int = 2000
    learning_rate: float = 0.001
    thr1: float = 0.9
    thr2: float = 0.5
    patch_side: int = 15
    embed_dim: int = 64
    max_offset: int = 7
    max_tries: int = 60
    progressive_offsets: bool = False
    structure: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.thr2 < self.thr1 <= 1:
            raise ConfigError(f"thresholds need 0 <= thr2 < thr1 <= 1, got {self.thr2}, {self.thr1}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if self.patch_side % 2 == 0 or self.patch_side < 3:
            raise ConfigError("patch_side must be odd and at least 3")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class PatchEncoder(nn.Module):
    """Three stride-2 convolutions, global average pooling, linear projection."""

    def __init__(self, embed_dim: int = 64, widths=(16, 32, 64)):
        super().__init__()
        layers, cin = [], 1
        for w in widths:
            layers += [nn.Conv3d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, embed_dim)

    def forward(self, x):
        return self.proj(self.features(x).mean(dim=(2, 3, 4)))


class SimNet(nn.Module):
    def __init__(self, patch_side: int = 15, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        self.patch_side = patch_side
        self.embed_dim = embed_dim
        self.seed = seed
        self.atlas_branch = PatchEncoder(embed_dim)
        self.target_branch = PatchEncoder(embed_dim)
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".proj." in name:
                nn.init.normal_(p, std=1.0 / np.sqrt(p.shape[1] * embed_dim), generator=gen)
            else:
                nn.init.kaiming_uniform_(p, a=0.2, nonlinearity="leaky_relu", generator=gen)

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (self.patch_side,) * 3:
            raise ShapeError(f"expected {self.patch_side}^3 patches, got {tuple(x.shape[-3:])}")
        return x.reshape(-1, 1, *x.shape[-3:])

    def embed_atlas(self, patches: torch.Tensor) -> torch.Tensor:
        return self.atlas_branch(self._check(patches))

    def embed_target(self, patches: torch.Tensor) -> torch.Tensor:
        return self.target_branch(self._check(patches))

    def forward(self, query: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
        """Log-similarities (B, M) of queries (B, p, p, p) to supports (B, M, p, p, p)."""
        b, m = supports.shape[:2]
        q = self.embed_target(query)
        s = self.embed_atlas(supports.reshape(b * m, *supports.shape[2:])).reshape(b, m, -1)
        return log_similarity(q, s)


def build_simnet(patch_side: int = 15, embed_dim: int = 64, seed: int = 0) -> SimNet:
    return SimNet(patch_side, embed_dim, seed)


def theta(net: SimNet) -> dict[str, torch.Tensor]:
    return dict(net.atlas_branch.named_parameters())


def phi(net: SimNet) -> dict[str, torch.Tensor]:
    return dict(net.target_branch.named_parameters())


def log_similarity(query: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
    """``log softmax(-|q - s_i|^2)`` over the support axis; query (..., D), supports (..., M, D)."""
    dist = (supports - query.unsqueeze(-2)).pow(2).sum(-1)
    return F.log_softmax(-dist, dim=-1)


def similarity_softmax(query_embedding, support_embeddings) -> np.ndarray:
    """Weights of M supports for one query; they sum to one."""
    q = torch.as_tensor(np.asarray(query_embedding, dtype=np.float64))
    s = torch.as_tensor(np.asarray(support_embeddings, dtype=np.float64))
    if s.dim() != 2 or s.shape[0] == 0:
        raise ValueError("need a non-empty (M, D) array of support embeddings")
    if q.shape != s.shape[1:]:
        raise ShapeError(f"query {tuple(q.shape)} vs supports {tuple(s.shape)}")
    return log_similarity(q, s).exp().numpy()


def _as_patch_tensor(patch, dtype) -> torch.Tensor:
    values = patch.intensities if isinstance(patch, Patch) else np.asarray(patch)
    return torch.as_tensor(np.ascontiguousarray(values), dtype=dtype)


@torch.no_grad()
def embed_target(net: SimNet, patch) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    return net.embed_target(_as_patch_tensor(patch, dtype)[None])[0].double().numpy()


@torch.no_grad()
def embed_atlas(net: SimNet, patch) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    return net.embed_atlas(_as_patch_tensor(patch, dtype)[None])[0].double().numpy()


@torch.no_grad()
def embed_many(net: SimNet, patches: np.ndarray, branch: str, chunk: int = 512) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    fn = net.embed_atlas if branch == "atlas" else net.embed_target
    out = [fn(torch.as_tensor(patches[i:i + chunk], dtype=dtype)) for i in range(0, len(patches), chunk)]
    return torch.cat(out) if out else torch.empty(0, net.embed_dim, dtype=dtype)


# ---------------------------------------------------------------------------
# labelling and sampling


def patch_indices(center, side: int, shape) -> tuple[np.ndarray, ...]:
    """Clamped index arrays for an ``np.ix_`` cut of a side^3 cube around ``center``."""
    half = side // 2
    return tuple(np.clip(np.arange(c - half, c + half + 1), 0, n - 1) for c, n in zip(center, shape))


def extract_patch(image: ScalarVolume, label: LabelVolume, center, side: int, source: int = -1) -> Patch:
    idx = np.ix_(*patch_indices(center, side, image.grid.shape))
    return Patch(image.values[idx], label.labels[idx], tuple(int(c) for c in center), source)


def assign_from_dice(dice: float, thr1: float = 0.9, thr2: float = 0.5):
    if dice > thr1:
        return 1
    if dice < thr2:
        return 0
    return REJECTED


def assign_similarity_label(l_q, l_s, thr1: float = 0.9, thr2: float = 0.5, label_set=None):
    """1 for clearly similar label patches, 0 for clearly different ones, ``None`` in between.

    ``label_set`` defaults to the labels present in either patch (plus 0).
    """
    l_q = l_q.labels if isinstance(l_q, Patch) else np.asarray(l_q)
    l_s = l_s.labels if isinstance(l_s, Patch) else np.asarray(l_s)
    if l_q.shape != l_s.shape:
        raise ShapeError(f"label patches differ in shape: {l_q.shape} vs {l_s.shape}")
    if label_set is None:
        label_set = sorted(set(np.unique(l_q)) | set(np.unique(l_s)) | {0})
    return assign_from_dice(mean_foreground_dice(l_q, l_s, label_set), thr1, thr2)


def boundary_centers(lab: LabelVolume, structure: int) -> list[tuple[int, int, int]]:
    """Voxels of ``structure`` with at least one 6-neighbour outside it (grid border counts as outside)."""
    mask = lab.labels == structure
    if not mask.any():
        return []
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return [tuple(int(i) for i in c) for c in np.argwhere(mask & ~inner)]


@dataclass(frozen=True, eq=False)
class Triplet:
    query: Patch
    supports: tuple[Patch, Patch]
    labels: tuple[int, int]


def sample_training_triplet(
    warped_atlas: tuple[ScalarVolume, LabelVolume],
    target: tuple[ScalarVolume, LabelVolume],
    cfg: SimTrainConfig,
    rng: np.random.Generator,
    centers: list | None = None,
    source: int = -1,
) -> Triplet:
    """Query on the target boundary plus one y=1 and one y=0 atlas patch, in random order.

    The first candidate support sits at the query centre; later ones are
    displaced by up to ``cfg.max_offset`` voxels per axis. With
    ``cfg.progressive_offsets`` the k-th candidate is displaced by at most k
    voxels, so the negative found first is usually the least displaced one.
    """
    img_a, lab_a = warped_atlas
    img_t, lab_t = target
    if img_a.grid != img_t.grid:
        raise ShapeError("warped atlas and target must share one grid")
    if centers is None:
        centers = boundary_centers(lab_t, cfg.structure)
    if not centers:
        raise SamplingError(f"target has no boundary voxels for structure {cfg.structure}")
    label_set = lab_t.label_set
    side, shape = cfg.patch_side, img_t.grid.shape
    tries = 0
    while tries < cfg.max_tries:
        c = np.asarray(centers[rng.integers(len(centers))])
        q_idx = np.ix_(*patch_indices(c, side, shape))
        l_q = lab_t.labels[q_idx]
        found = {}
        offset = np.zeros(3, dtype=int)
        for k in range(1, 21):
            tries += 1
            s_center = np.clip(c + offset, 0, np.asarray(shape) - 1)
            s_idx = np.ix_(*patch_indices(s_center, side, shape))
            y = assign_from_dice(mean_foreground_dice(l_q, lab_a.labels[s_idx], label_set), cfg.thr1, cfg.thr2)
            if y is not REJECTED and y not in found:
                found[y] = s_center
            if len(found) == 2:
                query = Patch(img_t.values[q_idx], l_q, tuple(int(v) for v in c))
                pos, neg = (extract_patch(img_a, lab_a, found[y], side, source) for y in (1, 0))
                if rng.random() < 0.5:
                    return Triplet(query, (pos, neg), (1, 0))
                return Triplet(query, (neg, pos), (0, 1))
            r = min(k, cfg.max_offset) if cfg.progressive_offsets else cfg.max_offset
            offset = rng.integers(-r, r + 1, size=3)
    raise SamplingError(f"no labelled support pair found within {cfg.max_tries} candidates")


def stack_triplets(triplets: list[Triplet], dtype=torch.float32):
    q = np.stack([t.query.intensities for t in triplets])
    s = np.stack([[p.intensities for p in t.supports] for t in triplets])
    y = np.array([t.labels for t in triplets], dtype=np.float64)
    return torch.as_tensor(q, dtype=dtype), torch.as_tensor(s, dtype=dtype), torch.as_tensor(y, dtype=dtype)


def cross_entropy(log_sim: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-sum_i y_i log sim_i``."""
    return -(y * log_sim).sum(-1).mean()


def triplet_loss(net: SimNet, triplets: list[Triplet]) -> torch.Tensor:
    q, s, y = stack_triplets(triplets, next(net.parameters()).dtype)
    return cross_entropy(net(q, s), y)


class TripletSampler:
    """Draws triplets from (warped atlas, target) pairs, caching each target's boundary."""

    def __init__(self, pairs, cfg: SimTrainConfig):
        if not pairs:
            raise ValueError("no (warped atlas, target) pairs to sample from")
        self.pairs = pairs
        self.cfg = cfg
        self._centers = {}

    def centers(self, i):
        if i not in self._centers:
            self._centers[i] = boundary_centers(self.pairs[i][1][1], self.cfg.structure)
        return self._centers[i]

    def draw(self, rng: np.random.Generator, attempts: int | None = None) -> Triplet:
        """One triplet from a random pair; pairs that yield no labelled supports are redrawn.

        The default budget is ``4 * len(pairs) + 10`` pair draws.
        """
        attempts = attempts or 4 * len(self.pairs) + 10
        for _ in range(attempts):
            i = int(rng.integers(len(self.pairs)))
            atlas, target = self.pairs[i]
            try:
                return sample_training_triplet(atlas, target, self.cfg, rng, self.centers(i), source=i)
            except SamplingError:
                continue
        raise SamplingError(f"no triplet found in {attempts} pair draws")

    def batch(self, rng, n: int) -> list[Triplet]:
        return [self.draw(rng) for _ in range(n)]


def train_sim(
    net: SimNet,
    warped_atlases: list[tuple[ScalarVolume, LabelVolume]],
    targets: list[tuple[ScalarVolume, LabelVolume]],
    cfg: SimTrainConfig,
    *,
    start_iteration: int = 0,
    stop_iteration: int | None = None,
) -> tuple[SimNet, list[float]]:
    """Plain gradient descent on the batch-mean cross-entropy.

    ``warped_atlases[i]`` must already be registered onto ``targets[i]``.
    Iteration ``c`` samples its batch from a generator seeded by
    ``(cfg.seed, c)``.
    """
    if len(warped_atlases) != len(targets):
        raise ValueError("warped_atlases and targets must pair up one to one")
    sampler = TripletSampler(list(zip(warped_atlases, targets)), cfg)
    params = list(net.parameters())
    stop = cfg.iterations if stop_iteration is None else stop_iteration
    history = []
    for it in range(start_iteration, stop):
        rng = np.random.default_rng([cfg.seed, it])
        loss = triplet_loss(net, sampler.batch(rng, cfg.batch_size))
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite similarity loss at iteration {it}",
                state={"iteration": it, "param_norms": {n: float(p.detach().norm()) for n, p in net.named_parameters()}},
            )
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for p, g in zip(params, grads):
                p.sub_(cfg.learning_rate * g)
        history.append(loss.item())
        if it % 200 == 0:
            log.info("sim iter %d J %.4f", it, history[-1])
    return net, history


@torch.no_grad()
def triplet_accuracy(net: SimNet, triplets: list[Triplet]) -> float:
    """Fraction of triplets whose y=1 support gets the larger similarity."""
    q, s, y = stack_triplets(triplets, next(net.parameters()).dtype)
    log_sim = net(q, s)
    return float((log_sim.argmax(-1) == y.argmax(-1)).double().mean())


def state_blocks(net: SimNet) -> dict[str, np.ndarray]:
    return {name: p.detach().float().contiguous().numpy() for name, p in net.state_dict().items()}


def load_state_blocks(net: SimNet, blocks: dict[str, np.ndarray]) -> SimNet:
    own = net.state_dict()
    missing = set(own) - set(blocks)
    if missing:
        raise ShapeError(f"checkpoint lacks parameter blocks {sorted(missing)}")
    with torch.no_grad():
        for name, p in net.named_parameters():
            src = torch.as_tensor(blocks[name])
            if src.shape != p.shape:
                raise ShapeError(f"block {name} has shape {tuple(src.shape)}, expected {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
    return net
