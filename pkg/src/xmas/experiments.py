"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

Each runner builds its data from an :class:`ExperimentConfig` in memory (no
files), times itself in process CPU seconds and returns plain records.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import regnet as rn
from . import simnet as sn
from .config import ExperimentConfig
from .data import Subject
from .fusion import FusionConfig, mas_segment
from .pipeline import (
    atlas_of,
    make_subjects,
    registration_pairs,
    sim_heldout_pairs,
    sim_training_pairs,
    target_of,
    test_atlases,
)


def all_subjects(cfg: ExperimentConfig) -> dict[int, Subject]:
    return make_subjects(cfg.phantom, range(cfg.run.num_subjects))


def heldout_registration_pairs(subjects: dict[int, Subject], cfg: ExperimentConfig):
    """Every ordered (atlas, target) pair of distinct subjects outside the registration split."""
    ids = cfg.run.sim_ids + cfg.run.test_ids
    return [(atlas_of(subjects[i], cfg.run), target_of(subjects[j], cfg.run)) for i in ids for j in ids if i != j]


@dataclass
class RegRun:
    seed: int
    lambda2: float
    net: rn.RegNet
    history: list
    cpu_seconds: float
    dice_identity: list[float]
    dice_registered: list[float]
    residual: list[float]

    @property
    def dice_gain(self) -> float:
        return float(np.mean(self.dice_registered) - np.mean(self.dice_identity))

    @property
    def median_residual(self) -> float:
        return float(np.median(self.residual))


def run_registration(cfg: ExperimentConfig, subjects=None, lambda2: float | None = None) -> RegRun:
    """Train on the disjoint registration pairs, then score the held-out pairs."""
    loss = cfg.loss if lambda2 is None else dataclasses.replace(cfg.loss, lambda2=lambda2)
    subjects = subjects or all_subjects(cfg)
    start = time.process_time()
    net, history = rn.train_reg(rn.build_regnet(cfg.registration), registration_pairs(subjects, cfg.run),
                                cfg.registration, loss)
    net.eval()
    stats = rn.evaluate_pairs(net, heldout_registration_pairs(subjects, cfg))
    return RegRun(cfg.run.seed, loss.lambda2, net, history, time.process_time() - start, **stats)


@dataclass
class SimRun:
    seed: int
    net: sn.SimNet
    history: list[float]
    cpu_seconds: float
    accuracy: float
    num_heldout: int


def run_similarity(cfg: ExperimentConfig, reg_net: rn.RegNet, subjects=None, num_heldout: int = 400) -> SimRun:
    """Train on triplets from the similarity split; classify held-out triplets from the test split."""
    subjects = subjects or all_subjects(cfg)
    sc = cfg.similarity
    start = time.process_time()
    pairs = sim_training_pairs(reg_net, subjects, cfg)
    net, history = sn.train_sim(sn.build_simnet(sc.patch_side, sc.embed_dim, sc.seed),
                                [p[0] for p in pairs], [p[1] for p in pairs], sc)
    net.eval()
    sampler = sn.TripletSampler(sim_heldout_pairs(reg_net, subjects, cfg), sc)
    held = sampler.batch(np.random.default_rng([cfg.run.seed, 10_000]), num_heldout)
    return SimRun(cfg.run.seed, net, history, time.process_time() - start,
                  sn.triplet_accuracy(net, held), num_heldout)


@dataclass
class FusionRun:
    seed: int
    cpu_seconds: float
    rows: list[dict] = field(default_factory=list)

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows]))


def run_fusion(cfg: ExperimentConfig, reg_net: rn.RegNet, sim_net: sn.SimNet, subjects=None) -> FusionRun:
    """PLF and MV on every test target; Dice of the fusion structure."""
    subjects = subjects or all_subjects(cfg)
    start = time.process_time()
    atlases = test_atlases(subjects, cfg.run)
    out = FusionRun(cfg.run.seed, 0.0)
    for sid in cfg.run.test_ids:
        image, gold = target_of(subjects[sid], cfg.run)
        _, plf = mas_segment(reg_net, sim_net, atlases, image, dataclasses.replace(cfg.fusion, method="plf"), gold)
        _, mv = mas_segment(reg_net, None, atlases, image, dataclasses.replace(cfg.fusion, method="mv"), gold)
        out.rows.append({
            "subject": sid,
            "plf": plf["dice"],
            "mv": mv["dice"],
            "single": float(np.mean([a["dice"] for a in plf["per_atlas"]])),
            "weight_entropy": plf["weights"]["mean_entropy"],
        })
    out.cpu_seconds = time.process_time() - start
    return out
