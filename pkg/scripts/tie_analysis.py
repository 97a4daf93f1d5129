"""Where PLF and majority voting differ with four atlases.

With an even number of atlases many boundary voxels receive a 2-2 split vote.
Majority voting hands every tie to the smaller label id (background), which
is right more often than not on these phantoms. This script measures the tie
voxels and compares MV under both tie rules against PLF with weights derived
from the gold label (``exp(beta * patch Dice)``), an upper reference for what
informative weights could achieve.

    python3 scripts/tie_analysis.py --seed 0 --betas 5 20 50
"""

import argparse

import numpy as np
import torch

from xmas.config import ExperimentConfig
from xmas.experiments import all_subjects, run_registration
from xmas.fusion import CandidateSet, FusionWeights, _cut, lattice_axis, nearest_lattice_index, plf_fuse
from xmas.losses import label_dice, mean_foreground_dice
from xmas.pipeline import target_of, test_atlases
from xmas.regnet import register_atlas


def oracle_weights(gold, cands: CandidateSet, side: int, stride: int, beta: float) -> FusionWeights:
    shape = gold.grid.shape
    axes = [lattice_axis(n, stride) for n in shape]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    g = _cut(gold.labels, centers, side)
    dice = np.stack([
        [mean_foreground_dice(g[c], p, gold.label_set) for c, p in enumerate(_cut(lab.labels, centers, side))]
        for lab in cands.candidates
    ], axis=1)
    w = np.exp(beta * (dice - dice.max(1, keepdims=True)))
    w /= w.sum(1, keepdims=True)
    w = w.reshape(*(len(a) for a in axes), -1)[np.ix_(*[nearest_lattice_index(n, stride) for n in shape])]
    return FusionWeights(np.moveaxis(w, -1, 0))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--betas", type=float, nargs="+", default=[5.0, 20.0, 50.0])
    args = parser.parse_args()
    torch.set_num_threads(1)
    cfg = ExperimentConfig().with_seed(args.seed)
    subjects = all_subjects(cfg)
    reg = run_registration(cfg, subjects)
    s = cfg.fusion.structure
    for sid in cfg.run.test_ids:
        image, gold = target_of(subjects[sid], cfg.run)
        warped = [register_atlas(reg.net, a, image)[1] for a in test_atlases(subjects, cfg.run)]
        cands = CandidateSet(warped)
        labels = np.asarray(gold.label_set)
        counts = np.stack([(cands.stacked() == l).sum(0) for l in labels])
        tie = (counts == counts.max(0)).sum(0) > 1
        mv_low = labels[counts.argmax(0)]
        mv_high = labels[::-1][counts[::-1].argmax(0)]
        line = (f"subject {sid}: {tie.sum()} tie voxels, gold there {np.bincount(gold.labels[tie], minlength=len(labels))}; "
                f"mv(tie->low) {label_dice(mv_low, gold.labels, s):.3f} mv(tie->high) {label_dice(mv_high, gold.labels, s):.3f}")
        for beta in args.betas:
            fused = plf_fuse(cands, oracle_weights(gold, cands, cfg.fusion.patch_side, cfg.fusion.stride, beta))
            line += f" oracle(beta={beta:g}) {label_dice(fused.labels, gold.labels, s):.3f}"
        print(line)


if __name__ == "__main__":
    main()
