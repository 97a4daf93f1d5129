"""PLF vs majority voting vs single atlases on the synthetic test split.

For each seed: train the registration net, train the similarity net on
registered atlases, then segment every test target both ways.

    python3 scripts/fusion_comparison.py --seeds 0 1 2
"""

import argparse

import numpy as np
import torch

from xmas.config import ExperimentConfig
from xmas.experiments import all_subjects, run_fusion, run_registration, run_similarity


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()
    torch.set_num_threads(1)
    medians = {"plf": [], "mv": [], "single": []}
    for seed in args.seeds:
        cfg = ExperimentConfig().with_seed(seed)
        subjects = all_subjects(cfg)
        reg = run_registration(cfg, subjects)
        sim = run_similarity(cfg, reg.net, subjects)
        fus = run_fusion(cfg, reg.net, sim.net, subjects)
        print(f"seed {seed}: held-out triplet accuracy {sim.accuracy:.3f} "
              f"(reg {reg.cpu_seconds:.0f} s, sim {sim.cpu_seconds:.0f} s, fusion {fus.cpu_seconds:.0f} s CPU)")
        for r in fus.rows:
            print(f"  subject {r['subject']:>3}: plf {r['plf']:.3f}  mv {r['mv']:.3f}  "
                  f"single {r['single']:.3f}  weight entropy {r['weight_entropy']:.3f}")
        for key in medians:
            medians[key].append(fus.mean(key))
        print(f"  mean: plf {fus.mean('plf'):.3f}  mv {fus.mean('mv'):.3f}  single {fus.mean('single'):.3f}")
    print("median over seeds: " + "  ".join(f"{k} {np.median(v):.3f}" for k, v in medians.items()))


if __name__ == "__main__":
    main()
