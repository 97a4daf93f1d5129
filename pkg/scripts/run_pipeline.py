"""Run the whole CLI DAG for one config: gen-data, both trainings, segment and evaluate with PLF and MV.

    python3 scripts/run_pipeline.py scripts/example.ini [--seed 3] [--overlays]
"""

import argparse
import sys

from xmas.cli import run
from xmas.config import load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--force", action="store_true", help="regenerate data and retrain")
    parser.add_argument("--overlays", action="store_true")
    args = parser.parse_args()
    common = ["--config", args.config] + (["--seed", str(args.seed)] if args.seed is not None else [])
    steps = [
        ["gen-data"] + (["--force"] if args.force else []),
        ["train-reg"] + (["--force"] if args.force else []),
        ["train-sim"] + (["--force"] if args.force else []),
        ["segment", "--fusion", "plf"],
        ["segment", "--fusion", "mv"],
        ["evaluate", "--fusion", "plf"] + (["--overlays"] if args.overlays else []),
        ["evaluate", "--fusion", "mv"],
    ]
    if not args.force and (load_config(args.config).paths.data_dir / "manifest.json").exists():
        # reuse the dataset; train-reg checks it against the config
        steps = steps[1:]
    for step in steps:
        code = run(step + common)
        if code:
            sys.exit(code)


if __name__ == "__main__":
    main()
