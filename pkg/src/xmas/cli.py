"""Command-line driver: gen-data -> train-reg -> train-sim -> segment -> evaluate.

Every stage reads the artifacts of the one before it and refuses to run (exit
code 3) when they are missing; nothing upstream is recomputed silently.

Layout under the configured directories::

    data_dir/subject_007_a.xvol, ..._b.xvol, ..._label.xvol, manifest.json
    checkpoint_dir/reg.xckpt, reg_history.csv, sim.xckpt, sim_history.csv
    output_dir/segment/<method>/subject_007.xvol, subject_007.json
    output_dir/evaluate/metrics_<method>.csv, atlas_metrics_<method>.csv,
                        report_<method>.txt, overlays/subject_007_<method>.png
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io as _io
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import regnet as rn
from . import simnet as sn
from .config import ExperimentConfig, load_config
from .config import _plain as plain_dict
from .errors import ConfigError, DependencyError, NumericError, VolumeIOError, XmasError
from .fusion import FusionConfig, mas_segment
from .io import atomic_write, read_checkpoint, read_volume, write_checkpoint, write_volume
from .losses import label_dice, mean_foreground_dice
from .pipeline import make_subjects, registration_pairs, sim_training_pairs, target_of, test_atlases
from .data import Subject

log = logging.getLogger("xmas")

REG_FORMAT = "xmas-reg-v1"
SIM_FORMAT = "xmas-sim-v1"
MANIFEST_FORMAT = "xmas-manifest-v1"
REG_COLUMNS = ["iteration", "dice_forward", "dice_backward", "smooth_u", "smooth_v", "inv_a", "inv_t", "total"]
SIM_COLUMNS = ["iteration", "loss"]


# ---------------------------------------------------------------------------
# small helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _csv_bytes(columns, rows) -> bytes:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _read_csv_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def _fmt(x) -> str:
    return repr(float(x))


def _subject_files(data_dir: Path, sid: int) -> dict[str, Path]:
    return {k: data_dir / f"subject_{sid:03d}_{k}.xvol" for k in ("a", "b", "label")}


def _reg_echo(cfg: ExperimentConfig) -> dict:
    return {
        "phantom": plain_dict(cfg.phantom),
        "run": dataclasses.asdict(cfg.run),
        "registration": cfg.registration.to_dict(),
        "loss": dataclasses.asdict(cfg.loss),
    }


def _sim_echo(cfg: ExperimentConfig) -> dict:
    return {**_reg_echo(cfg), "similarity": cfg.similarity.to_dict()}


def _json_roundtrip(obj):
    """What ``obj`` looks like after a trip through a checkpoint header."""
    return json.loads(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> int:
    data_dir = cfg.paths.data_dir
    if data_dir.exists() and any(data_dir.iterdir()):
        if not force:
            raise ConfigError(f"{data_dir} is not empty; pass --force to regenerate")
        shutil.rmtree(data_dir)
    run = cfg.run
    entries = []
    for sid, subj in make_subjects(cfg.phantom, range(run.num_subjects)).items():
        files = _subject_files(data_dir, sid)
        write_volume(files["a"], subj.image_a)
        write_volume(files["b"], subj.image_b)
        write_volume(files["label"], subj.label)
        entries.append({
            "id": sid,
            "split": run.split_of(sid),
            "seed": [cfg.phantom.seed, sid],
            "atlas": sid in run.atlas_ids,
            "files": {k: {"name": p.name, "sha256": _sha256(p)} for k, p in files.items()},
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "phantom": plain_dict(cfg.phantom),
        "run": dataclasses.asdict(run),
        "subjects": entries,
    }
    atomic_write(data_dir / "manifest.json", _json_bytes(manifest))
    log.info("wrote %d subjects to %s", len(entries), data_dir)
    return 0


def load_dataset(cfg: ExperimentConfig, ids=None) -> dict[int, Subject]:
    """Subjects from disk, after checking the manifest against ``cfg`` and every checksum."""
    data_dir = cfg.paths.data_dir
    path = data_dir / "manifest.json"
    if not path.exists():
        raise DependencyError(f"no dataset at {data_dir}; run gen-data first")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise VolumeIOError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise VolumeIOError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    expected = {"phantom": plain_dict(cfg.phantom), "run": dataclasses.asdict(cfg.run)}
    if {k: manifest.get(k) for k in expected} != _json_roundtrip(expected):
        raise ConfigError(f"dataset in {data_dir} was generated from a different config; rerun gen-data --force")
    entries = {e["id"]: e for e in manifest["subjects"]}
    out = {}
    for sid in entries if ids is None else ids:
        if sid not in entries:
            raise ConfigError(f"subject {sid} is not in the dataset")
        vols = {}
        for kind, meta in entries[sid]["files"].items():
            fpath = data_dir / meta["name"]
            if not fpath.exists():
                raise VolumeIOError(f"missing dataset file {fpath}")
            if _sha256(fpath) != meta["sha256"]:
                raise VolumeIOError(f"{fpath} does not match its manifest checksum")
            vols[kind] = read_volume(fpath)
        out[sid] = Subject(vols["a"], vols["b"], vols["label"])
    return out


# ---------------------------------------------------------------------------
# training


def _reg_rows(history, start: int):
    return [[str(start + i)] + [_fmt(getattr(h, c)) for c in REG_COLUMNS[1:]] for i, h in enumerate(history)]


def _resume_point(ckpt: Path, fmt: str, echo: dict, force: bool):
    """(iteration, blocks) to resume from, or (0, None) for a fresh run."""
    if force or not ckpt.exists():
        return 0, None
    header, blocks = read_checkpoint(ckpt, fmt)
    if header["config"] != _json_roundtrip(echo):
        raise ConfigError(f"{ckpt} was written with a different config; pass --force to retrain")
    return int(header["iteration"]), blocks


def load_reg_net(cfg: ExperimentConfig) -> rn.RegNet:
    ckpt = cfg.paths.checkpoint_dir / "reg.xckpt"
    if not ckpt.exists():
        raise DependencyError(f"no registration checkpoint at {ckpt}; run train-reg first")
    header, blocks = read_checkpoint(ckpt, REG_FORMAT)
    if header["config"] != _json_roundtrip(_reg_echo(cfg)):
        raise ConfigError(f"{ckpt} was written with a different config; rerun train-reg --force")
    if header["iteration"] < cfg.registration.iterations:
        raise DependencyError(f"{ckpt} stops at iteration {header['iteration']}; finish train-reg first")
    net = rn.load_state_blocks(rn.build_regnet(cfg.registration), blocks)
    return net.eval()


def load_sim_net(cfg: ExperimentConfig) -> sn.SimNet:
    ckpt = cfg.paths.checkpoint_dir / "sim.xckpt"
    if not ckpt.exists():
        raise DependencyError(f"no similarity checkpoint at {ckpt}; run train-sim first")
    header, blocks = read_checkpoint(ckpt, SIM_FORMAT)
    if header["config"] != _json_roundtrip(_sim_echo(cfg)):
        raise ConfigError(f"{ckpt} was written with a different config; rerun train-sim --force")
    if header["iteration"] < cfg.similarity.iterations:
        raise DependencyError(f"{ckpt} stops at iteration {header['iteration']}; finish train-sim first")
    sc = cfg.similarity
    return sn.load_state_blocks(sn.build_simnet(sc.patch_side, sc.embed_dim, sc.seed), blocks).eval()


def _dump_nan_state(cfg: ExperimentConfig, name: str, exc: NumericError) -> None:
    path = cfg.paths.checkpoint_dir / f"{name}_nan_state.json"
    atomic_write(path, _json_bytes(exc.state))
    log.error("numeric failure; state written to %s", path)


def cmd_train_reg(cfg: ExperimentConfig, force: bool = False) -> int:
    rc = cfg.registration
    subjects = load_dataset(cfg, cfg.run.reg_ids)
    pairs = registration_pairs(subjects, cfg.run)
    ckpt = cfg.paths.checkpoint_dir / "reg.xckpt"
    hist_path = cfg.paths.checkpoint_dir / "reg_history.csv"
    echo = _reg_echo(cfg)

    net = rn.build_regnet(rc)
    opt = rn.make_optimizer(net, rc)
    start, blocks = _resume_point(ckpt, REG_FORMAT, echo, force)
    rows = []
    if blocks is not None:
        rn.load_state_blocks(net, blocks, opt, step=start)
        rows = _read_csv_rows(hist_path)[:start]
        if len(rows) != start:
            raise VolumeIOError(f"{hist_path} has {len(rows)} rows, checkpoint is at iteration {start}")
        if start >= rc.iterations:
            log.info("registration already trained (%d iterations); pass --force to retrain", start)
            return 0
        log.info("resuming registration training at iteration %d", start)
    for lo in range(start, rc.iterations, cfg.run.checkpoint_every):
        hi = min(lo + cfg.run.checkpoint_every, rc.iterations)
        try:
            net, history = rn.train_reg(net, pairs, rc, cfg.loss, optimizer=opt, start_iteration=lo, stop_iteration=hi)
        except NumericError as exc:
            _dump_nan_state(cfg, "reg", exc)
            raise
        rows += _reg_rows(history, lo)
        write_checkpoint(ckpt, REG_FORMAT, config=echo, seed=rc.seed, iteration=hi, blocks=rn.state_blocks(net, opt))
        atomic_write(hist_path, _csv_bytes(REG_COLUMNS, rows))
        log.info("registration checkpoint at iteration %d (total loss %s)", hi, rows[-1][-1])
    return 0


def cmd_train_sim(cfg: ExperimentConfig, force: bool = False) -> int:
    sc = cfg.similarity
    reg_net = load_reg_net(cfg)
    run = cfg.run
    subjects = load_dataset(cfg, sorted(set(run.reg_ids + run.sim_ids)))
    pairs = sim_training_pairs(reg_net, subjects, cfg)
    ckpt = cfg.paths.checkpoint_dir / "sim.xckpt"
    hist_path = cfg.paths.checkpoint_dir / "sim_history.csv"
    echo = _sim_echo(cfg)

    net = sn.build_simnet(sc.patch_side, sc.embed_dim, sc.seed)
    start, blocks = _resume_point(ckpt, SIM_FORMAT, echo, force)
    rows = []
    if blocks is not None:
        sn.load_state_blocks(net, blocks)
        rows = _read_csv_rows(hist_path)[:start]
        if len(rows) != start:
            raise VolumeIOError(f"{hist_path} has {len(rows)} rows, checkpoint is at iteration {start}")
        if start >= sc.iterations:
            log.info("similarity net already trained (%d iterations); pass --force to retrain", start)
            return 0
        log.info("resuming similarity training at iteration %d", start)
    warped, targets = [p[0] for p in pairs], [p[1] for p in pairs]
    for lo in range(start, sc.iterations, cfg.run.checkpoint_every):
        hi = min(lo + cfg.run.checkpoint_every, sc.iterations)
        try:
            net, history = sn.train_sim(net, warped, targets, sc, start_iteration=lo, stop_iteration=hi)
        except NumericError as exc:
            _dump_nan_state(cfg, "sim", exc)
            raise
        rows += [[str(lo + i), _fmt(j)] for i, j in enumerate(history)]
        write_checkpoint(ckpt, SIM_FORMAT, config=echo, seed=sc.seed, iteration=hi, blocks=sn.state_blocks(net))
        atomic_write(hist_path, _csv_bytes(SIM_COLUMNS, rows))
        log.info("similarity checkpoint at iteration %d (J %s)", hi, rows[-1][-1])
    return 0


# ---------------------------------------------------------------------------
# segmentation and evaluation


def _seg_paths(cfg: ExperimentConfig, method: str, sid: int) -> tuple[Path, Path]:
    base = cfg.paths.output_dir / "segment" / method
    return base / f"subject_{sid:03d}.xvol", base / f"subject_{sid:03d}.json"


def _targets(cfg: ExperimentConfig, target: int | None) -> list[int]:
    if target is None:
        return cfg.run.test_ids
    if target not in cfg.run.test_ids:
        raise ConfigError(f"target {target} is not a test subject (test ids: {cfg.run.test_ids})")
    return [target]


def cmd_segment(cfg: ExperimentConfig, method: str, target: int | None = None) -> int:
    fusion_cfg = dataclasses.replace(cfg.fusion, method=method)
    targets = _targets(cfg, target)
    reg_net = load_reg_net(cfg)
    sim_net = load_sim_net(cfg) if method == "plf" else None
    subjects = load_dataset(cfg, sorted(set(cfg.run.atlas_ids + targets)))
    atlases = test_atlases(subjects, cfg.run)
    for sid in targets:
        image, gold = target_of(subjects[sid], cfg.run)
        fused, diag = mas_segment(reg_net, sim_net, atlases, image, fusion_cfg, gold=gold)
        diag["subject"] = sid
        diag["atlas_ids"] = cfg.run.atlas_ids
        vol_path, diag_path = _seg_paths(cfg, method, sid)
        write_volume(vol_path, fused)
        atomic_write(diag_path, _json_bytes(diag))
        log.info("segmented subject %d with %s: Dice %.4f", sid, method, diag["dice"])
    return 0


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def cmd_evaluate(cfg: ExperimentConfig, method: str, overlays: bool = False) -> int:
    targets = cfg.run.test_ids
    missing = [str(p) for sid in targets for p in _seg_paths(cfg, method, sid) if not p.exists()]
    if missing:
        raise DependencyError("missing segmentations (run segment first):\n  " + "\n  ".join(missing))
    subjects = load_dataset(cfg, targets)
    structure = cfg.fusion.structure
    rows, atlas_rows = [], []
    for sid in targets:
        vol_path, diag_path = _seg_paths(cfg, method, sid)
        pred = read_volume(vol_path)
        diag = json.loads(diag_path.read_text(encoding="utf-8"))
        gold = subjects[sid].label
        per_atlas = diag["per_atlas"]
        rows.append([
            sid,
            label_dice(pred.labels, gold.labels, structure),
            mean_foreground_dice(pred.labels, gold.labels, gold.label_set),
            float(np.mean([a["dice"] for a in per_atlas])),
            float(np.median([a["residual"] for a in per_atlas])),
        ])
        for a, aid in zip(per_atlas, diag["atlas_ids"]):
            atlas_rows.append([sid, aid, a["dice"], a["dice_mean_fg"], a["residual"]])

    out_dir = cfg.paths.output_dir / "evaluate"
    columns = ["subject", f"dice_s{structure}", "dice_mean_fg", "atlas_dice_mean", "residual_median"]
    atomic_write(out_dir / f"metrics_{method}.csv",
                 _csv_bytes(columns, [[r[0]] + [_fmt(x) for x in r[1:]] for r in rows]))
    atomic_write(out_dir / f"atlas_metrics_{method}.csv",
                 _csv_bytes(["subject", "atlas", f"dice_s{structure}", "dice_mean_fg", "residual"],
                            [[r[0], r[1]] + [_fmt(x) for x in r[2:]] for r in atlas_rows]))
    report = format_report(method, structure, rows, atlas_rows)
    atomic_write(out_dir / f"report_{method}.txt", report.encode("utf-8"))
    print(report, end="")
    if overlays:
        from .overlay import save_overlay

        for sid in targets:
            image, gold = target_of(subjects[sid], cfg.run)
            pred = read_volume(_seg_paths(cfg, method, sid)[0])
            save_overlay(out_dir / "overlays" / f"subject_{sid:03d}_{method}.png", image, gold, pred, structure)
    return 0


def format_report(method: str, structure: int, rows, atlas_rows) -> str:
    d_mean, d_std = _mean_std([r[1] for r in rows])
    f_mean, f_std = _mean_std([r[2] for r in rows])
    a_mean, a_std = _mean_std([r[2] for r in atlas_rows])
    res = np.asarray([r[4] for r in atlas_rows])
    lines = [
        f"fusion: {method}",
        f"{'subject':>8} {'Dice (s' + str(structure) + ')':>12} {'Dice (fg)':>10} {'atlas Dice':>11}",
    ]
    for r in rows:
        lines.append(f"{r[0]:>8d} {100 * r[1]:>12.1f} {100 * r[2]:>10.1f} {100 * r[3]:>11.1f}")
    lines += [
        f"fused Dice (structure {structure}): {100 * d_mean:.1f} ± {100 * d_std:.1f} %",
        f"fused Dice (mean foreground): {100 * f_mean:.1f} ± {100 * f_std:.1f} %",
        f"single-atlas Dice (structure {structure}): {100 * a_mean:.1f} ± {100 * a_std:.1f} % over {len(atlas_rows)} pairs",
        f"inverse-consistency residual: median {np.median(res):.4f}, max {res.max():.4f} voxels",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


def _threads() -> int:
    raw = os.environ.get("XMAS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"XMAS_THREADS must be a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmas", description="Cross-modality multi-atlas segmentation on synthetic phantoms.")
    parser.add_argument("command", choices=["gen-data", "train-reg", "train-sim", "segment", "evaluate"])
    parser.add_argument("--config", required=True, help="sectioned key=value experiment file")
    parser.add_argument("--seed", type=int, help="override the experiment seed")
    parser.add_argument("--force", action="store_true", help="overwrite existing data or checkpoints")
    parser.add_argument("--fusion", choices=["plf", "mv"], help="label fusion method (default from config)")
    parser.add_argument("--target", type=int, help="segment only this test subject")
    parser.add_argument("--overlays", action="store_true", help="write mid-slice PNG overlays during evaluate")
    parser.add_argument("--quiet", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        torch.set_num_threads(_threads())
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        method = args.fusion or cfg.fusion.method
        FusionConfig(method=method)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.force)
        if args.command == "train-reg":
            return cmd_train_reg(cfg, args.force)
        if args.command == "train-sim":
            return cmd_train_sim(cfg, args.force)
        if args.command == "segment":
            return cmd_segment(cfg, method, args.target)
        return cmd_evaluate(cfg, method, args.overlays)
    except XmasError as exc:
        print(f"xmas {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"xmas {args.command}: {exc}", file=sys.stderr)
        return VolumeIOError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
