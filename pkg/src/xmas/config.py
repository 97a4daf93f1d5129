"""Experiment configuration read from a sectioned key=value file.

Every section is optional; a missing key keeps the dataclass default, so an
empty file runs the default protocol (lambda1=0.3, lambda2=0.2, 15^3 patches,
thresholds 0.9 / 0.5).

Example::

    [paths]
    workdir = runs/demo
    data_dir = data

    [experiment]
    seed = 0
    num_test = 4
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import PhantomConfig
from .errors import ConfigError
from .field import SpatialGrid
from .fusion import FusionConfig
from .losses import LossConfig
from .regnet import RegNetConfig
from .simnet import SimTrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Subject split and run-level settings.

    Subject ids are consecutive: first the registration-training subjects,
    then the similarity-training subjects, then the test subjects. The first
    ``num_atlases`` registration subjects are the labelled atlases (imaged in
    ``atlas_modality``); targets are imaged in the other modality.
    """

    seed: int = 0
    num_reg_train: int = 6
    num_sim_train: int = 2
    num_test: int = 4
    num_atlases: int = 4
    atlas_modality: str = "a"
    checkpoint_every: int = 100
    paired_amplitude: float = 1.0

    def __post_init__(self):
        if self.atlas_modality not in ("a", "b"):
            raise ConfigError(f"atlas_modality must be 'a' or 'b', got {self.atlas_modality!r}")
        if self.num_reg_train < 2 or self.num_sim_train < 1 or self.num_test < 1:
            raise ConfigError("need >= 2 registration, >= 1 similarity and >= 1 test subjects")
        if not 1 <= self.num_atlases <= self.num_reg_train:
            raise ConfigError("num_atlases must lie in [1, num_reg_train]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.paired_amplitude < 0:
            raise ConfigError("paired_amplitude must be non-negative")

    @property
    def num_subjects(self) -> int:
        return self.num_reg_train + self.num_sim_train + self.num_test

    @property
    def target_modality(self) -> str:
        return "b" if self.atlas_modality == "a" else "a"

    @property
    def reg_ids(self) -> list[int]:
        return list(range(self.num_reg_train))

    @property
    def sim_ids(self) -> list[int]:
        return list(range(self.num_reg_train, self.num_reg_train + self.num_sim_train))

    @property
    def test_ids(self) -> list[int]:
        return list(range(self.num_reg_train + self.num_sim_train, self.num_subjects))

    @property
    def atlas_ids(self) -> list[int]:
        return list(range(self.num_atlases))

    def split_of(self, subject: int) -> str:
        if subject in self.reg_ids:
            return "reg_train"
        if subject in self.sim_ids:
            return "sim_train"
        if subject in self.test_ids:
            return "test"
        raise ConfigError(f"subject {subject} is outside the split (0..{self.num_subjects - 1})")


@dataclass(frozen=True)
class PathsConfig:
    """Relative sub-directories are resolved against ``workdir``."""

    workdir: Path = Path("runs/default")
    data_dir: Path = Path("data")
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("output")

    def resolve(self, base_dir: Path | None = None) -> "PathsConfig":
        work = self.workdir if base_dir is None or self.workdir.is_absolute() else base_dir / self.workdir
        sub = {k: getattr(self, k) for k in ("data_dir", "checkpoint_dir", "output_dir")}
        return PathsConfig(work, **{k: v if v.is_absolute() else work / v for k, v in sub.items()})


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=lambda: PathsConfig().resolve())
    run: RunConfig = field(default_factory=RunConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    registration: RegNetConfig = field(default_factory=RegNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    similarity: SimTrainConfig = field(default_factory=SimTrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.fusion.patch_side != self.similarity.patch_side:
            raise ConfigError(
                f"fusion patch_side {self.fusion.patch_side} differs from similarity patch_side {self.similarity.patch_side}"
            )
        if self.registration.input_grid != self.phantom.grid:
            raise ConfigError("registration input_grid must equal the phantom grid")
        if max(self.similarity.patch_side, self.fusion.patch_side) > min(self.phantom.grid.shape):
            raise ConfigError("patch side exceeds the phantom grid")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every random stream re-seeded."""
        return dataclasses.replace(
            self,
            run=dataclasses.replace(self.run, seed=seed),
            phantom=dataclasses.replace(self.phantom, seed=seed),
            registration=dataclasses.replace(self.registration, seed=seed),
            similarity=dataclasses.replace(self.similarity, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "paths": {k: str(v) for k, v in dataclasses.asdict(self.paths).items()},
            "run": dataclasses.asdict(self.run),
            "phantom": _plain(self.phantom),
            "registration": self.registration.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "similarity": self.similarity.to_dict(),
            "fusion": dataclasses.asdict(self.fusion),
        }


def _plain(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, SpatialGrid):
            v = {"shape": list(v.shape), "spacing": list(v.spacing)}
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if isinstance(default, Path):
            return Path(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _override(cfg, section: configparser.SectionProxy, skip=()):
    names = {f.name for f in dataclasses.fields(cfg)} - set(skip)
    changes = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        changes[key] = _convert(raw, getattr(cfg, key), f"[{section.name}] {key}")
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


def _grid(section, key: str, default: SpatialGrid) -> SpatialGrid:
    if key not in section:
        return default
    try:
        side = int(section[key])
        return SpatialGrid.cube(side)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} must be one integer side length") from exc


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"paths", "experiment", "phantom", "registration", "loss", "similarity", "fusion"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    def sec(name):
        return parser[name] if parser.has_section(name) else parser[parser.default_section]

    cfg = ExperimentConfig()
    paths = _override(PathsConfig(), sec("paths")).resolve(base_dir)
    run = _override(cfg.run, sec("experiment"))
    cfg = cfg.with_seed(run.seed)

    ph = sec("phantom")
    phantom = _override(cfg.phantom, ph, skip=("grid",))
    phantom = dataclasses.replace(phantom, grid=_grid(ph, "grid", phantom.grid))
    reg = sec("registration")
    registration = _override(cfg.registration, reg, skip=("input_grid",))
    registration = dataclasses.replace(registration, input_grid=_grid(reg, "input_grid", phantom.grid))
    if registration.input_grid != phantom.grid:
        raise ConfigError(f"registration grid {registration.input_grid.shape} differs from phantom grid {phantom.grid.shape}")
    try:
        return ExperimentConfig(
            paths=paths,
            run=run,
            phantom=phantom,
            registration=registration,
            loss=_override(cfg.loss, sec("loss")),
            similarity=_override(cfg.similarity, sec("similarity")),
            fusion=_override(cfg.fusion, sec("fusion")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
