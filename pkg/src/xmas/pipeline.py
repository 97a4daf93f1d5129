"""Glue between the split in :class:`RunConfig` and the training/fusion code.

Kept free of file I/O so that the CLI, the experiment scripts and the
acceptance tests build exactly the same pairs.
"""

from __future__ import annotations

from .config import ExperimentConfig, RunConfig
from .data import PhantomConfig, Subject, generate_subject, normalize_subject, paired_atlas
from .regnet import RegNet, register_atlas


def make_subjects(phantom: PhantomConfig, ids) -> dict[int, Subject]:
    """Normalised phantoms keyed by subject id."""
    return {i: normalize_subject(generate_subject(phantom, i)) for i in ids}


def atlas_of(subject: Subject, run: RunConfig):
    return subject.image(run.atlas_modality), subject.label


def target_of(subject: Subject, run: RunConfig):
    return subject.image(run.target_modality), subject.label


def registration_pairs(subjects: dict[int, Subject], run: RunConfig):
    """Disjoint (atlas, target) pairs over the registration subjects: (0, 1), (2, 3), ...

    Atlas and target always come from different subjects and different
    modalities.
    """
    ids = run.reg_ids
    return [(atlas_of(subjects[ids[i]], run), target_of(subjects[ids[i + 1]], run)) for i in range(0, len(ids) - 1, 2)]


def similarity_pairs(reg_net: RegNet, subjects: dict[int, Subject], run: RunConfig, target_ids, paired_ids):
    """(warped atlas, target) pairs for triplet sampling.

    Every atlas is registered onto every target in ``target_ids``. Each
    subject in ``paired_ids`` also contributes its own atlas-modality image
    under a small random deformation, which stands in for a near-perfect
    registration and is the main source of patch pairs above the upper Dice
    threshold.
    """
    pairs = []
    for t in target_ids:
        target = target_of(subjects[t], run)
        for a in run.atlas_ids:
            w_img, w_lab, _, _ = register_atlas(reg_net, atlas_of(subjects[a], run), target[0])
            pairs.append(((w_img, w_lab), target))
    for t in paired_ids:
        subj = subjects[t]
        pairs.append((paired_atlas(subj, run.atlas_modality, run.paired_amplitude, [run.seed, t]), target_of(subj, run)))
    return pairs


def sim_training_pairs(reg_net: RegNet, subjects: dict[int, Subject], cfg: ExperimentConfig):
    run = cfg.run
    return similarity_pairs(reg_net, subjects, run, run.sim_ids, run.reg_ids + run.sim_ids)


def sim_heldout_pairs(reg_net: RegNet, subjects: dict[int, Subject], cfg: ExperimentConfig):
    run = cfg.run
    return similarity_pairs(reg_net, subjects, run, run.test_ids, run.test_ids)


def test_atlases(subjects: dict[int, Subject], run: RunConfig):
    return [atlas_of(subjects[a], run) for a in run.atlas_ids]
