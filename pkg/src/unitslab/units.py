"""Unsupervised intermediate training: pseudo-labels and the three strategies.

Each strategy step mixes a supervised term on labeled synthetic images with a
consistency term on unlabeled real images: a teacher branch predicts on the
original image (no gradients recorded), the prediction is transported into the
strongly augmented frame and hardened into a pseudo-label, and the student
branch is supervised on the augmented view. Teachers always read pre-step
weights; branch updates inside one step are simultaneous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .augment import AugSpec, apply_geo, color_jitter, identity_transform, sample_strong, transport_map
from .detector import det_loss, forward_scores, predict_batch
from .params import ParamSet, sgd_step
from .scene import LabeledSample, UnlabeledSample
from .tensor import Tape, Tensor, add, backward, scale

logger = logging.getLogger(__name__)


class Strategy(Enum):
    SBSS = "sbss"  # single branch supervises its own augmented view
    DBSS = "dbss"  # branch 1 teaches branch 2; only branch 2 learns from real data
    DBDS = "dbds"  # both directions at once, symmetric branches


@dataclass(frozen=True)
class UnitsHyper:
    lr: float
    momentum: float = 0.9
    pseudo_threshold: float = 0.5
    confidence_band: tuple[float, float] | None = None
    synth_batch: int = 8
    unlabeled_batch: int = 8
    loss_weight_units: float = 1.0
    loss_weight_synth: float = 1.0
    # weight of the mirrored (teacher theta2 -> student theta1) direction in
    # DBDS; None means "same as loss_weight_units"
    loss_weight_units_mirror: float | None = None
    augment_synth_strong: bool = False

    def __post_init__(self):
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise ValueError(f"pseudo_threshold must be in (0,1), got {self.pseudo_threshold}")
        if self.confidence_band is not None:
            lo, hi = self.confidence_band
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"confidence band {self.confidence_band} invalid")

    def mirror_weight(self) -> float:
        if self.loss_weight_units_mirror is None:
            return self.loss_weight_units
        return self.loss_weight_units_mirror


@dataclass(frozen=True)
class PseudoLabel:
    target: np.ndarray  # hard {0,1} map
    valid: np.ndarray  # {0,1} mask, same shape


@dataclass(frozen=True)
class BranchPair:
    theta1: ParamSet
    theta2: ParamSet

    def __post_init__(self):
        if self.theta1.names() != self.theta2.names():
            raise ValueError("branches must share parameter names")
        for name in self.theta1.names():
            if self.theta1[name].shape != self.theta2[name].shape:
                raise ValueError(f"branch shapes diverge at {name!r}")

    def swapped(self) -> "BranchPair":
        return BranchPair(theta1=self.theta2, theta2=self.theta1)


@dataclass(frozen=True)
class DirectionSeeds:
    transform: int
    jitter: int


@dataclass(frozen=True)
class StepSeeds:
    """Per-step randomness; dir2 drives the theta2-student direction (the only
    direction in SBSS/DBSS), dir1 drives the mirrored DBDS direction."""

    synth_jitter: int
    dir1: DirectionSeeds
    dir2: DirectionSeeds

    def exchanged(self) -> "StepSeeds":
        return StepSeeds(synth_jitter=self.synth_jitter, dir1=self.dir2, dir2=self.dir1)


def step_seeds(run_seed: int, stage_tag: int, step_index: int) -> StepSeeds:
    entropy = [run_seed & (2**64 - 1), stage_tag, step_index]
    words = np.random.SeedSequence(entropy).generate_state(5)
    return StepSeeds(
        synth_jitter=int(words[0]),
        dir1=DirectionSeeds(transform=int(words[1]), jitter=int(words[2])),
        dir2=DirectionSeeds(transform=int(words[3]), jitter=int(words[4])),
    )


def make_pseudo_label(
    teacher: np.ndarray, geo_valid: np.ndarray, hp: UnitsHyper
) -> PseudoLabel:
    """Harden a detached teacher map: threshold to {0,1}, keep geometry-valid
    pixels, and drop any whose teacher value falls inside the confidence band."""
    if isinstance(teacher, Tensor):
        raise TypeError("make_pseudo_label takes a plain array; detach the teacher first")
    teacher = np.asarray(teacher)
    target = (teacher >= hp.pseudo_threshold).astype(np.float64)
    valid = np.broadcast_to(np.asarray(geo_valid, dtype=np.float64), teacher.shape).copy()
    if hp.confidence_band is not None:
        lo, hi = hp.confidence_band
        valid[(teacher >= lo) & (teacher <= hi)] = 0.0
    return PseudoLabel(target=target, valid=valid)


def units_loss(student: Tensor, pl: PseudoLabel, weight: float = 1.0) -> Tensor:
    """Masked BCE of the student view against the pseudo-label, weighted."""
    if pl.valid.sum() == 0:
        logger.warning("units_loss: no valid pseudo-label pixels, loss is 0")
    return scale(det_loss(student, pl.target, pl.valid), weight)


# ---------------------------------------------------------------------------
# step machinery


def _stack(images: list[np.ndarray]) -> np.ndarray:
    return np.stack(images, axis=0)


def _jitter_batch(images: np.ndarray, seed: int, aug: AugSpec) -> np.ndarray:
    out = [
        color_jitter(img, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), aug.weak)
        for i, img in enumerate(images)
    ]
    return np.stack(out, axis=0)


def _synth_term(
    params: ParamSet,
    synth_batch: list[LabeledSample],
    hp: UnitsHyper,
    aug: AugSpec,
    seeds: StepSeeds,
) -> Tensor:
    images = _stack([s.image for s in synth_batch])
    masks = _stack([s.mask.astype(np.float64) for s in synth_batch])
    valid = np.ones_like(masks)
    if hp.augment_synth_strong and aug.strong_enabled:
        t = sample_strong(seeds.dir2.transform, aug, images.shape[-2:])
        images = apply_geo(images, t)
        masks, geo_valid = transport_map(masks, t)
        valid = np.broadcast_to(geo_valid.astype(np.float64), masks.shape).copy()
    images = _jitter_batch(images, seeds.synth_jitter, aug)
    pred = forward_scores(params, Tensor(images[:, None, :, :]))
    loss = det_loss(pred, masks[:, None, :, :], valid[:, None, :, :])
    return scale(loss, hp.loss_weight_synth)


def _consistency_term(
    student_params: ParamSet,
    teacher_params: ParamSet,
    unlabeled_batch: list[UnlabeledSample],
    hp: UnitsHyper,
    aug: AugSpec,
    seeds: DirectionSeeds,
    weight: float,
) -> Tensor:
    images = _stack([u.image for u in unlabeled_batch])
    # teacher pass: plain arrays, nothing recorded, then hardened
    teacher_vals = predict_batch(teacher_params, images)
    if aug.strong_enabled:
        t = sample_strong(seeds.transform, aug, images.shape[-2:])
    else:
        t = identity_transform(images.shape[-2:])
    moved, geo_valid = transport_map(teacher_vals, t)
    pl = make_pseudo_label(moved[:, None, :, :], geo_valid, hp)
    student_in = _jitter_batch(apply_geo(images, t), seeds.jitter, aug)
    student = forward_scores(student_params, Tensor(student_in[:, None, :, :]))
    return units_loss(student, pl, weight)


def _apply(
    params: ParamSet,
    terms: list[Tensor],
    hp: UnitsHyper,
    loss_out: list[float] | None = None,
) -> ParamSet:
    if not terms:
        return params
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    if loss_out is not None:
        loss_out.append(total.item())
    grads = backward(total)
    return sgd_step(params, grads, hp.lr, hp.momentum)


def sbss_step(
    theta: ParamSet,
    synth_batch: list[LabeledSample],
    unlabeled_batch: list[UnlabeledSample],
    hp: UnitsHyper,
    aug: AugSpec,
    seeds: StepSeeds,
    loss_out: list[float] | None = None,
) -> ParamSet:
    """Single branch: its own detached prediction supervises its augmented view."""
    with Tape():
        terms: list[Tensor] = []
        if hp.loss_weight_synth != 0.0 and synth_batch:
            terms.append(_synth_term(theta, synth_batch, hp, aug, seeds))
        if hp.loss_weight_units != 0.0 and unlabeled_batch:
            terms.append(
                _consistency_term(
                    theta, theta, unlabeled_batch, hp, aug, seeds.dir2, hp.loss_weight_units
                )
            )
        return _apply(theta, terms, hp, loss_out)


def dbss_step(
    pair: BranchPair,
    synth_batch: list[LabeledSample],
    unlabeled_batch: list[UnlabeledSample],
    hp: UnitsHyper,
    aug: AugSpec,
    seeds: StepSeeds,
    loss_out: list[float] | None = None,
) -> BranchPair:
    """Branch 1 learns from synthetic data only; branch 2 adds the consistency
    term taught by branch 1's pre-step prediction."""
    with Tape():
        terms1: list[Tensor] = []
        if hp.loss_weight_synth != 0.0 and synth_batch:
            terms1.append(_synth_term(pair.theta1, synth_batch, hp, aug, seeds))
        new_theta1 = _apply(pair.theta1, terms1, hp)
    with Tape():
        terms2: list[Tensor] = []
        if hp.loss_weight_synth != 0.0 and synth_batch:
            terms2.append(_synth_term(pair.theta2, synth_batch, hp, aug, seeds))
        if hp.loss_weight_units != 0.0 and unlabeled_batch:
            terms2.append(
                _consistency_term(
                    pair.theta2,
                    pair.theta1,
                    unlabeled_batch,
                    hp,
                    aug,
                    seeds.dir2,
                    hp.loss_weight_units,
                )
            )
        new_theta2 = _apply(pair.theta2, terms2, hp, loss_out)
    return BranchPair(theta1=new_theta1, theta2=new_theta2)


def dbds_step(
    pair: BranchPair,
    synth_batch: list[LabeledSample],
    unlabeled_batch: list[UnlabeledSample],
    hp: UnitsHyper,
    aug: AugSpec,
    seeds: StepSeeds,
    loss_out: list[float] | None = None,
) -> BranchPair:
    """DBSS plus the mirrored direction: inputs swapped, branch 1 also updates.
    Both teachers read pre-step weights, so the two branches are symmetric."""
    mirror_w = hp.mirror_weight()
    with Tape():
        terms1: list[Tensor] = []
        if hp.loss_weight_synth != 0.0 and synth_batch:
            terms1.append(_synth_term(pair.theta1, synth_batch, hp, aug, seeds))
        if mirror_w != 0.0 and unlabeled_batch:
            terms1.append(
                _consistency_term(
                    pair.theta1, pair.theta2, unlabeled_batch, hp, aug, seeds.dir1, mirror_w
                )
            )
        new_theta1 = _apply(pair.theta1, terms1, hp, loss_out)
    with Tape():
        terms2: list[Tensor] = []
        if hp.loss_weight_synth != 0.0 and synth_batch:
            terms2.append(_synth_term(pair.theta2, synth_batch, hp, aug, seeds))
        if hp.loss_weight_units != 0.0 and unlabeled_batch:
            terms2.append(
                _consistency_term(
                    pair.theta2,
                    pair.theta1,
                    unlabeled_batch,
                    hp,
                    aug,
                    seeds.dir2,
                    hp.loss_weight_units,
                )
            )
        new_theta2 = _apply(pair.theta2, terms2, hp)
    return BranchPair(theta1=new_theta1, theta2=new_theta2)


def select_init(strategy: Strategy, state: ParamSet | BranchPair) -> ParamSet:
    """The branch that seeds the fine-tuning stage for each strategy."""
    if strategy is Strategy.SBSS:
        if not isinstance(state, ParamSet):
            raise TypeError("SBSS state must be a single ParamSet")
        return state
    if not isinstance(state, BranchPair):
        raise TypeError(f"{strategy.value} state must be a BranchPair")
    if strategy is Strategy.DBSS:
        return state.theta2
    return state.theta1  # DBDS: symmetric branches, theta1 fixed for determinism
