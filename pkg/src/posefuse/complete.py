"""Model completion: balanced view sampling and photometric fine-tuning.

After an auxiliary pose is registered, its views are merged with the pool
of previously fused views and the splat model is fine-tuned on both. Each
epoch draws as many fused views as there are auxiliary views, so the larger
pool cannot drown out the new observations.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ._validation import check_has_all, check_positive
from .errors import NonFiniteLoss, PreconditionError, StageError
from .fusion import DEFAULT_CONSENSUS_RES, global_register
from .geometry import PoseSet, sim3_apply_pose_set
from .refine import RefineConfig, local_refine
from .selection import (
    DEFAULT_DELTA, DEFAULT_K, DEFAULT_PHI, DescriptorSet, random_mixed_set, select_mixed_set,
)
from .splatrender import KAPPA, Z_NEAR, SplatCloud, _photometric_grads, pack_cameras

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleSchedule:
    """One view id per iteration, grouped into epochs."""

    epochs: tuple
    order: tuple
    seed: int
    with_replacement: bool = False

    @property
    def iterations(self):
        return len(self.order)


def balanced_schedule(fused_ids, aux_ids, iterations, seed=0):
    """Epochs of ``|aux|`` random fused views plus every auxiliary view,
    shuffled and consumed one per iteration until ``iterations`` are used.

    Fused views are drawn without replacement unless the pool is smaller
    than the auxiliary set.
    """
    fused_ids, aux_ids = list(fused_ids), list(aux_ids)
    if not fused_ids or not aux_ids:
        raise PreconditionError("both the fused pool and the auxiliary set must be non-empty")
    iterations = check_positive("iterations", iterations, integer=True)
    replace = len(fused_ids) < len(aux_ids)
    if replace:
        log.warning("fused pool (%d) smaller than auxiliary set (%d); sampling with replacement",
                    len(fused_ids), len(aux_ids))
    rng = np.random.default_rng(seed)
    fused = np.array(fused_ids, dtype=object)
    epochs, order = [], []
    while len(order) < iterations:
        pick = rng.choice(len(fused), size=len(aux_ids), replace=replace)
        epoch = [fused[k] for k in pick] + aux_ids
        epoch = [epoch[k] for k in rng.permutation(len(epoch))]
        take = epoch[: iterations - len(order)]
        epochs.append(tuple(take))
        order.extend(take)
    return SampleSchedule(tuple(epochs), tuple(order), int(seed), replace)


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_position: float = 2e-4
    lr_log_sigma: float = 5e-3
    lr_color: float = 1e-2
    lr_logit_opacity: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        check_positive("iterations", self.iterations, integer=True)
        for f in ("lr_position", "lr_log_sigma", "lr_color", "lr_logit_opacity"):
            v = getattr(self, f)
            if not (math.isfinite(v) and v >= 0):
                raise PreconditionError(f"{f} must be non-negative, got {v!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class _Adam:
    def __init__(self, shape, lr, b1, b2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def finetune_splats(model, views, schedule, cfg=None):
    """Fine-tune splat positions, log-radii, colors and logit-opacities.

    ``views`` maps id -> (CameraPose, RgbImage, SilhouetteMask) in the model
    frame. Each iteration takes one Adam step on the masked photometric loss
    of the scheduled view. Parameters with a zero learning rate are returned
    untouched.
    """
    cfg = cfg or TrainConfig()
    check_has_all("views", views, set(schedule.order))
    pos = np.array(model.positions)
    sig = np.array(model.sigmas)
    col = np.array(model.colors)
    op = np.array(model.opacities)
    n = len(pos)
    opt = {k: _Adam(shape, lr, cfg.beta1, cfg.beta2, cfg.eps) for k, shape, lr in (
        ("p", (n, 3), cfg.lr_position), ("s", n, cfg.lr_log_sigma),
        ("c", (n, 3), cfg.lr_color), ("o", n, cfg.lr_logit_opacity))}
    cache = {}
    snapshot = model
    for it, vid in enumerate(schedule.order):
        if vid not in cache:
            pose, img, mask = views[vid]
            Rs, cs, intrs = pack_cameras([pose])
            k = pose.intrinsics
            cache[vid] = (Rs, cs, intrs, k.width, k.height,
                          np.ascontiguousarray(img.pixels[None], dtype=float),
                          np.ascontiguousarray(mask.bits[None], dtype=np.bool_))
        Rs, cs, intrs, W, H, ref, msk = cache[vid]
        loss, _, _, gpos, gsig, gop, gcol = _photometric_grads(
            pos, sig, op, col, Rs, cs, intrs, W, H, ref, msk, Z_NEAR, KAPPA)
        if not (np.isfinite(loss).all() and np.isfinite(gpos).all() and np.isfinite(gcol).all()
                and np.isfinite(gsig).all() and np.isfinite(gop).all()):
            raise NonFiniteLoss(f"non-finite loss or gradient at iteration {it}", stage="complete",
                                diagnostics={"snapshot": snapshot, "iteration": it})
        if cfg.lr_position > 0:
            pos = pos - opt["p"].step(gpos)
        if cfg.lr_log_sigma > 0:
            sig = sig * np.exp(-opt["s"].step(gsig * sig))
        if cfg.lr_color > 0:
            col = np.clip(col - opt["c"].step(gcol), 0.0, 1.0)
        if cfg.lr_logit_opacity > 0:
            step = opt["o"].step(gop * op * (1.0 - op))
            o = np.clip(op, 1e-6, 1.0 - 1e-6)
            logit = np.log(o) - np.log1p(-o) - step
            op = np.where(step == 0.0, op, 1.0 / (1.0 + np.exp(-logit)))
        if (it + 1) % 500 == 0:
            snapshot = model.replace(positions=pos, sigmas=sig, colors=col, opacities=op)
    return model.replace(positions=pos, sigmas=sig, colors=col, opacities=op)


# -- incremental fusion -----------------------------------------------------

@dataclass
class AuxiliaryInput:
    """One auxiliary capture: cameras in their own frame plus per-view data.

    ``oracle`` covers pairs between fused ids and this capture's ids;
    ``predictor`` maps a list of ids to a predicted PoseSet.
    """

    cameras: PoseSet
    images: dict
    masks: dict
    descriptors: dict
    oracle: dict
    predictor: object
    train_ids: tuple = None


@dataclass
class FusionState:
    model: SplatCloud
    fused: PoseSet
    images: dict
    masks: dict
    descriptors: dict
    transforms: list = field(default_factory=list)
    registrations: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    def views(self, ids):
        return {i: (self.fused[i], self.images[i], self.masks[i]) for i in ids}


@dataclass
class IterateConfig:
    m: int = 15
    n: int = 15
    k: int = DEFAULT_K
    phi: float = DEFAULT_PHI
    delta: float = DEFAULT_DELTA
    consensus_res: int = DEFAULT_CONSENSUS_RES
    max_pairs: int = None
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    random_mixed: bool = False
    skip_refine: bool = False
    skip_complete: bool = False
    seed: int = 0


def _null_recorder(stage, seconds, **payload):
    pass


def iterate_auxiliary_poses(state, next_aux, cfg=None, pose_index=None, recorder=None):
    """Register one more auxiliary capture and fold it into the model.

    Runs selection, global registration, local refinement and fine-tuning,
    and returns a new state whose fused pool includes the registered views.
    ``recorder(stage, seconds, **payload)`` is called after every stage.
    """
    cfg = cfg or IterateConfig()
    rec = recorder or _null_recorder
    label = f"pose{pose_index}" if pose_index is not None else "aux"
    clock = time.perf_counter
    try:
        t0 = clock()
        if cfg.random_mixed:
            sel = random_mixed_set(state.fused, next_aux.cameras, cfg.m, cfg.n, [cfg.seed, pose_index or 0])
        else:
            sel = select_mixed_set(
                DescriptorSet.from_mapping(state.descriptors, state.fused.ids),
                DescriptorSet.from_mapping(next_aux.descriptors, next_aux.cameras.ids),
                state.fused, next_aux.cameras, next_aux.oracle, cfg.m, cfg.n, cfg.k, cfg.phi, cfg.delta)
        mixed = next_aux.predictor(list(sel.main_ids) + list(sel.aux_ids))
        rec("selection", clock() - t0, selection=sel, mixed=mixed)
        t0 = clock()
        reg = global_register(state.fused, next_aux.cameras, mixed, state.model, next_aux.masks,
                              cfg.consensus_res, max_pairs=cfg.max_pairs)
        T = reg.stage2.transform
        rec("global", clock() - t0, registration=reg, transform=T)
        traces = []
        if not cfg.skip_refine:
            t0 = clock()
            T, traces = local_refine(next_aux.cameras, state.model, next_aux.images, next_aux.masks,
                                     T, cfg.refine)
            rec("refine", clock() - t0, transform=T, traces=traces)
    except StageError as exc:
        raise type(exc)(f"{exc} ({label})", stage=exc.stage, diagnostics=exc.diagnostics) from exc
    aligned = sim3_apply_pose_set(T, next_aux.cameras)
    train = list(next_aux.train_ids or aligned.ids)
    fused = PoseSet(state.fused.label, tuple(state.fused) + tuple(aligned.subset(train)))
    images = {**state.images, **{i: next_aux.images[i] for i in train}}
    masks = {**state.masks, **{i: next_aux.masks[i] for i in train}}
    descs = {**state.descriptors, **{i: next_aux.descriptors[i] for i in train}}
    model = state.model
    if not cfg.skip_complete:
        t0 = clock()
        schedule = balanced_schedule(state.fused.ids, train, cfg.train.iterations, cfg.train.seed)
        views = {**state.views(state.fused.ids),
                 **{i: (aligned[i], next_aux.images[i], next_aux.masks[i]) for i in train}}
        try:
            model = finetune_splats(state.model, views, schedule, cfg.train)
        except StageError as exc:
            raise type(exc)(f"{exc} ({label})", stage="complete", diagnostics=exc.diagnostics) from exc
        rec("complete", clock() - t0, model=model, schedule=schedule)
    return FusionState(model, fused, images, masks, descs,
                       state.transforms + [T], state.registrations + [(sel, reg)],
                       state.traces + [traces])
