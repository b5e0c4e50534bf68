"""Silhouette-consensus fusion and two-stage global registration.

A consensus fusion aligns a source camera set to a target set that shares
image ids. Every pair of shared cameras proposes two similarity transforms
(one anchored at each camera of the pair, with the scale taken from the
pair's center distance). Each proposal is scored by rendering the model from
transformed reference cameras and averaging the IoU against the reference
masks; the best-scoring proposal wins.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_fraction, check_has_all, check_is_fitted, check_pose_set, check_positive
from .errors import (
    AllCandidatesDegenerate, DegeneratePair, InsufficientCorrespondence, PreconditionError, StageError,
)
from .geometry import (
    PoseSet, Sim3, align_pose_pair, pair_scale, pose_set_from_dict, pose_set_to_dict,
    sim3_apply_pose_set,
)
from .splatrender import DEFAULT_TAU, consensus_ious, resample_mask

DEFAULT_CONSENSUS_RES = 128
# a candidate is abandoned once its best possible mean IoU falls this far below
# the incumbent; ties never replace the incumbent, so this cannot change the result
_PRUNE_MARGIN = 1e-9


@dataclass(frozen=True)
class FusionResult:
    transform: Sim3
    score: float
    winning_pair: tuple
    anchor: int
    evaluated_pairs: int
    skipped_pairs: int = 0

    def to_dict(self):
        return {"transform": self.transform.to_dict(), "score": self.score,
                "winning_pair": list(self.winning_pair), "anchor": self.anchor,
                "evaluated_pairs": self.evaluated_pairs, "skipped_pairs": self.skipped_pairs}

    @classmethod
    def from_dict(cls, d):
        return cls(Sim3.from_dict(d["transform"]), float(d["score"]), tuple(d["winning_pair"]),
                   int(d["anchor"]), int(d["evaluated_pairs"]), int(d.get("skipped_pairs", 0)))


@dataclass(frozen=True)
class RegistrationOutput:
    stage1: FusionResult
    stage2: FusionResult
    aligned_mixed: PoseSet
    aligned_aux: PoseSet

    def to_dict(self):
        return {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict(),
                "aligned_mixed": pose_set_to_dict(self.aligned_mixed),
                "aligned_aux": pose_set_to_dict(self.aligned_aux)}

    @classmethod
    def from_dict(cls, d):
        return cls(FusionResult.from_dict(d["stage1"]), FusionResult.from_dict(d["stage2"]),
                   pose_set_from_dict(d["aligned_mixed"]), pose_set_from_dict(d["aligned_aux"]))


def write_registration(reg, path):
    Path(path).write_text(json.dumps(reg.to_dict(), indent=1), encoding="utf-8")


def read_registration(path):
    return RegistrationOutput.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def candidate_transform(src, tgt, scale):
    """Similarity taking camera ``src`` onto ``tgt`` with the given scale
    about the anchor camera."""
    rigid = align_pose_pair(src, tgt)
    R = rigid.R
    return Sim3(scale, rigid.rotation, tgt.center - scale * R @ src.center)


def enumerate_candidates(P_src, P_tgt, max_pairs=None):
    """Yield ``(pair, anchor, transform or None)`` in evaluation order.

    ``None`` marks a degenerate pair (coincident camera centers).
    """
    shared = sorted(set(P_src.ids) & set(P_tgt.ids))
    if len(shared) < 2:
        raise InsufficientCorrespondence(
            f"source and target share {len(shared)} camera id(s); at least 2 are needed")
    pairs = list(itertools.combinations(shared, 2))
    if max_pairs is not None and len(pairs) > max_pairs:
        # keep the widest baselines; they constrain the scale best
        def dist(pr):
            return float(np.linalg.norm(P_tgt[pr[0]].center - P_tgt[pr[1]].center))
        keep = set(sorted(pairs, key=lambda pr: (-dist(pr), pr))[:max_pairs])
        pairs = [pr for pr in pairs if pr in keep]
    for a, b in pairs:
        try:
            s = pair_scale(P_src[a], P_src[b], P_tgt[a], P_tgt[b])
        except DegeneratePair:
            yield (a, b), 1, None
            yield (a, b), 2, None
            continue
        yield (a, b), 1, candidate_transform(P_src[a], P_tgt[a], s)
        yield (a, b), 2, candidate_transform(P_src[b], P_tgt[b], s)


def stack_masks(ref_masks, ids, width, height):
    return np.ascontiguousarray(
        np.array([resample_mask(ref_masks[i], width, height).bits for i in ids], dtype=np.bool_))


def consensus_score(transform, P_ref, model, masks, res, tau=DEFAULT_TAU, floor=-np.inf):
    """Mean IoU of model silhouettes seen from ``transform``-moved reference
    cameras; NaN when abandoned below ``floor``."""
    cams = sim3_apply_pose_set(transform, P_ref)
    ious = consensus_ious(model, list(cams), masks, res, res, tau, floor)
    if np.isnan(ious).any():
        return float("nan")
    return math.fsum(ious) / len(ious)


def silhouette_consensus_fusion(P_src, P_tgt, P_ref, model, ref_masks,
                                consensus_res=DEFAULT_CONSENSUS_RES, tau=DEFAULT_TAU,
                                max_pairs=None, prune=True):
    """Best consensus-scoring similarity aligning ``P_src`` to ``P_tgt``.

    Ties keep the earlier candidate (pairs in lexicographic id order,
    anchor 1 before anchor 2).
    """
    for name, ps in (("P_src", P_src), ("P_tgt", P_tgt), ("P_ref", P_ref)):
        check_pose_set(name, ps)
    check_has_all("ref_masks", ref_masks, P_ref.ids)
    if len(model) == 0:
        raise PreconditionError("model has no splats")
    res = check_positive("consensus_res", consensus_res, integer=True)
    check_fraction("tau", tau)
    masks = stack_masks(ref_masks, P_ref.ids, res, res)

    best = None
    best_score = -np.inf
    evaluated = skipped = 0
    for pair, anchor, T in enumerate_candidates(P_src, P_tgt, max_pairs):
        if T is None:
            skipped += 1
            continue
        evaluated += 1
        floor = best_score - _PRUNE_MARGIN if prune else -np.inf
        score = consensus_score(T, P_ref, model, masks, res, tau, floor)
        if score > best_score:
            best, best_score = (T, pair, anchor), score
    if best is None:
        raise AllCandidatesDegenerate("every candidate pair has coincident camera centers",
                                      diagnostics={"skipped_pairs": skipped})
    T, pair, anchor = best
    return FusionResult(T, float(best_score), pair, anchor, evaluated, skipped)


def _staged(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError as exc:
        raise type(exc)(str(exc), stage=stage, diagnostics=exc.diagnostics) from exc
    except PreconditionError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc


def global_register(P_main, P_aux, P_mix, model, aux_masks,
                    consensus_res=DEFAULT_CONSENSUS_RES, tau=DEFAULT_TAU, max_pairs=None):
    """Two-stage registration of the auxiliary cameras into the main frame.

    Stage 1 aligns the predicted mixed cameras to the main reconstruction
    through their main-pose members, scoring with the auxiliary members.
    Stage 2 aligns the auxiliary reconstruction to the stage-1-aligned
    auxiliary members of the mixed set, scoring with every auxiliary view.
    """
    for name, ps in (("P_main", P_main), ("P_aux", P_aux), ("P_mix", P_mix)):
        check_pose_set(name, ps)
    mix_main_ids = [i for i in P_mix.ids if i in P_main]
    mix_aux_ids = [i for i in P_mix.ids if i in P_aux]
    if len(mix_main_ids) < 2 or len(mix_aux_ids) < 2:
        raise InsufficientCorrespondence(
            f"mixed set has {len(mix_main_ids)} main and {len(mix_aux_ids)} auxiliary cameras; "
            "each needs at least 2", stage="global")
    opts = dict(consensus_res=consensus_res, tau=tau, max_pairs=max_pairs)
    mix_main = P_mix.subset(mix_main_ids)
    mix_aux = P_mix.subset(mix_aux_ids)
    stage1 = _staged("global-stage1", silhouette_consensus_fusion,
                     mix_main, P_main, mix_aux, model, aux_masks, **opts)
    aligned_mixed = sim3_apply_pose_set(stage1.transform, P_mix)
    stage2 = _staged("global-stage2", silhouette_consensus_fusion,
                     P_aux, aligned_mixed.subset(mix_aux_ids), P_aux, model, aux_masks, **opts)
    aligned_aux = sim3_apply_pose_set(stage2.transform, P_aux)
    return RegistrationOutput(stage1, stage2, aligned_mixed, aligned_aux)


class SilhouetteConsensusFusion(BaseEstimator, TransformerMixin):
    """Learns the similarity aligning a source camera set to a target set.

    ``fit(P_src, P_tgt, P_ref, model, ref_masks)`` stores ``transform_``,
    ``score_`` and ``result_``; ``transform(P)`` moves any pose set by it.
    """

    def __init__(self, consensus_res=DEFAULT_CONSENSUS_RES, tau=DEFAULT_TAU, max_pairs=None):
        self.consensus_res = consensus_res
        self.tau = tau
        self.max_pairs = max_pairs

    def fit(self, P_src, P_tgt, P_ref, model, ref_masks):
        self.result_ = silhouette_consensus_fusion(
            P_src, P_tgt, P_ref, model, ref_masks, self.consensus_res, self.tau, self.max_pairs)
        self.transform_ = self.result_.transform
        self.score_ = self.result_.score
        return self

    def transform(self, P):
        check_is_fitted(self, "transform_")
        return sim3_apply_pose_set(self.transform_, P)


class GlobalRegistration(BaseEstimator, TransformerMixin):
    """Estimator form of :func:`global_register`; ``transform_`` maps the
    auxiliary camera file's frame into the main frame."""

    def __init__(self, consensus_res=DEFAULT_CONSENSUS_RES, tau=DEFAULT_TAU, max_pairs=None):
        self.consensus_res = consensus_res
        self.tau = tau
        self.max_pairs = max_pairs

    def fit(self, P_main, P_aux, P_mix, model, aux_masks):
        self.result_ = global_register(P_main, P_aux, P_mix, model, aux_masks,
                                       self.consensus_res, self.tau, self.max_pairs)
        self.transform_ = self.result_.stage2.transform
        return self

    def transform(self, P):
        check_is_fitted(self, "transform_")
        return sim3_apply_pose_set(self.transform_, P)
