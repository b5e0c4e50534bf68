"""Mixed-pose image selection.

Picks ``M`` main-pose and ``N`` auxiliary-pose views that look alike (by
descriptor cosine similarity) and that a two-view pose predictor places at
compatible orientations. The chosen images are what a multi-view pose
predictor is later run on.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_angle, check_is_fitted, check_pose_set, check_positive
from .errors import IdMismatch, NoVerifiedPairs, PreconditionError, ZeroDescriptor

log = logging.getLogger(__name__)

DEFAULT_M = 15
DEFAULT_N = 15
DEFAULT_K = 50
DEFAULT_PHI = 60.0
DEFAULT_DELTA = 45.0


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Image id -> feature vector, kept in insertion order."""

    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=float)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.ids) or vecs.shape[0] == 0:
            raise PreconditionError("descriptor set must be a non-empty (n, D) array matching its ids")
        if len(set(self.ids)) != len(self.ids):
            raise PreconditionError("descriptor ids must be unique")
        vecs.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "vectors", vecs)

    @classmethod
    def from_mapping(cls, entries, ids=None):
        ids = list(entries) if ids is None else list(ids)
        missing = [i for i in ids if i not in entries]
        if missing:
            raise IdMismatch(f"no descriptor for {len(missing)} id(s), e.g. {missing[0]!r}")
        return cls(tuple(ids), np.array([entries[i] for i in ids], dtype=float))

    def __len__(self):
        return len(self.ids)

    def subset(self, ids):
        index = {i: k for k, i in enumerate(self.ids)}
        return DescriptorSet(tuple(ids), self.vectors[[index[i] for i in ids]])

    def unit(self):
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.flatnonzero(norms < 1e-12)
        if bad.size:
            raise ZeroDescriptor(f"descriptor for {self.ids[bad[0]]!r} has zero norm")
        return self.vectors / norms[:, None]


@dataclass(frozen=True)
class CandidatePair:
    main_id: str
    aux_id: str
    similarity: float


@dataclass(frozen=True)
class MixedPoseSelection:
    main_ids: tuple
    aux_ids: tuple
    seed_pair: CandidatePair
    score: float

    def to_dict(self):
        return {
            "main_ids": list(self.main_ids),
            "aux_ids": list(self.aux_ids),
            "seed_pair": {"main_id": self.seed_pair.main_id, "aux_id": self.seed_pair.aux_id,
                          "similarity": self.seed_pair.similarity},
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d):
        sp = d["seed_pair"]
        return cls(tuple(d["main_ids"]), tuple(d["aux_ids"]),
                   CandidatePair(sp["main_id"], sp["aux_id"], float(sp["similarity"])),
                   float(d["score"]))


@dataclass(frozen=True)
class SimilarityMatrix:
    main_ids: tuple
    aux_ids: tuple
    values: np.ndarray

    def sub(self, main_ids, aux_ids):
        mi = {i: k for k, i in enumerate(self.main_ids)}
        ai = {i: k for k, i in enumerate(self.aux_ids)}
        return self.values[np.ix_([mi[i] for i in main_ids], [ai[i] for i in aux_ids])]


def similarity_matrix(main, aux):
    """Cosine similarities, shape (|main|, |aux|)."""
    if len(main) == 0 or len(aux) == 0:
        raise PreconditionError("descriptor sets must be non-empty")
    a, b = main.unit(), aux.unit()
    if a.shape[1] != b.shape[1]:
        raise PreconditionError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    vals = np.clip(a @ b.T, -1.0, 1.0)
    vals.setflags(write=False)
    return SimilarityMatrix(main.ids, aux.ids, vals)


def top_k_pairs(matrix, k):
    """The ``k`` most similar (main, aux) pairs, best first.

    Equal similarities are ordered by (main_id, aux_id).
    """
    k = check_positive("k", k, integer=True)
    vals = matrix.values
    mids = np.array(matrix.main_ids, dtype=object)
    aids = np.array(matrix.aux_ids, dtype=object)
    ii, jj = np.meshgrid(np.arange(vals.shape[0]), np.arange(vals.shape[1]), indexing="ij")
    ii, jj, flat = ii.ravel(), jj.ravel(), vals.ravel()
    # lexsort: last key is primary
    order = np.lexsort((aids[jj].astype(str), mids[ii].astype(str), -flat))[:k]
    return [CandidatePair(matrix.main_ids[ii[o]], matrix.aux_ids[jj[o]], float(flat[o])) for o in order]


def geometric_verify(pairs, oracle, phi=DEFAULT_PHI, delta=DEFAULT_DELTA, stats=None):
    """Keep pairs whose predicted forward gap <= ``phi`` and up gap <= ``delta``.

    ``oracle`` maps ``"mainId|auxId"`` to (forward_deg, up_deg). Pairs without
    a prediction are dropped and counted in ``stats["missing"]``.
    """
    phi = check_angle("phi", phi)
    delta = check_angle("delta", delta)
    kept, missing = [], 0
    for p in pairs:
        gaps = oracle.get(f"{p.main_id}|{p.aux_id}")
        if gaps is None:
            missing += 1
            continue
        if gaps[0] <= phi and gaps[1] <= delta:
            kept.append(p)
    if missing:
        log.warning("oracle has no prediction for %d candidate pair(s); dropped", missing)
    if stats is not None:
        stats["missing"] = missing
    return kept


def _nearest(poses, seed_id, count):
    seed = poses[seed_id].center
    others = [(float(np.linalg.norm(p.center - seed)), p.id) for p in poses if p.id != seed_id]
    others.sort()
    return (seed_id,) + tuple(i for _, i in others[: count - 1])


def expand_neighborhood(pair, main_poses, aux_poses, m, n):
    """Seed images plus their nearest camera-center neighbours in each set."""
    m = check_positive("m", m, integer=True)
    n = check_positive("n", n, integer=True)
    if m > len(main_poses) or n > len(aux_poses):
        raise PreconditionError(f"requested {m}+{n} views from sets of {len(main_poses)}+{len(aux_poses)}")
    if pair.main_id not in main_poses or pair.aux_id not in aux_poses:
        raise IdMismatch(f"seed pair {pair.main_id}|{pair.aux_id} not found in the pose sets")
    return _nearest(main_poses, pair.main_id, m), _nearest(aux_poses, pair.aux_id, n)


def select_mixed_set(main_desc, aux_desc, main_poses, aux_poses, oracle,
                     m=DEFAULT_M, n=DEFAULT_N, k=DEFAULT_K, phi=DEFAULT_PHI, delta=DEFAULT_DELTA):
    """Choose the expansion of a verified seed pair with the highest mean
    cross-set similarity."""
    check_pose_set("main_poses", main_poses)
    check_pose_set("aux_poses", aux_poses)
    sims = similarity_matrix(main_desc, aux_desc)
    candidates = top_k_pairs(sims, k)
    verified = geometric_verify(candidates, oracle, phi, delta)
    if not verified:
        gaps = [oracle[f"{p.main_id}|{p.aux_id}"] for p in candidates
                if f"{p.main_id}|{p.aux_id}" in oracle]
        diag = {"candidates": len(candidates)}
        if gaps:
            g = np.array(gaps)
            diag.update(min_fwd_deg=float(g[:, 0].min()), max_fwd_deg=float(g[:, 0].max()),
                        min_up_deg=float(g[:, 1].min()), max_up_deg=float(g[:, 1].max()))
        raise NoVerifiedPairs(f"no candidate pair passed verification (phi={phi}, delta={delta})",
                              stage="selection", diagnostics=diag)
    best, best_key = None, None
    for p in verified:
        mids, aids = expand_neighborhood(p, main_poses, aux_poses, m, n)
        score = float(np.mean(sims.sub(mids, aids)))
        # larger score, then larger seed similarity, then smaller ids
        key = (-score, -p.similarity, p.main_id, p.aux_id)
        if best_key is None or key < best_key:
            best, best_key = MixedPoseSelection(mids, aids, p, score), key
    return best


def random_mixed_set(main_poses, aux_poses, m, n, seed):
    """Seeded uniform M/N subset, the ablation baseline that skips selection."""
    rng = np.random.default_rng(seed)
    mids = tuple(rng.choice(np.array(main_poses.ids, dtype=object), size=m, replace=False))
    aids = tuple(rng.choice(np.array(aux_poses.ids, dtype=object), size=n, replace=False))
    return MixedPoseSelection(mids, aids, CandidatePair(mids[0], aids[0], float("nan")), float("nan"))


def write_selection(sel, path):
    Path(path).write_text(json.dumps(sel.to_dict(), indent=1), encoding="utf-8")


def read_selection(path):
    return MixedPoseSelection.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class MixedPoseSelector(BaseEstimator):
    """Estimator wrapper around :func:`select_mixed_set`.

    ``fit`` stores the selection in ``selection_``; ``transform`` returns the
    selected (main_ids, aux_ids).
    """

    def __init__(self, m=DEFAULT_M, n=DEFAULT_N, k=DEFAULT_K, phi=DEFAULT_PHI, delta=DEFAULT_DELTA):
        self.m = m
        self.n = n
        self.k = k
        self.phi = phi
        self.delta = delta

    def fit(self, main_desc, aux_desc, main_poses, aux_poses, oracle):
        self.selection_ = select_mixed_set(main_desc, aux_desc, main_poses, aux_poses, oracle,
                                           self.m, self.n, self.k, self.phi, self.delta)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "selection_")
        return self.selection_.main_ids, self.selection_.aux_ids
