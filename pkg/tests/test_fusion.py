import itertools
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from sklearn.base import clone

from posefuse.errors import AllCandidatesDegenerate, InsufficientCorrespondence, PreconditionError
from posefuse.fusion import (
    GlobalRegistration, SilhouetteConsensusFusion, candidate_transform, consensus_score,
    enumerate_candidates, global_register, read_registration, silhouette_consensus_fusion,
    stack_masks, write_registration,
)
from posefuse.geometry import PoseSet, Sim3, pair_scale, sim3_apply_pose, sim3_apply_pose_set
from posefuse.metrics import registration_error
from posefuse.splatrender import mask_iou, render_mask, resample_mask

RES = 64


def noisy(poses, deg, seed):
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        dR = Rotation.from_rotvec(rng.normal(scale=math.radians(deg), size=3)).as_matrix()
        out.append(p.replace(rotation=Rotation.from_matrix(dR @ p.R).as_quat(scalar_first=True),
                             center=p.center + rng.normal(scale=0.02, size=3)))
    return PoseSet(poses.label, tuple(out))


@pytest.fixture(scope="module")
def scene(small_cloud, ring):
    """Target cameras in the model frame with exact masks."""
    masks = {p.id: render_mask(small_cloud, p) for p in ring}
    return small_cloud, ring, masks


def rot_deg(T):
    return math.degrees(T.angle())


def rel_transform_error(A, B, diameter):
    D = A @ B.inverse()
    return rot_deg(D), float(np.linalg.norm(D.translation)) / diameter, abs(D.scale - 1)


# -- candidates ------------------------------------------------------------

def test_candidate_transform_independent_construction(ring):
    G = Sim3(1.7, Rotation.from_euler("xyz", [10, 40, -20], degrees=True).as_quat(scalar_first=True),
             [0.3, -0.2, 1.0])
    src = sim3_apply_pose_set(G.inverse(), ring)
    a, b = ring.ids[:2]
    s = pair_scale(src[a], src[b], ring[a], ring[b])
    T = candidate_transform(src[a], ring[a], s)
    # exact frames: the rotation is R_tgt R_src^T and the anchor lands on the target
    np.testing.assert_allclose(T.R, ring[a].R @ src[a].R.T, atol=1e-12)
    np.testing.assert_allclose(T.apply(src[a].center), ring[a].center, atol=1e-12)
    assert T.scale == pytest.approx(1.7, rel=1e-12)


def test_four_ids_give_twelve_candidates(ring):
    sub = ring.subset(ring.ids[:4])
    cands = list(enumerate_candidates(sub, sub))
    assert len(cands) == 12
    assert [c[0] for c in cands[::2]] == list(itertools.combinations(sorted(sub.ids), 2))
    assert [c[1] for c in cands] == [1, 2] * 6


def test_insufficient_correspondence(ring):
    with pytest.raises(InsufficientCorrespondence):
        list(enumerate_candidates(ring.subset(ring.ids[:1]), ring))


def test_max_pairs_keeps_widest(ring):
    got = {c[0] for c in enumerate_candidates(ring, ring, max_pairs=3)}
    d = {pr: np.linalg.norm(ring[pr[0]].center - ring[pr[1]].center)
         for pr in itertools.combinations(sorted(ring.ids), 2)}
    widest = sorted(d, key=lambda pr: -d[pr])[:3]
    assert got == set(widest)


def test_all_degenerate(scene, ring):
    model, _, masks = scene
    p = ring[ring.ids[0]]
    twin = PoseSet("d", (p, p.replace(id="twin")))
    with pytest.raises(AllCandidatesDegenerate):
        silhouette_consensus_fusion(twin, twin, ring, model, masks, RES)


def test_missing_masks(scene, ring):
    model, _, masks = scene
    with pytest.raises(PreconditionError):
        silhouette_consensus_fusion(ring, ring, ring, model, {}, RES)


# -- fusion ----------------------------------------------------------------

def test_identity_case(scene):
    model, ring, masks = scene
    res = silhouette_consensus_fusion(ring, ring, ring, model, masks, RES)
    assert rot_deg(res.transform) < 1e-6
    assert abs(res.transform.scale - 1) < 1e-6
    assert np.linalg.norm(res.transform.translation) < 1e-6
    self_iou = math.fsum(mask_iou(render_mask(model, p, RES, RES), resample_mask(masks[p.id], RES, RES))
                         for p in ring) / len(ring)
    assert abs(res.score - self_iou) < 1e-6


def test_known_gauge_recovered(scene):
    model, ring, masks = scene
    G = Sim3(0.6, Rotation.from_euler("zyx", [70, -15, 5], degrees=True).as_quat(scalar_first=True),
             [0.4, 0.1, -0.3])
    src = sim3_apply_pose_set(G.inverse(), ring)
    res = silhouette_consensus_fusion(src, ring, src, model, masks, RES)
    dr, dt, ds = rel_transform_error(res.transform, G, ring.diameter())
    assert dr < 1e-4 and dt < 1e-4 and ds < 1e-6
    assert res.score > 0.99


def brute_force_fusion(P_src, P_tgt, P_ref, model, masks, res):
    """Exhaustive argmax with first-best tie-breaking, written without the
    library's enumeration and batched scorer."""
    ids = sorted(set(P_src.ids) & set(P_tgt.ids))
    best = None
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            a, b = ids[i], ids[j]
            d_src = np.linalg.norm(P_src[a].center - P_src[b].center)
            d_tgt = np.linalg.norm(P_tgt[a].center - P_tgt[b].center)
            s = d_tgt / d_src
            for anchor, c in ((1, a), (2, b)):
                T = candidate_transform(P_src[c], P_tgt[c], s)
                ious = []
                for p in P_ref:
                    m = render_mask(model, sim3_apply_pose(T, p), res, res)
                    ious.append(mask_iou(m, resample_mask(masks[p.id], res, res)))
                score = math.fsum(ious) / len(ious)
                if best is None or score > best[0]:
                    best = (score, T, (a, b), anchor)
    return best


def test_brute_force_equivalence(scene):
    model, ring, masks = scene
    G = Sim3(1.3, Rotation.from_euler("xyz", [5, 30, 60], degrees=True).as_quat(scalar_first=True),
             [0.2, 0.0, 0.1])
    tgt = ring.subset(ring.ids[:4])
    src = noisy(sim3_apply_pose_set(G.inverse(), tgt), 3.0, 0)
    ref = sim3_apply_pose_set(G.inverse(), ring.subset(ring.ids[4:]))
    res = silhouette_consensus_fusion(src, tgt, ref, model, masks, RES)
    score, T, pair, anchor = brute_force_fusion(src, tgt, ref, model, masks, RES)
    assert res.evaluated_pairs == 12
    assert res.score == score
    assert (res.winning_pair, res.anchor) == (pair, anchor)
    np.testing.assert_array_equal(res.transform.as_matrix(), T.as_matrix())


def test_pruning_does_not_change_result(scene):
    model, ring, masks = scene
    src = noisy(ring, 4.0, 1)
    a = silhouette_consensus_fusion(src, ring, src, model, masks, RES, prune=True)
    b = silhouette_consensus_fusion(src, ring, src, model, masks, RES, prune=False)
    assert a.score == b.score and a.winning_pair == b.winning_pair and a.anchor == b.anchor


def test_score_is_reproducible(scene):
    model, ring, masks = scene
    src = noisy(ring, 4.0, 2)
    res = silhouette_consensus_fusion(src, ring, src, model, masks, RES)
    again = consensus_score(res.transform, src, model, stack_masks(masks, src.ids, RES, RES), RES)
    assert abs(again - res.score) < 1e-9


def test_no_candidate_beats_winner(scene):
    model, ring, masks = scene
    src = noisy(ring.subset(ring.ids[:6]), 4.0, 3)
    res = silhouette_consensus_fusion(src, ring, src, model, masks, RES, prune=False)
    stack = stack_masks(masks, src.ids, RES, RES)
    for _, _, T in enumerate_candidates(src, ring):
        assert consensus_score(T, src, model, stack, RES) <= res.score


def test_rigid_equivariance(scene):
    model, ring, masks = scene
    src = noisy(ring.subset(ring.ids[:6]), 4.0, 4)
    Q = Sim3(1.0, Rotation.from_euler("y", 35, degrees=True).as_quat(scalar_first=True), [1, 2, 3])
    base = silhouette_consensus_fusion(src, ring, src, model, masks, RES)
    moved_src = sim3_apply_pose_set(Q, src)
    moved = silhouette_consensus_fusion(moved_src, ring, moved_src, model, masks, RES)
    dr, dt, ds = rel_transform_error(moved.transform, base.transform @ Q.inverse(), ring.diameter())
    assert dr < 1e-6 and dt < 1e-6
    assert abs(moved.score - base.score) < 1e-6


def test_estimator(scene):
    model, ring, masks = scene
    est = SilhouetteConsensusFusion(consensus_res=RES)
    assert clone(est).get_params() == {"consensus_res": RES, "tau": 0.5, "max_pairs": None}
    out = est.fit(ring, ring, ring, model, masks).transform(ring)
    np.testing.assert_allclose(out.centers, ring.centers, atol=1e-6)


# -- two-stage registration ------------------------------------------------

def _exact_mixed(ds, seed=0):
    main, aux = ds.poses[0].cameras, ds.poses[1].cameras
    ids = main.ids[:8] + aux.ids[:8]
    G = Sim3.random(seed, (0.5, 2.0), 1.0)
    return PoseSet("mixed", tuple(sim3_apply_pose(G, ds.gt_main_frame[i]) for i in ids))


def test_global_register_round_trip(tiny_dataset):
    ds = tiny_dataset
    reg = global_register(ds.poses[0].cameras, ds.poses[1].cameras, _exact_mixed(ds), ds.model,
                          ds.poses[1].masks, RES)
    err = registration_error(reg.aligned_aux, ds.gt_pose_set(1))
    assert max(err.dtheta_x, err.dtheta_y, err.dtheta_z) < 1e-3
    assert err.dp < 1e-3 * ds.poses[0].cameras.diameter()


def test_global_register_noop(tiny_dataset):
    ds = tiny_dataset
    aux_main = ds.gt_pose_set(1).relabel("pose1")
    mixed = PoseSet("mixed", tuple(ds.gt_main_frame[i] for i in ds.poses[0].cameras.ids[:6]
                                   + aux_main.ids[:6]))
    reg = global_register(ds.poses[0].cameras, aux_main, mixed, ds.model, ds.poses[1].masks, RES)
    assert rot_deg(reg.stage1.transform) < 1e-4 and rot_deg(reg.stage2.transform) < 1e-4


def test_global_register_recovers_scale(tiny_dataset):
    ds = tiny_dataset
    aux_main = ds.gt_pose_set(1)
    half = sim3_apply_pose_set(Sim3(0.5), aux_main, "pose1")
    mixed = PoseSet("mixed", tuple(ds.gt_main_frame[i] for i in ds.poses[0].cameras.ids[:6]
                                   + aux_main.ids[:6]))
    reg = global_register(ds.poses[0].cameras, half, mixed, ds.model, ds.poses[1].masks, RES)
    assert reg.stage2.transform.scale == pytest.approx(2.0, rel=1e-3)


def test_global_register_needs_both_sides(tiny_dataset):
    ds = tiny_dataset
    mixed = PoseSet("mixed", tuple(ds.gt_main_frame[i] for i in ds.poses[0].cameras.ids[:6]))
    with pytest.raises(InsufficientCorrespondence):
        global_register(ds.poses[0].cameras, ds.poses[1].cameras, mixed, ds.model, ds.poses[1].masks, RES)


def test_gauge_invariance_small(tiny_dataset):
    ds = tiny_dataset
    main, aux, masks = ds.poses[0].cameras, ds.poses[1].cameras, ds.poses[1].masks
    mixed = ds.predictor().predict(main.ids[:8] + aux.ids[:8])
    base = global_register(main, aux, mixed, ds.model, masks, RES)
    for seed in range(3):
        G = Sim3.random(100 + seed, (0.3, 3.0), 5.0)
        other = global_register(main, aux, sim3_apply_pose_set(G, mixed), ds.model, masks, RES)
        dr, dt, _ = rel_transform_error(other.stage2.transform, base.stage2.transform, main.diameter())
        assert dr < 1e-4 and dt < 1e-4


def test_registration_file_round_trip(tiny_dataset, tmp_path):
    ds = tiny_dataset
    reg = GlobalRegistration(consensus_res=RES).fit(
        ds.poses[0].cameras, ds.poses[1].cameras, _exact_mixed(ds), ds.model, ds.poses[1].masks)
    write_registration(reg.result_, tmp_path / "r.json")
    back = read_registration(tmp_path / "r.json")
    np.testing.assert_array_equal(back.stage2.transform.as_matrix(), reg.transform_.as_matrix())
    assert back.aligned_aux.ids == ds.poses[1].cameras.ids
