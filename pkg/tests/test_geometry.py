import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from posefuse.errors import DegenerateAlignment, DegeneratePair, PreconditionError
from posefuse.geometry import (
    CameraIntrinsics, CameraPose, PoseSet, Sim3, align_pose_pair, pair_scale, read_pose_set,
    sim3_apply_pose, sim3_apply_pose_set, sim3_compose, sim3_invert, write_pose_set,
)
from posefuse.synth import look_at

from conftest import random_sim3

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def _pts(seed, n=20):
    return np.random.default_rng(seed).uniform(-10, 10, size=(n, 3))


def _rot_z(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_quat(scalar_first=True)


# -- Sim3 ------------------------------------------------------------------

def test_compose_identity_left():
    T = random_sim3(1)
    out = sim3_compose(Sim3.identity(), T)
    np.testing.assert_allclose(out.as_matrix(), T.as_matrix(), atol=1e-12)


def test_compose_with_inverse_is_identity():
    T = random_sim3(2)
    np.testing.assert_allclose((T @ T.inverse()).as_matrix(), np.eye(4), atol=1e-9)


def test_compose_hand_example():
    a = Sim3(2.0, _rot_z(90), [1, 0, 0])
    b = Sim3(1.0, [1, 0, 0, 0], [0, 1, 0])
    np.testing.assert_allclose((a @ b).apply([0, 0, 0]), a.apply(b.apply([0, 0, 0])), atol=1e-12)
    np.testing.assert_allclose((a @ b).apply([0, 0, 0]), [-1, 0, 0], atol=1e-12)


def test_compose_scale_multiplies():
    a, b = random_sim3(3), random_sim3(4)
    assert (a @ b).scale == pytest.approx(a.scale * b.scale, rel=1e-15)


def test_invert_pure_scale():
    inv = sim3_invert(Sim3(2.0))
    assert inv.scale == 0.5
    np.testing.assert_allclose(inv.translation, 0)
    np.testing.assert_allclose(inv.R, np.eye(3))


def test_invert_identity():
    np.testing.assert_allclose(sim3_invert(Sim3.identity()).as_matrix(), np.eye(4))


def test_invert_round_trip_many_seeds():
    pts = np.random.default_rng(0).normal(size=(1000, 3))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * 1e3 * np.random.default_rng(1).uniform(size=(1000, 1))
    worst = 0.0
    for seed in range(1000):
        T = random_sim3(seed)
        back = T.inverse().apply(T.apply(pts[seed]))
        worst = max(worst, float(np.abs(back - pts[seed]).max()))
    assert worst < 1e-9


@settings(max_examples=60, deadline=None)
@given(seeds, seeds, seeds)
def test_group_laws(s1, s2, s3):
    a, b, c = random_sim3(s1), random_sim3(s2), random_sim3(s3)
    p = _pts(s1)
    np.testing.assert_allclose(((a @ b) @ c).apply(p), (a @ (b @ c)).apply(p), atol=1e-9)
    np.testing.assert_allclose((Sim3.identity() @ a).apply(p), a.apply(p), atol=1e-9)
    np.testing.assert_allclose((a @ Sim3.identity()).apply(p), a.apply(p), atol=1e-9)
    np.testing.assert_allclose((a @ a.inverse()).apply(p), p, atol=1e-9)
    np.testing.assert_allclose((a.inverse() @ a).apply(p), p, atol=1e-9)


def test_rejects_bad_scale():
    with pytest.raises(PreconditionError):
        Sim3(0.0)
    with pytest.raises(PreconditionError):
        Sim3(float("nan"))


def test_dict_round_trip():
    T = random_sim3(9)
    back = Sim3.from_dict(T.to_dict())
    np.testing.assert_array_equal(back.as_matrix(), T.as_matrix())


# -- applying to poses -----------------------------------------------------

def test_apply_identity_unchanged(front_camera):
    out = sim3_apply_pose(Sim3.identity(), front_camera)
    np.testing.assert_allclose(out.center, front_camera.center)
    np.testing.assert_allclose(out.R, front_camera.R)


def test_apply_pure_scale(intr64):
    p = CameraPose("a", [1, 0, 0, 0], [1, 1, 1], intr64)
    out = sim3_apply_pose(Sim3(2.0), p)
    np.testing.assert_allclose(out.center, [2, 2, 2])
    np.testing.assert_allclose(out.rotation, p.rotation)


def test_apply_z_rotation_keeps_z_forward(intr64):
    p = CameraPose("a", [1, 0, 0, 0], [1, 0, 0], intr64)
    out = sim3_apply_pose(Sim3(1.0, _rot_z(90)), p)
    np.testing.assert_allclose(out.forward, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(out.center, [0, 1, 0], atol=1e-12)
    assert out.intrinsics is p.intrinsics


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_apply_keeps_orthonormal_frame(seed):
    k = CameraIntrinsics.from_fov(32, 32, 45)
    rng = np.random.default_rng(seed)
    p = CameraPose("x", Rotation.random(random_state=rng).as_quat(scalar_first=True), rng.normal(size=3), k)
    out = sim3_apply_pose(random_sim3(seed), p)
    assert abs(np.linalg.norm(out.rotation) - 1) < 1e-9
    R = out.R
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.dot(out.forward, out.up)) < 1e-9


def test_apply_pose_set_relabels(ring):
    out = sim3_apply_pose_set(random_sim3(5), ring, "moved")
    assert out.label == "moved" and out.ids == ring.ids


# -- align_pose_pair -------------------------------------------------------

def test_align_same_pose_is_identity(front_camera):
    T = align_pose_pair(front_camera, front_camera)
    np.testing.assert_allclose(T.as_matrix(), np.eye(4), atol=1e-12)


def test_align_hand_example(intr64):
    up = np.array([0.0, 1.0, 0.0])
    src = look_at([0, 0, 0], intr64, "s", target=[0, 0, 1], world_up=up)
    tgt = look_at([0, 0, 0], intr64, "t", target=[1, 0, 0], world_up=up)
    T = align_pose_pair(src, tgt)
    expect = Rotation.from_euler("y", 90, degrees=True).as_matrix()
    np.testing.assert_allclose(T.R, expect, atol=1e-12)
    np.testing.assert_allclose(sim3_apply_pose(T, src).forward, [1, 0, 0], atol=1e-12)
    assert T.scale == 1.0


def test_align_recovers_rigid_inverse(intr64):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tgt = CameraPose("t", Rotation.random(random_state=rng).as_quat(scalar_first=True),
                         rng.normal(size=3), intr64)
        T_gt = Sim3(1.0, Rotation.random(random_state=rng).as_quat(scalar_first=True), rng.normal(size=3))
        src = sim3_apply_pose(T_gt, tgt)
        T = align_pose_pair(src, tgt)
        worst = max(worst, (T @ T_gt).angle())
        np.testing.assert_allclose((T @ T_gt).translation, 0, atol=1e-9)
    assert math.degrees(worst) < 1e-6


@settings(max_examples=50, deadline=None)
@given(seeds, seeds)
def test_align_postconditions(s1, s2):
    k = CameraIntrinsics.from_fov(32, 32, 45)
    r1, r2 = np.random.default_rng(s1), np.random.default_rng(s2)
    src = CameraPose("s", Rotation.random(random_state=r1).as_quat(scalar_first=True), r1.normal(size=3), k)
    tgt = CameraPose("t", Rotation.random(random_state=r2).as_quat(scalar_first=True), r2.normal(size=3), k)
    T = align_pose_pair(src, tgt)
    moved = sim3_apply_pose(T, src)
    assert T.scale == 1.0
    np.testing.assert_allclose(moved.center, tgt.center, atol=1e-9)
    np.testing.assert_allclose(moved.forward, tgt.forward, atol=1e-9)
    T2 = align_pose_pair(src, tgt)
    np.testing.assert_array_equal(T.as_matrix(), T2.as_matrix())
    # roll tie-break: the aligned up vector is the closest possible one
    u_best = tgt.up - np.dot(tgt.up, tgt.forward) * tgt.forward
    assert np.dot(moved.up, tgt.up) >= np.linalg.norm(u_best) - 1e-9


def test_align_antiparallel_forward_is_deterministic(intr64):
    src = look_at([0, 0, 0], intr64, "s", target=[0, 0, 1], world_up=[0, 1, 0])
    tgt = look_at([0, 0, 0], intr64, "t", target=[0, 0, -1], world_up=[0, 1, 0])
    T = align_pose_pair(src, tgt)
    np.testing.assert_allclose(sim3_apply_pose(T, src).forward, tgt.forward, atol=1e-9)
    np.testing.assert_array_equal(T.as_matrix(), align_pose_pair(src, tgt).as_matrix())


def test_align_rejects_non_unit(intr64, front_camera):
    bad = CameraPose("b", [2.0, 0, 0, 0], [0, 0, 0], intr64)
    with pytest.raises(DegenerateAlignment):
        align_pose_pair(bad, front_camera)


# -- pair_scale ------------------------------------------------------------

def _at(intr, c, id="p"):
    return CameraPose(id, [1, 0, 0, 0], c, intr)


def test_pair_scale_examples(intr64):
    a, b = _at(intr64, [0, 0, 0]), _at(intr64, [1, 0, 0])
    c, d = _at(intr64, [0, 0, 0]), _at(intr64, [0, 2, 0])
    assert pair_scale(a, b, c, d) == 2.0
    assert pair_scale(a, b, a, b) == 1.0


def test_pair_scale_gauge(ring):
    G = Sim3(0.37, _rot_z(30), [0.2, 0, 1])
    moved = sim3_apply_pose_set(G, ring)
    i, j = ring.ids[:2]
    assert pair_scale(moved[i], moved[j], ring[i], ring[j]) == pytest.approx(1 / 0.37, rel=1e-12)


def test_pair_scale_invariance(ring):
    i, j = ring.ids[2:4]
    base = pair_scale(ring[i], ring[j], ring[i], ring[j])
    rigid = sim3_apply_pose_set(Sim3(1.0, _rot_z(77), [3, -1, 2]), ring)
    assert pair_scale(rigid[i], rigid[j], ring[i], ring[j]) == pytest.approx(base, rel=1e-12)
    k = 4.0
    scaled = sim3_apply_pose_set(Sim3(k), ring)
    assert pair_scale(scaled[i], scaled[j], ring[i], ring[j]) == pytest.approx(base / k, rel=1e-12)


def test_pair_scale_degenerate(intr64):
    a = _at(intr64, [0, 0, 0])
    with pytest.raises(DegeneratePair):
        pair_scale(a, a, a, _at(intr64, [1, 0, 0]))


# -- containers and IO -----------------------------------------------------

def test_pose_set_rejects_duplicates(intr64):
    with pytest.raises(PreconditionError):
        PoseSet("d", (_at(intr64, [0, 0, 0], "x"), _at(intr64, [1, 0, 0], "x")))


def test_pose_set_rejects_empty():
    with pytest.raises(PreconditionError):
        PoseSet("e", ())


def test_intrinsics_principal_point_checked():
    with pytest.raises(PreconditionError):
        CameraIntrinsics(10, 10, 50, 5, 32, 32)


def test_pose_file_round_trip(ring, tmp_path):
    write_pose_set(ring, tmp_path / "p.json")
    back = read_pose_set(tmp_path / "p.json")
    assert back.ids == ring.ids and back.label == ring.label
    np.testing.assert_array_equal(back.centers, ring.centers)
    np.testing.assert_array_equal(back.rotations, ring.rotations)


def test_pose_file_rejects_non_unit(ring, tmp_path):
    write_pose_set(ring, tmp_path / "p.json")
    data = json.loads((tmp_path / "p.json").read_text())
    data["cameras"][0]["q"] = [2, 0, 0, 0]
    (tmp_path / "p.json").write_text(json.dumps(data))
    with pytest.raises(PreconditionError):
        read_pose_set(tmp_path / "p.json")
