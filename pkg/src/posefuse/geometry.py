"""Camera poses and similarity transforms.

Conventions: poses are stored camera-to-world. A camera looks along +Z of
its own frame and image-up is -Y, so in world coordinates the forward
vector is the third column of R and the up vector is the negated second
column. Quaternions are (w, x, y, z).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateAlignment, DegeneratePair, PreconditionError

UNIT_TOL = 1e-9


def quat_to_matrix(q):
    return Rotation.from_quat(np.asarray(q, dtype=float), scalar_first=True).as_matrix()


def matrix_to_quat(R):
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat(scalar_first=True)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    """Hamilton product ``a * b`` (apply ``b`` first), renormalized."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    q = np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])
    return q / np.linalg.norm(q)


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def rotvec_to_quat(v):
    return Rotation.from_rotvec(np.asarray(v, dtype=float)).as_quat(scalar_first=True)


def rotation_angle(R):
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def angle_between(a, b):
    """Angle (radians) between two vectors; robust near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def _as_vec3(v, name):
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} must be a finite 3-vector, got {v!r}")
    arr.setflags(write=False)
    return arr


def _as_quat(q, name):
    arr = np.array(q, dtype=float).reshape(-1)
    if arr.shape != (4,) or not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} must be a finite quaternion [w,x,y,z], got {q!r}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise PreconditionError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PreconditionError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        """Square-pixel intrinsics with horizontal field of view ``fov_deg``."""
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def resized(self, width, height):
        """Intrinsics for the same camera rendered at another resolution.

        Pixel centers sit at integer coordinates, so the principal point maps
        through the pixel-center affine ``x' = (x + 0.5) * k - 0.5``.
        """
        kx = width / self.width
        ky = height / self.height
        return CameraIntrinsics(
            self.fx * kx, self.fy * ky,
            (self.cx + 0.5) * kx - 0.5, (self.cy + 0.5) * ky - 0.5,
            int(width), int(height),
        )

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)


@dataclass(frozen=True, eq=False)
class CameraPose:
    id: str
    rotation: np.ndarray
    center: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_quat(self.rotation, "rotation"))
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))

    @classmethod
    def from_matrix(cls, id, R, center, intrinsics):
        return cls(id, matrix_to_quat(R), center, intrinsics)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def forward(self):
        return self.R[:, 2]

    @property
    def up(self):
        return -self.R[:, 1]

    @property
    def right(self):
        return self.R[:, 0]

    def is_unit(self, tol=UNIT_TOL):
        return abs(np.linalg.norm(self.rotation) - 1.0) <= tol

    def replace(self, **changes):
        kw = dict(id=self.id, rotation=self.rotation, center=self.center, intrinsics=self.intrinsics)
        kw.update(changes)
        return CameraPose(**kw)

    def __repr__(self):
        return f"CameraPose(id={self.id!r}, center={np.round(self.center, 4).tolist()})"


@dataclass(frozen=True, eq=False)
class PoseSet:
    label: str
    poses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise PreconditionError(f"pose set {self.label!r} is empty")
        ids = [p.id for p in poses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PreconditionError(f"pose set {self.label!r} has duplicate ids {dup[:5]}")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "_index", {i: k for k, i in enumerate(ids)})

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __contains__(self, pose_id):
        return pose_id in self._index

    def __getitem__(self, pose_id):
        return self.poses[self._index[pose_id]]

    @property
    def ids(self):
        return [p.id for p in self.poses]

    def subset(self, ids, label=None):
        return PoseSet(label or self.label, tuple(self[i] for i in ids))

    def relabel(self, label):
        return PoseSet(label, self.poses)

    @property
    def centers(self):
        return np.array([p.center for p in self.poses])

    @property
    def rotations(self):
        return Rotation.from_quat(
            np.array([p.rotation for p in self.poses]), scalar_first=True
        ).as_matrix()

    def diameter(self):
        return point_set_diameter(self.centers)

    def __repr__(self):
        return f"PoseSet(label={self.label!r}, n={len(self)})"


def point_set_diameter(points):
    """Largest pairwise distance of a point set."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform acting as ``p -> s * R @ p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = float(self.scale)
        if not (s > 0 and math.isfinite(s)):
            raise PreconditionError(f"Sim3 scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _as_quat(self.rotation, "rotation"))
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, scale, R, t):
        return cls(scale, matrix_to_quat(R), t)

    @classmethod
    def random(cls, rng, scale_range=(0.5, 2.0), max_translation=1.0):
        rng = np.random.default_rng(rng)
        q = Rotation.random(random_state=rng).as_quat(scalar_first=True)
        lo, hi = scale_range
        s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        d = rng.normal(size=3)
        t = d / np.linalg.norm(d) * rng.uniform(0, max_translation)
        return cls(s, q, t)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.R.T + self.translation

    def __matmul__(self, other):
        return sim3_compose(self, other)

    def inverse(self):
        return sim3_invert(self)

    def angle(self):
        """Rotation angle in radians."""
        return rotation_angle(self.R)

    def to_dict(self):
        return {"s": self.scale, "q": self.rotation.tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["s"], d["q"], d["t"])

    def __repr__(self):
        return (
            f"Sim3(s={self.scale:.6g}, angle={math.degrees(self.angle()):.4g}deg, "
            f"t={np.round(self.translation, 5).tolist()})"
        )


def sim3_compose(a, b):
    """Return ``a o b``, i.e. the transform applying ``b`` first."""
    R_a = a.R
    return Sim3(
        a.scale * b.scale,
        quat_multiply(a.rotation, b.rotation),
        a.scale * R_a @ b.translation + a.translation,
    )


def sim3_invert(a):
    R_inv = a.R.T
    s_inv = 1.0 / a.scale
    return Sim3(s_inv, quat_conjugate(a.rotation) / np.linalg.norm(a.rotation), -s_inv * R_inv @ a.translation)


def sim3_apply_pose(T, p):
    """Move a camera by ``T``: the center follows the full similarity, the
    orientation only the rotation part."""
    return p.replace(
        rotation=quat_multiply(T.rotation, p.rotation),
        center=T.scale * T.R @ p.center + T.translation,
    )


def sim3_apply_pose_set(T, poses, label=None):
    return PoseSet(label or poses.label, tuple(sim3_apply_pose(T, p) for p in poses))


def _least_aligned_axis(v):
    e = np.zeros(3)
    e[int(np.argmin(np.abs(v)))] = 1.0
    return e


def _rotation_between(a, b):
    """Minimal rotation matrix taking unit vector ``a`` onto unit vector ``b``."""
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    axis = np.cross(a, b)
    n = np.linalg.norm(axis)
    if n < UNIT_TOL:
        if c > 0:
            return np.eye(3)
        axis = np.cross(a, _least_aligned_axis(a))
        axis /= np.linalg.norm(axis)
        return Rotation.from_rotvec(np.pi * axis).as_matrix()
    return Rotation.from_rotvec(axis / n * math.atan2(n, c)).as_matrix()


def align_pose_pair(src, tgt):
    """Rigid transform (s=1) moving camera ``src`` onto camera ``tgt``.

    Position and viewing direction are matched exactly; the remaining roll
    about the forward axis is chosen to bring the up vectors together.
    """
    for name, p in (("src", src), ("tgt", tgt)):
        if not p.is_unit():
            raise DegenerateAlignment(f"{name} pose {p.id!r} has a non-unit quaternion")
    f_src, f_tgt = src.forward, tgt.forward
    R1 = _rotation_between(f_src, f_tgt)
    u = R1 @ src.up
    u_t = tgt.up
    roll = math.atan2(np.dot(f_tgt, np.cross(u, u_t)), np.dot(u, u_t))
    R = Rotation.from_rotvec(roll * f_tgt).as_matrix() @ R1
    return Sim3(1.0, matrix_to_quat(R), tgt.center - R @ src.center)


def pair_scale(src1, src2, tgt1, tgt2, eps=None):
    """Ratio of target to source camera-center distance.

    ``eps`` defaults to 1e-6 of the target distance. Raises DegeneratePair
    when either distance is at or below it.
    """
    d_src = float(np.linalg.norm(src1.center - src2.center))
    d_tgt = float(np.linalg.norm(tgt1.center - tgt2.center))
    if eps is None:
        eps = max(1e-6 * d_tgt, 1e-300)
    if d_src <= eps or d_tgt <= eps:
        raise DegeneratePair(
            f"degenerate pair ({src1.id}, {src2.id}): source distance {d_src:.3g}, target {d_tgt:.3g}"
        )
    return d_tgt / d_src


# -- pose file IO -----------------------------------------------------------

def pose_to_dict(p):
    k = p.intrinsics
    return {
        "id": p.id,
        "q": p.rotation.tolist(),
        "c": p.center.tolist(),
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "w": k.width, "h": k.height,
    }


def pose_from_dict(d):
    k = CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["w"]), int(d["h"]))
    p = CameraPose(str(d["id"]), d["q"], d["c"], k)
    if not p.is_unit(1e-6):
        raise PreconditionError(f"camera {p.id!r}: quaternion is not unit norm")
    return p


def pose_set_to_dict(ps):
    return {"label": ps.label, "cameras": [pose_to_dict(p) for p in ps]}


def pose_set_from_dict(d):
    return PoseSet(d["label"], tuple(pose_from_dict(c) for c in d["cameras"]))


def write_pose_set(ps, path):
    Path(path).write_text(json.dumps(pose_set_to_dict(ps), indent=1), encoding="utf-8")


def read_pose_set(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"cannot read pose file {path}: {exc}") from exc
    return pose_set_from_dict(data)
