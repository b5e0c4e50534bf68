"""Synthetic multi-pose datasets with full ground truth.

The generator places an asymmetric multi-blob splat object at the origin,
moves it rigidly for every auxiliary pose, photographs each pose from a
hemisphere of cameras, and writes every auxiliary camera file in its own
random similarity gauge (what an independent SfM run would produce).

It also stands in for the two external predictors used by selection and
global registration: the two-view geometric-verification oracle
(``gt/oracle.json``) and the multi-view mixed-pose predictor
(:class:`MixedPosePredictor`).
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import PreconditionError
from .geometry import (
    CameraIntrinsics, CameraPose, PoseSet, Sim3, _least_aligned_axis, angle_between,
    matrix_to_quat, pose_set_from_dict, read_pose_set, sim3_apply_pose, sim3_apply_pose_set,
    sim3_compose, sim3_invert, write_pose_set,
)
from .splatrender import (
    SplatCloud, mask_iou, read_pgm, read_ppm, read_splats, render_mask, render_occupancy,
    render_rgb, threshold_mask, write_pgm, write_ppm, write_splats,
)


@dataclass
class SynthConfig:
    seed: int = 0
    n_splats: int = 2000
    views_per_pose: int = 150
    n_poses: int = 2
    camera_radius: float = 3.0
    fov_deg: float = 45.0
    resolution: int = 128
    # object motion between captures: tilt about a horizontal axis, free yaw
    tilt_range_deg: tuple = (45.0, 75.0)
    max_object_shift: float = 0.05
    # per-capture SfM gauge
    gauge_scale_range: tuple = (0.5, 2.0)
    gauge_max_translation: float = 0.5  # fraction of camera-set diameter
    identity_gauge: bool = False
    identity_motion: bool = False
    descriptor_dim: int = 64
    sigma_desc: float = 0.02
    sigma_angle: float = 2.0
    # mixed-pose predictor error model (degrees)
    predictor_base_deg: float = 1.0
    predictor_spread_ref_deg: float = 25.0
    predictor_ref_views: int = 30
    predictor_center_noise: float = 0.01  # fraction of camera radius per degree
    # colored patch on the object's underside (completion fixture)
    underside_patch: bool = False

    def __post_init__(self):
        if self.n_poses < 2:
            raise PreconditionError("n_poses must be at least 2")
        for f in ("n_splats", "views_per_pose", "camera_radius", "fov_deg", "resolution", "descriptor_dim"):
            if not getattr(self, f) > 0:
                raise PreconditionError(f"{f} must be positive")
        self.tilt_range_deg = tuple(self.tilt_range_deg)
        self.gauge_scale_range = tuple(self.gauge_scale_range)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def noiseless(self):
        """Copy with all observation noise switched off."""
        kw = asdict(self)
        kw.update(sigma_desc=0.0, sigma_angle=0.0)
        return SynthConfig(**kw)

    @property
    def intrinsics(self):
        return CameraIntrinsics.from_fov(self.resolution, self.resolution, self.fov_deg)


# -- object -----------------------------------------------------------------

_PALETTE = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.55, 0.85], [0.95, 0.80, 0.20],
    [0.30, 0.75, 0.35], [0.70, 0.40, 0.80], [0.90, 0.55, 0.25],
])
PATCH_COLOR = (0.1, 0.9, 0.9)


def _principal_silhouettes(cloud, radius=3.0, res=64):
    K = CameraIntrinsics.from_fov(res, res, 50.0)
    masks = []
    for d in ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]):
        c = np.array(d, float) * radius
        masks.append(render_mask(cloud, look_at(c, K, "probe")))
    return masks


def max_principal_iou(cloud):
    m = _principal_silhouettes(cloud)
    return max(mask_iou(m[i], m[j]) for i in range(4) for j in range(i + 1, 4))


def _blob_cloud(rng, n_splats):
    n_blobs = int(rng.integers(4, 7))
    centers = rng.uniform(-0.45, 0.45, size=(n_blobs, 3))
    centers[0] = 0.0
    radii = rng.uniform(0.15, 0.4, size=(n_blobs, 3))
    radii[0] = rng.uniform(0.35, 0.5, size=3)
    # surface-area weights for the splat budget
    area = 4 * np.pi * ((radii[:, 0] * radii[:, 1]) ** 1.6 + (radii[:, 0] * radii[:, 2]) ** 1.6
                        + (radii[:, 1] * radii[:, 2]) ** 1.6) ** (1 / 1.6) / 3 ** (1 / 1.6)
    counts = np.floor(area / area.sum() * n_splats).astype(int)
    counts[: n_splats - counts.sum()] += 1
    colors = _PALETTE[rng.permutation(len(_PALETTE))[:n_blobs]]
    freq = rng.uniform(6.0, 12.0, size=(n_blobs, 3))
    pos, col, sig = [], [], []
    for b in range(n_blobs):
        d = rng.normal(size=(counts[b], 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        p = centers[b] + d * radii[b]
        stripes = 0.5 + 0.5 * np.sin(p @ freq[b])
        c = colors[b] * (0.55 + 0.45 * stripes[:, None])
        pos.append(p)
        col.append(c)
        spacing = math.sqrt(area[b] / max(counts[b], 1))
        sig.append(spacing * 0.55 * rng.uniform(0.85, 1.15, size=counts[b]))
    pos = np.concatenate(pos)
    pos -= 0.5 * (pos.max(axis=0) + pos.min(axis=0))
    sig = np.concatenate(sig)
    scale = 0.9 / np.max(np.linalg.norm(pos, axis=1) + 3 * sig)
    return pos * scale, sig * scale, np.clip(np.concatenate(col), 0, 1)


def gen_object(seed, n_splats, max_iou=0.95, max_attempts=20):
    """Asymmetric multi-blob splat object inside the unit sphere.

    Candidates whose four principal side silhouettes are too alike are
    rejected and regenerated from the next sub-seed.
    """
    if n_splats < 1:
        raise PreconditionError("n_splats must be at least 1")
    if n_splats == 1:
        rng = np.random.default_rng(seed)
        p = rng.uniform(-0.3, 0.3, size=(1, 3))
        return SplatCloud(p, [0.1], rng.uniform(0.2, 0.9, size=(1, 3)), [0.9])
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        pos, sig, col = _blob_cloud(rng, n_splats)
        cloud = SplatCloud(pos, sig, col, np.full(n_splats, 0.9))
        if n_splats < 50 or max_principal_iou(cloud) <= max_iou:
            return cloud
    raise PreconditionError(f"could not generate an asymmetric object for seed {seed}")


def add_underside_patch(cloud, n_patch=120, color=PATCH_COLOR):
    """Recolor the lowest splats; returns (cloud, patch_index)."""
    z = cloud.positions[:, 2]
    idx = np.sort(np.argsort(z, kind="stable")[:n_patch])
    colors = np.array(cloud.colors)
    colors[idx] = color
    return cloud.replace(colors=colors), idx


# -- cameras ----------------------------------------------------------------

def look_at(center, intrinsics, id, target=(0.0, 0.0, 0.0), world_up=(0.0, 0.0, 1.0)):
    """Camera at ``center`` looking at ``target`` with up taken from the
    projection of ``world_up`` onto the image plane."""
    center = np.asarray(center, float)
    f = np.asarray(target, float) - center
    f /= np.linalg.norm(f)
    up = np.asarray(world_up, float)
    up = up - np.dot(up, f) * f
    if np.linalg.norm(up) < 1e-9:
        up = np.cross(f, _least_aligned_axis(f))
    up /= np.linalg.norm(up)
    right = np.cross(-up, f)
    R = np.stack([right, -up, f], axis=1)
    return CameraPose.from_matrix(id, R, center, intrinsics)


def sample_hemisphere_cameras(n, radius, intrinsics, seed, pose_index=0, azimuth=None):
    """Fibonacci spiral over the upper hemisphere, first camera at the pole."""
    if n < 1:
        raise PreconditionError("need at least one camera")
    if azimuth is None:
        azimuth = np.random.default_rng(seed).uniform(0, 2 * np.pi)
    golden = np.pi * (3.0 - math.sqrt(5.0))
    cams = []
    for i in range(n):
        z = 1.0 - i / n
        rho = math.sqrt(max(0.0, 1.0 - z * z))
        phi = azimuth + golden * i
        c = radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
        cams.append(look_at(c, intrinsics, f"pose{pose_index}_{i:04d}"))
    return PoseSet(f"pose{pose_index}", tuple(cams))


# -- descriptors and oracles ------------------------------------------------

def descriptor_basis(dim, seed):
    if dim < 30:
        raise PreconditionError("descriptor dimension must be at least 30")
    rng = np.random.default_rng([seed, 7])
    Q, _ = np.linalg.qr(rng.normal(size=(dim, 30)))
    return Q


def fabricate_descriptor(direction, basis, rng=None, sigma=0.0):
    """Unit descriptor whose noiseless cosine similarity is (c + c^3) / 2 for
    view directions at angle ``acos(c)``."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    feat = np.concatenate([d, np.einsum("i,j,k->ijk", d, d, d).ravel()])
    x = basis @ feat
    x /= np.linalg.norm(x)
    if sigma > 0:
        x = x + rng.normal(scale=sigma, size=x.shape)
        x /= np.linalg.norm(x)
    return x


def view_direction(pose):
    """Unit direction from the object center to the camera."""
    return pose.center / np.linalg.norm(pose.center)


def relative_gaps(a, b):
    """(forward gap, up gap) in degrees between two cameras."""
    return (math.degrees(angle_between(a.forward, b.forward)),
            math.degrees(angle_between(a.up, b.up)))


@dataclass
class MixedPosePredictor:
    """Stand-in for a multi-view pose predictor run on the mixed-pose images.

    Returns the true main-frame cameras of the requested ids, perturbed per
    camera and expressed in a random similarity frame. The per-camera error
    grows with the angular spread of the object-relative viewing directions
    and shrinks with the number of jointly predicted views.
    """

    gt_cameras: dict
    base_deg: float = 1.0
    spread_ref_deg: float = 25.0
    ref_views: int = 30
    center_noise: float = 0.01
    seed: int = 0

    def noise_deg(self, ids):
        dirs = np.array([view_direction(self.gt_cameras[i]) for i in ids])
        mean = dirs.mean(axis=0)
        mean /= np.linalg.norm(mean)
        ang = np.degrees(np.arccos(np.clip(dirs @ mean, -1, 1)))
        spread = float(np.sqrt(np.mean(ang ** 2)))
        return self.base_deg * (1.0 + (spread / self.spread_ref_deg) ** 4) * math.sqrt(
            self.ref_views / len(ids))

    def predict(self, ids, label="mixed"):
        ids = list(ids)
        key = zlib.crc32("|".join(ids).encode())
        rng = np.random.default_rng([self.seed, key])
        sigma = math.radians(self.noise_deg(ids))
        radius = np.mean([np.linalg.norm(self.gt_cameras[i].center) for i in ids])
        gauge = Sim3.random(rng, (0.5, 2.0), 2.0)
        out = []
        for i in ids:
            p = self.gt_cameras[i]
            dR = Rotation.from_rotvec(rng.normal(scale=sigma, size=3)).as_matrix()
            dc = rng.normal(scale=math.degrees(sigma) * self.center_noise * radius, size=3)
            noisy = CameraPose.from_matrix(i, dR @ p.R, p.center + dc, p.intrinsics)
            out.append(sim3_apply_pose(gauge, noisy))
        return PoseSet(label, tuple(out))


# -- dataset ----------------------------------------------------------------

@dataclass
class PoseData:
    cameras: PoseSet
    images: dict
    masks: dict
    descriptors: dict


@dataclass
class MultiPoseDataset:
    root: Path
    config: SynthConfig
    poses: list
    model: SplatCloud
    gt_clouds: list
    object_motion: list
    gauges: list
    oracle: dict
    gt_main_frame: dict = field(default_factory=dict)

    @property
    def n_poses(self):
        return len(self.poses)

    def aux_to_main(self, k):
        """Ground-truth transform taking pose-``k`` camera files into the main frame."""
        return sim3_compose(sim3_invert(self.object_motion[k]), sim3_invert(self.gauges[k]))

    def gt_pose_set(self, k):
        return PoseSet(f"gt{k}", tuple(self.gt_main_frame[i] for i in self.poses[k].cameras.ids))

    def predictor(self, seed=None):
        c = self.config
        return MixedPosePredictor(
            self.gt_main_frame, c.predictor_base_deg, c.predictor_spread_ref_deg,
            c.predictor_ref_views, c.predictor_center_noise, c.seed if seed is None else seed,
        )


def _random_motion(rng, cfg):
    if cfg.identity_motion:
        return Sim3.identity()
    yaw1, yaw2 = rng.uniform(0, 2 * np.pi, size=2)
    tilt = math.radians(rng.uniform(*cfg.tilt_range_deg))
    R = (Rotation.from_rotvec([0, 0, yaw2]) * Rotation.from_rotvec([tilt, 0, 0])
         * Rotation.from_rotvec([0, 0, yaw1])).as_matrix()
    shift = np.append(rng.uniform(-1, 1, size=2) * cfg.max_object_shift, 0.0)
    return Sim3.from_matrix(1.0, R, shift)


def _random_gauge(rng, cfg, diameter):
    if cfg.identity_gauge:
        return Sim3.identity()
    return Sim3.random(rng, cfg.gauge_scale_range, cfg.gauge_max_translation * diameter)


def make_dataset(cfg, out_dir=None):
    """Generate (and optionally write) a multi-pose dataset."""
    rng = np.random.default_rng(cfg.seed)
    cloud = gen_object(cfg.seed, cfg.n_splats)
    # the main-pose model never saw the underside, so it keeps the body color
    model = cloud
    if cfg.underside_patch:
        cloud, patch_idx = add_underside_patch(cloud)
    K = cfg.intrinsics
    basis = descriptor_basis(cfg.descriptor_dim, cfg.seed)
    poses, gt_clouds, motions, gauges = [], [], [], []
    gt_main = {}
    for k in range(cfg.n_poses):
        motion = Sim3.identity() if k == 0 else _random_motion(rng, cfg)
        world_cloud = cloud.transformed(motion, frame=f"pose{k}")
        world_cams = sample_hemisphere_cameras(
            cfg.views_per_pose, cfg.camera_radius, K, cfg.seed, pose_index=k,
            azimuth=rng.uniform(0, 2 * np.pi))
        gauge = Sim3.identity() if k == 0 else _random_gauge(rng, cfg, world_cams.diameter())
        to_main = sim3_invert(motion)
        images, masks, descs = {}, {}, {}
        for cam in world_cams:
            images[cam.id] = render_rgb(world_cloud, cam)
            masks[cam.id] = threshold_mask(render_occupancy(world_cloud, cam))
            main_cam = sim3_apply_pose(to_main, cam)
            gt_main[cam.id] = main_cam
            descs[cam.id] = fabricate_descriptor(view_direction(main_cam), basis, rng, cfg.sigma_desc)
        poses.append(PoseData(sim3_apply_pose_set(gauge, world_cams, f"pose{k}"), images, masks, descs))
        gt_clouds.append(world_cloud)
        motions.append(motion)
        gauges.append(gauge)
    oracle = {}
    for k in range(1, cfg.n_poses):
        for j in range(k):
            for a in poses[j].cameras.ids:
                for b in poses[k].cameras.ids:
                    fwd, up = relative_gaps(gt_main[a], gt_main[b])
                    if cfg.sigma_angle > 0:
                        fwd, up = fwd + rng.normal(scale=cfg.sigma_angle), up + rng.normal(scale=cfg.sigma_angle)
                    oracle[f"{a}|{b}"] = (float(np.clip(fwd, 0, 180)), float(np.clip(up, 0, 180)))
    ds = MultiPoseDataset(Path(out_dir) if out_dir else None, cfg, poses, model, gt_clouds,
                          motions, gauges, oracle, gt_main)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds, out_dir):
    out = Path(out_dir)
    try:
        (out / "gt").mkdir(parents=True, exist_ok=True)
        for k, pd in enumerate(ds.poses):
            d = out / f"pose{k}"
            (d / "images").mkdir(parents=True, exist_ok=True)
            (d / "masks").mkdir(parents=True, exist_ok=True)
            write_pose_set(pd.cameras, d / "cameras.json")
            for i in pd.cameras.ids:
                write_ppm(pd.images[i], d / "images" / f"{i}.ppm")
                write_pgm(pd.masks[i], d / "masks" / f"{i}.pgm")
            (d / "descriptors.json").write_text(
                json.dumps({i: v.tolist() for i, v in pd.descriptors.items()}), encoding="utf-8")
            write_splats(ds.gt_clouds[k], out / "gt" / f"splats_pose{k}.json")
        write_splats(ds.model, out / "pose0" / "model.json")
        gt = {
            "poses": [
                {"object_motion": ds.object_motion[k].to_dict(), "gauge": ds.gauges[k].to_dict(),
                 "to_main": ds.aux_to_main(k).to_dict()}
                for k in range(ds.n_poses)
            ],
            "main_frame_cameras": {
                "label": "gt",
                "cameras": [_pose_json(p) for p in ds.gt_main_frame.values()],
            },
        }
        (out / "gt" / "transforms.json").write_text(json.dumps(gt, indent=1), encoding="utf-8")
        (out / "gt" / "oracle.json").write_text(json.dumps(
            {k: {"fwd_deg": f, "up_deg": u} for k, (f, u) in ds.oracle.items()}), encoding="utf-8")
        (out / "synth.json").write_text(json.dumps(asdict(ds.config), indent=1), encoding="utf-8")
    except OSError as exc:
        raise PreconditionError(f"cannot write dataset to {out}: {exc}") from exc


def _pose_json(p):
    from .geometry import pose_to_dict
    return pose_to_dict(p)


def read_oracle(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: (float(v["fwd_deg"]), float(v["up_deg"])) for k, v in data.items()}


def read_descriptors(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: np.asarray(v, float) for k, v in data.items()}


def load_dataset(root):
    """Read a dataset directory written by :func:`make_dataset`."""
    root = Path(root)
    if not (root / "pose0" / "cameras.json").exists():
        raise PreconditionError(f"{root} does not look like a dataset (missing pose0/cameras.json)")
    cfg_path = root / "synth.json"
    cfg = SynthConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else None
    poses = []
    k = 0
    while (root / f"pose{k}" / "cameras.json").exists():
        d = root / f"pose{k}"
        cams = read_pose_set(d / "cameras.json")
        images = {i: read_ppm(d / "images" / f"{i}.ppm") for i in cams.ids}
        masks = {i: read_pgm(d / "masks" / f"{i}.pgm") for i in cams.ids}
        descs = read_descriptors(d / "descriptors.json")
        poses.append(PoseData(cams, images, masks, descs))
        k += 1
    model = read_splats(root / "pose0" / "model.json")
    gt_clouds, motions, gauges, oracle, gt_main = [], [], [], {}, {}
    gt_dir = root / "gt"
    if (gt_dir / "transforms.json").exists():
        gt = json.loads((gt_dir / "transforms.json").read_text())
        motions = [Sim3.from_dict(p["object_motion"]) for p in gt["poses"]]
        gauges = [Sim3.from_dict(p["gauge"]) for p in gt["poses"]]
        gt_main = {p.id: p for p in pose_set_from_dict(gt["main_frame_cameras"])}
        gt_clouds = [read_splats(gt_dir / f"splats_pose{j}.json", f"pose{j}") for j in range(len(poses))]
    if (gt_dir / "oracle.json").exists():
        oracle = read_oracle(gt_dir / "oracle.json")
    return MultiPoseDataset(root, cfg, poses, model, gt_clouds, motions, gauges, oracle, gt_main)
