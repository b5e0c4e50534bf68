"""Software rasterizer for isotropic Gaussian splats.

Every render path (single view, batched consensus scoring, batched losses,
and the photometric backward pass) goes through the same projection and
footprint kernels, so a silhouette obtained from the batched scorer is
bit-identical to ``threshold_mask(render_occupancy(...))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import DimensionMismatch, PreconditionError

KAPPA = 3.0
Z_NEAR = 1e-3
DEFAULT_TAU = 0.5
# photometric residuals this small are rounding noise; they get no subgradient
RESIDUAL_DEADZONE = 1e-9


# -- data types -------------------------------------------------------------

@dataclass(frozen=True)
class Splat:
    position: tuple
    sigma: float
    color: tuple
    opacity: float


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SplatCloud:
    positions: np.ndarray
    sigmas: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    frame: str = "main"

    def __post_init__(self):
        pos = _readonly(self.positions).reshape(-1, 3)
        n = len(pos)
        sig = _readonly(self.sigmas).reshape(n)
        col = _readonly(self.colors).reshape(n, 3)
        op = _readonly(self.opacities).reshape(n)
        if not np.all(np.isfinite(pos)):
            raise PreconditionError("splat positions must be finite")
        if np.any(~(sig > 0)):
            raise PreconditionError("splat radii must be positive")
        if np.any(~((op > 0) & (op <= 1))):
            raise PreconditionError("splat opacity must lie in (0, 1]")
        if np.any(~((col >= 0) & (col <= 1))):
            raise PreconditionError("splat colors must lie in [0, 1]")
        for name, val in (("positions", pos), ("sigmas", sig), ("colors", col), ("opacities", op)):
            object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_splats(cls, splats, frame="main"):
        splats = list(splats)
        return cls(
            [s.position for s in splats], [s.sigma for s in splats],
            [s.color for s in splats], [s.opacity for s in splats], frame,
        )

    @property
    def splats(self):
        return [
            Splat(tuple(p), float(s), tuple(c), float(o))
            for p, s, c, o in zip(self.positions, self.sigmas, self.colors, self.opacities)
        ]

    def replace(self, **changes):
        kw = dict(positions=self.positions, sigmas=self.sigmas, colors=self.colors,
                  opacities=self.opacities, frame=self.frame)
        kw.update(changes)
        return SplatCloud(**kw)

    def transformed(self, T, frame=None):
        """Cloud moved by similarity ``T``; radii scale with ``T.scale``."""
        return self.replace(positions=T.apply(self.positions), sigmas=self.sigmas * T.scale,
                            frame=frame or self.frame)

    def centroid(self):
        return self.positions.mean(axis=0)

    def bitwise_equal(self, other):
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("positions", "sigmas", "colors", "opacities")
        )

    def to_list(self):
        return [
            {"p": p.tolist(), "sigma": float(s), "rgb": c.tolist(), "alpha": float(o)}
            for p, s, c, o in zip(self.positions, self.sigmas, self.colors, self.opacities)
        ]

    @classmethod
    def from_list(cls, items, frame="main"):
        if not items:
            raise PreconditionError("splat file is empty")
        return cls(
            [d["p"] for d in items], [d["sigma"] for d in items],
            [d["rgb"] for d in items], [d["alpha"] for d in items], frame,
        )


def write_splats(cloud, path):
    Path(path).write_text(json.dumps(cloud.to_list()), encoding="utf-8")


def read_splats(path, frame="main"):
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"cannot read splat file {path}: {exc}") from exc
    return SplatCloud.from_list(items, frame)


@dataclass(frozen=True, eq=False)
class SoftOccupancy:
    values: np.ndarray
    empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class SilhouetteMask:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", _readonly(self.bits, bool))

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    def count(self):
        return int(self.bits.sum())

    @classmethod
    def full(cls, width, height, value=True):
        return cls(np.full((height, width), value, dtype=bool))


@dataclass(frozen=True, eq=False)
class RgbImage:
    pixels: np.ndarray
    empty: bool = field(default=False, compare=False)

    def __post_init__(self):
        px = _readonly(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise PreconditionError(f"RGB image must be HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @classmethod
    def constant(cls, width, height, rgb):
        return cls(np.broadcast_to(np.asarray(rgb, dtype=float), (height, width, 3)))


# -- kernels ----------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _project(positions, sigmas, R, c, intr, z_near, kappa):
    """Screen center, depth, cutoff radius and pixel std-dev per splat."""
    n = positions.shape[0]
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    u = np.empty(n)
    v = np.empty(n)
    z = np.empty(n)
    rad = np.empty(n)
    sd = np.empty(n)
    for i in range(n):
        d0 = positions[i, 0] - c[0]
        d1 = positions[i, 1] - c[1]
        d2 = positions[i, 2] - c[2]
        X = R[0, 0] * d0 + R[1, 0] * d1 + R[2, 0] * d2
        Y = R[0, 1] * d0 + R[1, 1] * d1 + R[2, 1] * d2
        Z = R[0, 2] * d0 + R[1, 2] * d1 + R[2, 2] * d2
        z[i] = Z
        if Z > z_near:
            u[i] = fx * X / Z + cx
            v[i] = fy * Y / Z + cy
            rad[i] = fx * sigmas[i] * kappa / Z
            sd[i] = rad[i] / kappa
        else:
            u[i] = 0.0
            v[i] = 0.0
            rad[i] = -1.0
            sd[i] = 1.0
    return u, v, z, rad, sd


@numba.njit(cache=True, nogil=True, inline="always")
def _footprint(u, v, r, W, H):
    x0 = max(int(math.ceil(u - r)), 0)
    x1 = min(int(math.floor(u + r)), W - 1)
    y0 = max(int(math.ceil(v - r)), 0)
    y1 = min(int(math.floor(v + r)), H - 1)
    return x0, x1, y0, y1


@numba.njit(cache=True, nogil=True)
def _falloff(u, sd, x0, x1, buf):
    """1-D Gaussian weights exp(-(x-u)^2 / (2 sd^2)) for x in [x0, x1].

    Uses the ratio recurrence g(x+1) = g(x) * r(x), r(x+1) = r(x) * q,
    so only three exponentials are evaluated per axis.
    """
    inv = 1.0 / (2.0 * sd * sd)
    dx = x0 - u
    g = math.exp(-dx * dx * inv)
    r = math.exp(-(2.0 * dx + 1.0) * inv)
    q = math.exp(-2.0 * inv)
    for k in range(x1 - x0 + 1):
        buf[k] = g
        g *= r
        r *= q


@numba.njit(cache=True, nogil=True, inline="always")
def _chord(u, dy2, r2, x0, x1):
    hw = math.sqrt(r2 - dy2)
    return max(int(math.ceil(u - hw)), x0), min(int(math.floor(u + hw)), x1)


@numba.njit(cache=True, nogil=True)
def _transmittance(u, v, rad, sd, op, W, H, T, tau):
    """Accumulate prod(1 - alpha) into ``T`` in splat-index order.

    With ``tau > 0`` a pixel stops accumulating once ``1 - T >= tau``; later
    factors can only lower ``T``, so the thresholded result is unchanged.
    Returns the number of splats that touched at least one pixel.
    """
    n = u.shape[0]
    ex = np.empty(W)
    ey = np.empty(H)
    touched = 0
    early = tau > 0.0
    for i in range(n):
        r = rad[i]
        if r <= 0.0:
            continue
        x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
        if x0 > x1 or y0 > y1:
            continue
        _falloff(u[i], sd[i], x0, x1, ex)
        _falloff(v[i], sd[i], y0, y1, ey)
        r2 = r * r
        o = op[i]
        hit = False
        for y in range(y0, y1 + 1):
            dy = y - v[i]
            dy2 = dy * dy
            if dy2 > r2:
                continue
            xa, xb = _chord(u[i], dy2, r2, x0, x1)
            if xa > xb:
                continue
            hit = True
            gy = o * ey[y - y0]
            if early:
                for x in range(xa, xb + 1):
                    t = T[y, x]
                    if 1.0 - t < tau:
                        T[y, x] = t * (1.0 - gy * ex[x - x0])
            else:
                for x in range(xa, xb + 1):
                    T[y, x] *= 1.0 - gy * ex[x - x0]
        if hit:
            touched += 1
    return touched


@numba.njit(cache=True, nogil=True)
def _consensus_ious(positions, sigmas, op, Rs, cs, intrs, W, H, refs, tau, z_near, kappa, floor):
    """Per-view IoUs. Stops early (remaining entries NaN) once even perfect
    agreement on the remaining views cannot lift the mean to ``floor``."""
    V = Rs.shape[0]
    out = np.full(V, np.nan)
    T = np.empty((H, W))
    acc = 0.0
    for k in range(V):
        u, v, z, rad, sd = _project(positions, sigmas, Rs[k], cs[k], intrs[k], z_near, kappa)
        T[:, :] = 1.0
        _transmittance(u, v, rad, sd, op, W, H, T, tau)
        inter = 0
        union = 0
        for y in range(H):
            for x in range(W):
                a = 1.0 - T[y, x] >= tau
                b = refs[k, y, x]
                if a and b:
                    inter += 1
                if a or b:
                    union += 1
        out[k] = 1.0 if union == 0 else inter / union
        acc += out[k]
        if (acc + (V - k - 1)) / V < floor:
            break
    return out


@numba.njit(cache=True, nogil=True)
def _sq_err_sum(T, ref):
    s = 0.0
    H, W = T.shape
    for y in range(H):
        for x in range(W):
            occ = min(max(1.0 - T[y, x], 0.0), 1.0)
            d = occ - (1.0 if ref[y, x] else 0.0)
            s += d * d
    return s


@numba.njit(cache=True, nogil=True)
def _silhouette_losses(positions, sigmas, op, Rs, cs, intrs, W, H, refs, z_near, kappa):
    V = Rs.shape[0]
    out = np.empty(V)
    T = np.empty((H, W))
    for k in range(V):
        u, v, z, rad, sd = _project(positions, sigmas, Rs[k], cs[k], intrs[k], z_near, kappa)
        T[:, :] = 1.0
        _transmittance(u, v, rad, sd, op, W, H, T, 0.0)
        out[k] = _sq_err_sum(T, refs[k]) / (H * W)
    return out


@numba.njit(cache=True, nogil=True)
def _composite(u, v, z, rad, sd, op, colors, order, W, H, C):
    touched = 0
    ex = np.empty(W)
    ey = np.empty(H)
    for j in range(order.shape[0]):
        i = order[j]
        r = rad[i]
        if r <= 0.0:
            continue
        x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
        if x0 > x1 or y0 > y1:
            continue
        _falloff(u[i], sd[i], x0, x1, ex)
        _falloff(v[i], sd[i], y0, y1, ey)
        r2 = r * r
        o = op[i]
        hit = False
        for y in range(y0, y1 + 1):
            dy = y - v[i]
            dy2 = dy * dy
            if dy2 > r2:
                continue
            xa, xb = _chord(u[i], dy2, r2, x0, x1)
            if xa > xb:
                continue
            hit = True
            gy = o * ey[y - y0]
            for x in range(xa, xb + 1):
                a = gy * ex[x - x0]
                for ch in range(3):
                    C[y, x, ch] = a * colors[i, ch] + (1.0 - a) * C[y, x, ch]
        if hit:
            touched += 1
    return touched


@numba.njit(cache=True, nogil=True)
def _abs_err_masked(C, ref, mask):
    s = 0.0
    cnt = 0
    H, W = mask.shape
    for y in range(H):
        for x in range(W):
            if mask[y, x]:
                cnt += 1
                for ch in range(3):
                    s += abs(C[y, x, ch] - ref[y, x, ch])
    return s, cnt


def _depth_order(z):
    # back-to-front; equal depths keep splat-index order
    return np.argsort(-z, kind="stable")


@numba.njit(cache=True, nogil=True)
def _photometric_losses(positions, sigmas, op, colors, Rs, cs, intrs, W, H, refs, masks, z_near, kappa):
    V = Rs.shape[0]
    out = np.empty(V)
    C = np.empty((H, W, 3))
    for k in range(V):
        u, v, z, rad, sd = _project(positions, sigmas, Rs[k], cs[k], intrs[k], z_near, kappa)
        order = np.argsort(-z, kind="mergesort")
        C[:, :, :] = 0.0
        _composite(u, v, z, rad, sd, op, colors, order, W, H, C)
        s, cnt = _abs_err_masked(C, refs[k], masks[k])
        out[k] = 0.0 if cnt == 0 else s / (3 * cnt)
    return out


# -- backward passes ---------------------------------------------------------
#
# Screen-space gradients are accumulated per splat into gu, gv (center),
# gsd (pixel std-dev) and gop (opacity). The hard kappa cutoff is treated as
# locally constant.

@numba.njit(cache=True, nogil=True)
def _occupancy_backward(u, v, rad, sd, op, W, H, T, G, gu, gv, gsd, gop):
    """Backpropagate dL/d(occupancy) = ``G`` through ``1 - prod(1 - alpha)``."""
    ex = np.empty(W)
    ey = np.empty(H)
    for i in range(u.shape[0]):
        r = rad[i]
        if r <= 0.0:
            continue
        x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
        if x0 > x1 or y0 > y1:
            continue
        _falloff(u[i], sd[i], x0, x1, ex)
        _falloff(v[i], sd[i], y0, y1, ey)
        r2 = r * r
        o = op[i]
        s2 = sd[i] * sd[i]
        au = 0.0
        av = 0.0
        asd = 0.0
        ao = 0.0
        for y in range(y0, y1 + 1):
            dy = y - v[i]
            dy2 = dy * dy
            if dy2 > r2:
                continue
            xa, xb = _chord(u[i], dy2, r2, x0, x1)
            gy = ey[y - y0]
            for x in range(xa, xb + 1):
                g = G[y, x]
                if g == 0.0:
                    continue
                w = gy * ex[x - x0]
                a = o * w
                # d occ / d alpha_i = prod over the other splats
                ga = g * T[y, x] / max(1.0 - a, 1e-12)
                dx = x - u[i]
                au += ga * a * dx
                av += ga * a * dy
                asd += ga * a * (dx * dx + dy2)
                ao += ga * w
        gu[i] += au / s2
        gv[i] += av / s2
        gsd[i] += asd / (s2 * sd[i])
        gop[i] += ao


@numba.njit(cache=True, nogil=True)
def _footprint_offsets(u, v, rad, order, W, H):
    """Start offset of every drawn splat's pixel run, in draw order."""
    off = np.zeros(order.shape[0] + 1, dtype=np.int64)
    for j in range(order.shape[0]):
        i = order[j]
        r = rad[i]
        cnt = 0
        if r > 0.0:
            x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
            r2 = r * r
            for y in range(y0, y1 + 1):
                dy = y - v[i]
                if dy * dy > r2 or x0 > x1:
                    continue
                xa, xb = _chord(u[i], dy * dy, r2, x0, x1)
                if xb >= xa:
                    cnt += xb - xa + 1
        off[j + 1] = off[j] + cnt
    return off


@numba.njit(cache=True, nogil=True)
def _composite_record(u, v, rad, sd, op, colors, order, W, H, C, off, prev):
    """Same as ``_composite`` but stores the color underneath each splat."""
    ex = np.empty(W)
    ey = np.empty(H)
    for j in range(order.shape[0]):
        i = order[j]
        r = rad[i]
        if r <= 0.0:
            continue
        x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
        if x0 > x1 or y0 > y1:
            continue
        _falloff(u[i], sd[i], x0, x1, ex)
        _falloff(v[i], sd[i], y0, y1, ey)
        r2 = r * r
        o = op[i]
        k = off[j]
        for y in range(y0, y1 + 1):
            dy = y - v[i]
            dy2 = dy * dy
            if dy2 > r2:
                continue
            xa, xb = _chord(u[i], dy2, r2, x0, x1)
            gy = o * ey[y - y0]
            for x in range(xa, xb + 1):
                a = gy * ex[x - x0]
                for ch in range(3):
                    prev[k, ch] = C[y, x, ch]
                    C[y, x, ch] = a * colors[i, ch] + (1.0 - a) * C[y, x, ch]
                k += 1


@numba.njit(cache=True, nogil=True)
def _composite_backward(u, v, rad, sd, op, colors, order, W, H, off, prev, G,
                        gu, gv, gsd, gop, gcol):
    """Backpropagate dL/dC = ``G`` (H, W, 3) through back-to-front compositing.

    Walks splats front to back so the transmittance in front of each one is
    available; the color underneath comes from ``_composite_record``.
    """
    ex = np.empty(W)
    ey = np.empty(H)
    Tf = np.ones((H, W))
    for j in range(order.shape[0] - 1, -1, -1):
        i = order[j]
        r = rad[i]
        if r <= 0.0:
            continue
        x0, x1, y0, y1 = _footprint(u[i], v[i], r, W, H)
        if x0 > x1 or y0 > y1:
            continue
        _falloff(u[i], sd[i], x0, x1, ex)
        _falloff(v[i], sd[i], y0, y1, ey)
        r2 = r * r
        o = op[i]
        s2 = sd[i] * sd[i]
        c0, c1, c2 = colors[i, 0], colors[i, 1], colors[i, 2]
        k = off[j]
        au = 0.0
        av = 0.0
        asd = 0.0
        ao = 0.0
        for y in range(y0, y1 + 1):
            dy = y - v[i]
            dy2 = dy * dy
            if dy2 > r2:
                continue
            xa, xb = _chord(u[i], dy2, r2, x0, x1)
            gy = ey[y - y0]
            for x in range(xa, xb + 1):
                w = gy * ex[x - x0]
                a = o * w
                t = Tf[y, x]
                g0, g1, g2 = G[y, x, 0], G[y, x, 1], G[y, x, 2]
                if g0 != 0.0 or g1 != 0.0 or g2 != 0.0:
                    at = a * t
                    gcol[i, 0] += g0 * at
                    gcol[i, 1] += g1 * at
                    gcol[i, 2] += g2 * at
                    ga = t * (g0 * (c0 - prev[k, 0]) + g1 * (c1 - prev[k, 1])
                              + g2 * (c2 - prev[k, 2]))
                    dx = x - u[i]
                    au += ga * a * dx
                    av += ga * a * dy
                    asd += ga * a * (dx * dx + dy2)
                    ao += ga * w
                Tf[y, x] = t * (1.0 - a)
                k += 1
        gu[i] += au / s2
        gv[i] += av / s2
        gsd[i] += asd / (s2 * sd[i])
        gop[i] += ao


@numba.njit(cache=True, nogil=True)
def _chain_to_world(positions, R, c, intr, u, v, z, sd, gu, gv, gsd,
                    gpos, gsig, sum_w, sum_wxp):
    """Chain screen-space gradients to world positions and sigmas.

    Accumulates into ``gpos``/``gsig`` and returns per-view sums of the world
    gradient ``w_i`` and of ``w_i x p_i`` (used for camera gradients).
    """
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    for i in range(u.shape[0]):
        if gu[i] == 0.0 and gv[i] == 0.0 and gsd[i] == 0.0:
            continue
        Z = z[i]
        gX = gu[i] * fx / Z
        gY = gv[i] * fy / Z
        gZ = -(gu[i] * (u[i] - cx) + gv[i] * (v[i] - cy) + gsd[i] * sd[i]) / Z
        w0 = R[0, 0] * gX + R[0, 1] * gY + R[0, 2] * gZ
        w1 = R[1, 0] * gX + R[1, 1] * gY + R[1, 2] * gZ
        w2 = R[2, 0] * gX + R[2, 1] * gY + R[2, 2] * gZ
        gpos[i, 0] += w0
        gpos[i, 1] += w1
        gpos[i, 2] += w2
        gsig[i] += gsd[i] * fx / Z
        p0, p1, p2 = positions[i, 0], positions[i, 1], positions[i, 2]
        sum_w[0] += w0
        sum_w[1] += w1
        sum_w[2] += w2
        sum_wxp[0] += w1 * p2 - w2 * p1
        sum_wxp[1] += w2 * p0 - w0 * p2
        sum_wxp[2] += w0 * p1 - w1 * p0


@numba.njit(cache=True, nogil=True)
def _silhouette_grads(positions, sigmas, op, Rs, cs, intrs, W, H, refs, z_near, kappa):
    """Per-view silhouette losses plus gradients of their sum."""
    V = Rs.shape[0]
    n = positions.shape[0]
    loss = np.empty(V)
    sum_w = np.zeros((V, 3))
    sum_wxp = np.zeros((V, 3))
    gpos = np.zeros((n, 3))
    gsig = np.zeros(n)
    gop = np.zeros(n)
    T = np.empty((H, W))
    G = np.empty((H, W))
    gu = np.empty(n)
    gv = np.empty(n)
    gsd = np.empty(n)
    scale = 2.0 / (H * W)
    for k in range(V):
        u, v, z, rad, sd = _project(positions, sigmas, Rs[k], cs[k], intrs[k], z_near, kappa)
        T[:, :] = 1.0
        _transmittance(u, v, rad, sd, op, W, H, T, 0.0)
        loss[k] = _sq_err_sum(T, refs[k]) / (H * W)
        for y in range(H):
            for x in range(W):
                occ = min(max(1.0 - T[y, x], 0.0), 1.0)
                G[y, x] = scale * (occ - (1.0 if refs[k, y, x] else 0.0))
        gu[:] = 0.0
        gv[:] = 0.0
        gsd[:] = 0.0
        _occupancy_backward(u, v, rad, sd, op, W, H, T, G, gu, gv, gsd, gop)
        _chain_to_world(positions, Rs[k], cs[k], intrs[k], u, v, z, sd, gu, gv, gsd,
                        gpos, gsig, sum_w[k], sum_wxp[k])
    return loss, sum_w, sum_wxp, gpos, gsig, gop


@numba.njit(cache=True, nogil=True)
def _photometric_grads(positions, sigmas, op, colors, Rs, cs, intrs, W, H, refs, masks,
                       z_near, kappa):
    """Per-view photometric losses plus gradients of their sum."""
    V = Rs.shape[0]
    n = positions.shape[0]
    loss = np.empty(V)
    sum_w = np.zeros((V, 3))
    sum_wxp = np.zeros((V, 3))
    gpos = np.zeros((n, 3))
    gsig = np.zeros(n)
    gop = np.zeros(n)
    gcol = np.zeros((n, 3))
    C = np.empty((H, W, 3))
    G = np.zeros((H, W, 3))
    gu = np.empty(n)
    gv = np.empty(n)
    gsd = np.empty(n)
    for k in range(V):
        u, v, z, rad, sd = _project(positions, sigmas, Rs[k], cs[k], intrs[k], z_near, kappa)
        order = np.argsort(-z, kind="mergesort")
        off = _footprint_offsets(u, v, rad, order, W, H)
        prev = np.empty((off[-1], 3))
        C[:, :, :] = 0.0
        _composite_record(u, v, rad, sd, op, colors, order, W, H, C, off, prev)
        s, cnt = _abs_err_masked(C, refs[k], masks[k])
        loss[k] = 0.0 if cnt == 0 else s / (3 * cnt)
        if cnt == 0:
            continue
        inv = 1.0 / (3 * cnt)
        for y in range(H):
            for x in range(W):
                for ch in range(3):
                    d = C[y, x, ch] - refs[k, y, x, ch]
                    if masks[k, y, x] and abs(d) > RESIDUAL_DEADZONE:
                        G[y, x, ch] = inv if d > 0.0 else -inv
                    else:
                        G[y, x, ch] = 0.0
        gu[:] = 0.0
        gv[:] = 0.0
        gsd[:] = 0.0
        _composite_backward(u, v, rad, sd, op, colors, order, W, H, off, prev, G,
                            gu, gv, gsd, gop, gcol)
        _chain_to_world(positions, Rs[k], cs[k], intrs[k], u, v, z, sd, gu, gv, gsd,
                        gpos, gsig, sum_w[k], sum_wxp[k])
    return loss, sum_w, sum_wxp, gpos, gsig, gop, gcol


# -- camera packing ---------------------------------------------------------

def pack_cameras(cams, width=None, height=None):
    """Stack rotation matrices, centers and intrinsics for the batched kernels.

    When ``width``/``height`` are given, intrinsics are rescaled to that
    render resolution.
    """
    cams = list(cams)
    Rs = np.ascontiguousarray(np.array([c.R for c in cams]).reshape(-1, 3, 3))
    cs = np.ascontiguousarray(np.array([c.center for c in cams]).reshape(-1, 3))
    intrs = []
    for c in cams:
        k = c.intrinsics
        if width is not None and (k.width != width or k.height != height):
            k = k.resized(width, height)
        intrs.append(k.as_array())
    return Rs, cs, np.ascontiguousarray(np.array(intrs).reshape(-1, 4))


def _cloud_arrays(cloud):
    if len(cloud) == 0:
        raise PreconditionError("cannot render an empty splat cloud")
    return (np.ascontiguousarray(cloud.positions), np.ascontiguousarray(cloud.sigmas),
            np.ascontiguousarray(cloud.opacities))


# -- public operations ------------------------------------------------------

def render_transmittance(cloud, cam, width=None, height=None, tau=0.0):
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras([cam], width, height)
    W = int(width or cam.intrinsics.width)
    H = int(height or cam.intrinsics.height)
    u, v, z, rad, sd = _project(pos, sig, Rs[0], cs[0], intrs[0], Z_NEAR, KAPPA)
    T = np.ones((H, W))
    touched = _transmittance(u, v, rad, sd, op, W, H, T, float(tau))
    return T, touched


def render_occupancy(cloud, cam, width=None, height=None):
    """Soft silhouette ``1 - prod(1 - alpha)``; ``empty`` is set when no splat
    reaches the viewport."""
    T, touched = render_transmittance(cloud, cam, width, height)
    return SoftOccupancy(np.clip(1.0 - T, 0.0, 1.0), empty=touched == 0)


def threshold_mask(occ, tau=DEFAULT_TAU):
    if not 0.0 < tau < 1.0:
        raise PreconditionError(f"threshold must lie in (0, 1), got {tau}")
    return SilhouetteMask(occ.values >= tau)


def render_mask(cloud, cam, width=None, height=None, tau=DEFAULT_TAU):
    return threshold_mask(render_occupancy(cloud, cam, width, height), tau)


def render_rgb(cloud, cam, width=None, height=None):
    """Back-to-front alpha compositing over a black background."""
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras([cam], width, height)
    W = int(width or cam.intrinsics.width)
    H = int(height or cam.intrinsics.height)
    u, v, z, rad, sd = _project(pos, sig, Rs[0], cs[0], intrs[0], Z_NEAR, KAPPA)
    C = np.zeros((H, W, 3))
    touched = _composite(u, v, z, rad, sd, op, np.ascontiguousarray(cloud.colors),
                         _depth_order(z), W, H, C)
    return RgbImage(np.clip(C, 0.0, 1.0), empty=touched == 0)


def _check_same_size(a, b):
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(f"size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")


def mask_iou(a, b):
    """Intersection over union; two empty masks count as perfect agreement."""
    _check_same_size(a, b)
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union


def soft_silhouette_loss(occ, ref):
    _check_same_size(occ, ref)
    T = np.ascontiguousarray(1.0 - occ.values)
    return float(_sq_err_sum(T, np.ascontiguousarray(ref.bits)) / (occ.width * occ.height))


def photometric_loss(img, ref, ref_mask):
    """Mean absolute per-channel error over the reference foreground.

    Returns ``(loss, n_foreground)``; the loss is 0 when the mask is empty.
    """
    _check_same_size(img, ref)
    _check_same_size(img, ref_mask)
    s, cnt = _abs_err_masked(np.ascontiguousarray(img.pixels), np.ascontiguousarray(ref.pixels),
                             np.ascontiguousarray(ref_mask.bits))
    return (0.0 if cnt == 0 else float(s / (3 * cnt))), int(cnt)


def consensus_ious(cloud, cams, ref_masks, width, height, tau=DEFAULT_TAU, floor=-np.inf):
    """Per-view IoU between rendered silhouettes and reference masks, batched.

    ``ref_masks`` is a (V, H, W) boolean stack already at the render size.
    With a finite ``floor`` the evaluation stops as soon as the mean IoU is
    provably below it; unevaluated views are NaN.
    """
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras(cams, width, height)
    return _consensus_ious(pos, sig, op, Rs, cs, intrs, int(width), int(height),
                           ref_masks, float(tau), Z_NEAR, KAPPA, float(floor))


def silhouette_losses(cloud, cams, ref_masks, width, height):
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras(cams, width, height)
    return _silhouette_losses(pos, sig, op, Rs, cs, intrs, int(width), int(height),
                              ref_masks, Z_NEAR, KAPPA)


def photometric_losses(cloud, cams, ref_images, ref_masks, width, height):
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras(cams, width, height)
    return _photometric_losses(pos, sig, op, np.ascontiguousarray(cloud.colors), Rs, cs, intrs,
                               int(width), int(height), ref_images, ref_masks, Z_NEAR, KAPPA)


@dataclass(frozen=True)
class RenderGradients:
    """Per-view losses and gradients of their sum.

    ``view_w[k]`` and ``view_wxp[k]`` are the sums over splats of the
    world-space position gradient ``w_i`` and of ``w_i x p_i`` for view ``k``;
    they suffice to form the gradient with respect to a rigid or similarity
    motion of that camera.
    """

    losses: np.ndarray
    view_w: np.ndarray
    view_wxp: np.ndarray
    positions: np.ndarray
    sigmas: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray = None


def silhouette_gradients(cloud, cams, ref_masks, width, height):
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras(cams, width, height)
    out = _silhouette_grads(pos, sig, op, Rs, cs, intrs, int(width), int(height),
                            ref_masks, Z_NEAR, KAPPA)
    return RenderGradients(*out)


def photometric_gradients(cloud, cams, ref_images, ref_masks, width, height):
    pos, sig, op = _cloud_arrays(cloud)
    Rs, cs, intrs = pack_cameras(cams, width, height)
    out = _photometric_grads(pos, sig, op, np.ascontiguousarray(cloud.colors), Rs, cs, intrs,
                             int(width), int(height), ref_images, ref_masks, Z_NEAR, KAPPA)
    return RenderGradients(*out)


def resample_mask(mask, width, height):
    """Nearest-neighbour resample using pixel-center alignment."""
    if (mask.width, mask.height) == (width, height):
        return mask
    ys = np.clip(((np.arange(height) + 0.5) * mask.height / height).astype(int), 0, mask.height - 1)
    xs = np.clip(((np.arange(width) + 0.5) * mask.width / width).astype(int), 0, mask.width - 1)
    return SilhouetteMask(mask.bits[np.ix_(ys, xs)])


# -- image IO ---------------------------------------------------------------

def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise PreconditionError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise PreconditionError(f"{path}: only 8-bit files are supported")
    return w, h, np.frombuffer(data, dtype=np.uint8, offset=pos)


def write_pgm(mask, path):
    h, w = mask.bits.shape
    body = np.where(mask.bits, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body)


def read_pgm(path):
    w, h, buf = _read_netpbm(path, b"P5")
    return SilhouetteMask(buf[: w * h].reshape(h, w) >= 128)


def write_ppm(img, path):
    h, w, _ = img.pixels.shape
    body = np.round(np.clip(img.pixels, 0, 1) * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + body)


def read_ppm(path):
    w, h, buf = _read_netpbm(path, b"P6")
    return RgbImage(buf[: w * h * 3].reshape(h, w, 3).astype(float) / 255.0)
