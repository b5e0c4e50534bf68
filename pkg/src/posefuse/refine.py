"""Local refinement of one group-level similarity for the auxiliary cameras.

The model is frozen; only a single Sim3 applied to every auxiliary camera
moves. A silhouette stage (soft occupancy vs. masks) is followed by a
photometric stage (masked L1 on RGB).

Parameterization: increments ``theta = (omega, tau, lambda)`` act on the
left of the current transform about a fixed pivot ``c`` (the model
centroid)::

    x -> exp(lambda) * Exp(omega) @ (x - c) + c + tau

and the chart is reset after every accepted step.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_has_all, check_is_fitted, check_pose_set, check_positive, check_sim3
from .errors import NonFiniteLoss, PreconditionError, StageError
from .geometry import Sim3, sim3_apply_pose_set, sim3_compose
from .splatrender import (
    pack_cameras, photometric_gradients, photometric_losses, silhouette_gradients,
    silhouette_losses,
)

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    max_iters: int = 500
    # first step length per parameter group; translation is a fraction of
    # the auxiliary camera set's diameter
    step_rot: float = 0.01
    step_trans: float = 0.005
    step_logscale: float = 0.005
    fd_rot: float = 1e-3
    fd_trans: float = 1e-3
    fd_logscale: float = 1e-3
    tol: float = 1e-6
    tol_window: int = 10
    max_halvings: int = 20
    # upper bound on one step, in units of the step sizes above
    max_step: float = 20.0
    # also converged after 3 accepted steps shorter than this (same units)
    step_tol: float = 1e-3
    batch: int = None
    seed: int = 0
    gradient: str = "analytic"

    def __post_init__(self):
        check_positive("max_iters", self.max_iters, integer=True)
        for f in ("step_rot", "step_trans", "step_logscale", "fd_rot", "fd_trans", "fd_logscale",
                  "tol", "max_step", "step_tol"):
            check_positive(f, getattr(self, f))
        check_positive("tol_window", self.tol_window, integer=True)
        check_positive("max_halvings", self.max_halvings, integer=True)
        if self.batch is not None:
            check_positive("batch", self.batch, integer=True)
        if self.gradient not in ("analytic", "fd"):
            raise PreconditionError(f"gradient must be 'analytic' or 'fd', got {self.gradient!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown refine config keys: {sorted(unknown)}")
        return cls(**d)

    def steps(self, diameter):
        return np.array([self.step_rot] * 3 + [self.step_trans * diameter] * 3 + [self.step_logscale])

    def fd_steps(self, diameter):
        return np.array([self.fd_rot] * 3 + [self.fd_trans * diameter] * 3 + [self.fd_logscale])


@dataclass
class RefineTrace:
    stage: str
    losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    iterations: int = 0
    evaluations: int = 0
    converged: bool = False
    stalled: bool = False

    def write_csv(self, path, append=False):
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(["stage", "iteration", "loss", "step", "halvings"])
            w.writerow([self.stage, 0, repr(self.initial_loss), "", ""])
            for k, (l, s, h) in enumerate(zip(self.losses, self.steps, self.halvings), 1):
                w.writerow([self.stage, k, repr(l), repr(s), h])


# -- chart ------------------------------------------------------------------

def chart_increment(theta, pivot):
    """The left increment for chart coordinates ``theta`` about ``pivot``."""
    theta = np.asarray(theta, dtype=float)
    s = math.exp(theta[6])
    R = Rotation.from_rotvec(theta[:3]).as_matrix()
    return Sim3.from_matrix(s, R, pivot + theta[3:6] - s * R @ pivot)


def chart_apply(at, theta, pivot=np.zeros(3)):
    return sim3_compose(chart_increment(theta, np.asarray(pivot, float)), at)


def sim3_fd_gradient(loss, at, steps, pivot=np.zeros(3)):
    """Central-difference gradient of ``loss`` over the 7-parameter chart at ``at``."""
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (7,))
    g = np.zeros(7)
    for k in range(7):
        e = np.zeros(7)
        e[k] = steps[k]
        lp = loss(chart_apply(at, e, pivot))
        lm = loss(chart_apply(at, -e, pivot))
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NonFiniteLoss(f"non-finite loss probing parameter {k}")
        g[k] = (lp - lm) / (2.0 * steps[k])
    return g


def camera_chart_gradient(grads, centers, pivot):
    """Chart gradient of the mean per-view loss from renderer gradients.

    Perturbing every camera by the left increment is equivalent to moving
    each splat by its inverse, which gives the closed form below.
    """
    V = len(grads.losses)
    w = grads.view_w
    g_rot = (grads.view_wxp - np.cross(w, pivot)).sum(axis=0)
    g_trans = -w.sum(axis=0)
    g_log = -float(np.sum((centers - pivot) * w))
    return np.concatenate([g_rot, g_trans, [g_log]]) / V


# -- objectives -------------------------------------------------------------

class _Objective:
    """Mean per-view loss of the transformed auxiliary cameras."""

    def __init__(self, P_aux, model, masks, images=None, res=None):
        self.P_aux = P_aux
        self.model = model
        self.ids = list(P_aux.ids)
        first = P_aux[self.ids[0]].intrinsics
        self.W = int(res or first.width)
        self.H = int(res or first.height)
        self.masks = np.ascontiguousarray(np.array([masks[i].bits for i in self.ids], dtype=np.bool_))
        if self.masks.shape[1:] != (self.H, self.W):
            raise PreconditionError("mask size does not match the camera intrinsics")
        self.images = None
        if images is not None:
            self.images = np.ascontiguousarray(np.array([images[i].pixels for i in self.ids], dtype=float))
            if self.images.shape[1:3] != (self.H, self.W):
                raise PreconditionError("image size does not match the camera intrinsics")
        self.evaluations = 0

    def cams(self, T, idx):
        moved = sim3_apply_pose_set(T, self.P_aux)
        return [moved[self.ids[k]] for k in idx]

    def loss(self, T, idx):
        self.evaluations += 1
        cams = self.cams(T, idx)
        if self.images is None:
            vals = silhouette_losses(self.model, cams, self.masks[idx], self.W, self.H)
        else:
            vals = photometric_losses(self.model, cams, self.images[idx], self.masks[idx], self.W, self.H)
        val = math.fsum(vals) / len(vals)
        if not math.isfinite(val):
            raise NonFiniteLoss("loss evaluated to a non-finite value")
        return val

    def gradient(self, T, idx, pivot):
        self.evaluations += 1
        cams = self.cams(T, idx)
        if self.images is None:
            g = silhouette_gradients(self.model, cams, self.masks[idx], self.W, self.H)
        else:
            g = photometric_gradients(self.model, cams, self.images[idx], self.masks[idx], self.W, self.H)
        _, centers, _ = pack_cameras(cams)
        grad = camera_chart_gradient(g, centers, pivot)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss("gradient evaluated to non-finite values")
        return grad


def _optimize(obj, init, cfg, stage):
    """Quasi-Newton descent with backtracking in step-size-scaled coordinates.

    The direction comes from a BFGS inverse-Hessian estimate (started at the
    identity); a step is accepted only if it lowers the loss, otherwise its
    length is halved, at most ``max_halvings`` times. When an iteration fails
    the estimate is reset once to steepest descent (using a finite-difference
    gradient in analytic mode); if that fails too the stage stops as stalled.
    """
    pivot = obj.model.centroid()
    diameter = max(obj.P_aux.diameter(), 1e-12) * init.scale
    h = cfg.steps(diameter)
    fd_h = cfg.fd_steps(diameter)
    V = len(obj.ids)
    full = cfg.batch is None or cfg.batch >= V
    rng = np.random.default_rng(cfg.seed)
    all_idx = np.arange(V)
    trace = RefineTrace(stage)

    def batch():
        return all_idx if full else np.sort(rng.choice(V, size=cfg.batch, replace=False))

    def grad(T, idx, fd):
        if fd:
            return sim3_fd_gradient(lambda S: obj.loss(S, idx), T, fd_h, pivot) * h
        return obj.gradient(T, idx, pivot) * h

    idx = batch()
    T = init
    L = obj.loss(T, idx)
    trace.initial_loss = L
    g = grad(T, idx, cfg.gradient == "fd")
    Hinv = None
    small = 0
    history = [L]
    for it in range(cfg.max_iters):
        if not full and it > 0:
            idx = batch()
            L = obj.loss(T, idx)
            g = grad(T, idx, cfg.gradient == "fd")
        accepted = False
        fd_mode = cfg.gradient == "fd"
        for attempt in range(2):
            if not np.any(g):
                break
            d = -g if Hinv is None else -Hinv @ g
            if float(d @ g) >= 0.0:
                d, Hinv = -g, None
            dn = float(np.linalg.norm(d))
            a = min(1.0, cfg.max_step / dn)
            for halving in range(cfg.max_halvings + 1):
                T_try = chart_apply(T, a * d * h, pivot)
                L_try = obj.loss(T_try, idx)
                if L_try < L:
                    accepted = True
                    break
                a *= 0.5
            if accepted or attempt == 1:
                break
            # retry once from steepest descent
            Hinv = None
            if not fd_mode:
                fd_mode = True
                g = grad(T, idx, True)
        if not accepted:
            trace.stalled = True
            break
        s = a * d
        g_new = grad(T_try, idx, cfg.gradient == "fd")
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(s @ s + y @ y):
            if Hinv is None:
                Hinv = np.eye(7) * sy / float(y @ y)
            rho = 1.0 / sy
            E = np.eye(7) - rho * np.outer(s, y)
            Hinv = E @ Hinv @ E.T + rho * np.outer(s, s)
        T, L, g = T_try, L_try, g_new
        step = float(np.linalg.norm(s))
        trace.losses.append(L)
        trace.steps.append(step)
        trace.halvings.append(halving)
        trace.iterations = it + 1
        history.append(L)
        if len(history) > cfg.tol_window:
            old = history[-1 - cfg.tol_window]
            if abs(old - L) <= cfg.tol * max(abs(L), 1e-300):
                trace.converged = True
                break
        small = small + 1 if step < cfg.step_tol else 0
        if small >= 3:
            trace.converged = True
            break
    best_T, best_L = T, L
    if not full:
        # mini-batch losses are not comparable across iterations; compare in full
        L_full = obj.loss(T, all_idx)
        L_init = obj.loss(init, all_idx)
        best_T, best_L = (T, L_full) if L_full <= L_init else (init, L_init)
        trace.initial_loss = L_init
    trace.final_loss = best_L
    trace.evaluations = obj.evaluations
    log.info("%s: %d iterations, loss %.6g -> %.6g%s", stage, trace.iterations,
             trace.initial_loss, best_L, " (stalled)" if trace.stalled else "")
    return best_T, trace


def _check_inputs(P_aux, model, masks, init, cfg):
    check_pose_set("P_aux", P_aux)
    check_sim3("init", init)
    check_has_all("masks", masks, P_aux.ids)
    if len(model) == 0:
        raise PreconditionError("model has no splats")
    if not isinstance(cfg, RefineConfig):
        raise PreconditionError("cfg must be a RefineConfig")


def refine_silhouette(P_aux, model, masks, init, cfg=None):
    """Refine ``init`` against the auxiliary masks. Returns (Sim3, RefineTrace)."""
    cfg = cfg or RefineConfig()
    _check_inputs(P_aux, model, masks, init, cfg)
    return _optimize(_Objective(P_aux, model, masks), init, cfg, "silhouette")


def refine_photometric(P_aux, model, images, masks, init, cfg=None):
    """Refine ``init`` against the auxiliary RGB images inside their masks."""
    cfg = cfg or RefineConfig()
    _check_inputs(P_aux, model, masks, init, cfg)
    check_has_all("images", images, P_aux.ids)
    return _optimize(_Objective(P_aux, model, masks, images), init, cfg, "photometric")


def local_refine(P_aux, model, images, masks, init, cfg=None, photometric=True):
    """Silhouette stage followed by the photometric stage.

    Returns (Sim3, [traces]).
    """
    cfg = cfg or RefineConfig()
    try:
        T, t1 = refine_silhouette(P_aux, model, masks, init, cfg)
    except StageError as exc:
        raise type(exc)(str(exc), stage="refine-silhouette", diagnostics=exc.diagnostics) from exc
    if not photometric:
        return T, [t1]
    try:
        T, t2 = refine_photometric(P_aux, model, images, masks, T, cfg)
    except StageError as exc:
        raise type(exc)(str(exc), stage="refine-photometric", diagnostics=exc.diagnostics) from exc
    return T, [t1, t2]


class LocalRefiner(BaseEstimator, TransformerMixin):
    """Estimator form of :func:`local_refine`.

    ``fit(P_aux, model, images, masks, init)`` stores ``transform_`` (the
    refined aux-to-main similarity) and ``traces_``.
    """

    def __init__(self, max_iters=500, step_rot=0.01, step_trans=0.005, step_logscale=0.005,
                 tol=1e-6, batch=None, seed=0, gradient="analytic", photometric=True):
        self.max_iters = max_iters
        self.step_rot = step_rot
        self.step_trans = step_trans
        self.step_logscale = step_logscale
        self.tol = tol
        self.batch = batch
        self.seed = seed
        self.gradient = gradient
        self.photometric = photometric

    def config(self):
        return RefineConfig(max_iters=self.max_iters, step_rot=self.step_rot, step_trans=self.step_trans,
                            step_logscale=self.step_logscale, tol=self.tol, batch=self.batch,
                            seed=self.seed, gradient=self.gradient)

    def fit(self, P_aux, model, images, masks, init):
        self.transform_, self.traces_ = local_refine(P_aux, model, images, masks, init,
                                                     self.config(), self.photometric)
        return self

    def transform(self, P):
        check_is_fitted(self, "transform_")
        return sim3_apply_pose_set(self.transform_, P)
