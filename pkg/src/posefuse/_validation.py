"""Argument checks shared by the public operations and estimators."""
from __future__ import annotations

import math

from .errors import PreconditionError
from .geometry import PoseSet, Sim3


def check_positive(name, value, integer=False):
    if integer:
        if isinstance(value, bool) or int(value) != value:
            raise PreconditionError(f"{name} must be an integer, got {value!r}")
        value = int(value)
    if not (math.isfinite(value) and value > 0):
        raise PreconditionError(f"{name} must be positive, got {value!r}")
    return value


def check_angle(name, value):
    if not 0.0 < value <= 180.0:
        raise PreconditionError(f"{name} must lie in (0, 180], got {value!r}")
    return float(value)


def check_fraction(name, value):
    if not 0.0 < value < 1.0:
        raise PreconditionError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def check_pose_set(name, value):
    if not isinstance(value, PoseSet):
        raise PreconditionError(f"{name} must be a PoseSet, got {type(value).__name__}")
    return value


def check_sim3(name, value):
    if not isinstance(value, Sim3):
        raise PreconditionError(f"{name} must be a Sim3, got {type(value).__name__}")
    return value


def check_has_all(name, mapping, ids):
    missing = [i for i in ids if i not in mapping]
    if missing:
        raise PreconditionError(f"{name} is missing {len(missing)} id(s), e.g. {missing[0]!r}")
    return mapping


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise PreconditionError(f"{type(est).__name__} is not fitted yet; call fit() first")
