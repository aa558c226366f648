"""SE(2) pose algebra.

Poses are ``(x, y, theta)`` with theta wrapped to (-pi, pi].  Perturbations
live in the body frame: ``p ⊕ d`` moves ``p`` by ``d`` expressed in ``p``'s
own frame.  The array helpers operate on ``(..., 3)`` float arrays and are
used by the vectorized linearization code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, TWO_PI)
    if w <= 0.0:
        w += TWO_PI
    return w - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, TWO_PI)
    w = np.where(w <= 0.0, w + TWO_PI, w)
    return w - math.pi


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_array(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def compose(self, other: "Pose2") -> "Pose2":
        return compose(self, other)

    def between(self, other: "Pose2") -> "Pose2":
        return between(self, other)

    def inverse(self) -> "Pose2":
        return inverse(self)

    def translation_distance(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def isclose(self, other: "Pose2", tol: float = 1e-9) -> bool:
        return (
            abs(self.x - other.x) <= tol
            and abs(self.y - other.y) <= tol
            and abs(wrap_angle(self.theta - other.theta)) <= tol
        )


IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose ``rel`` with ``compose(a, rel) == b``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = wrap_angles(a[..., 2] + b[..., 2])
    return out


def between_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angles(b[..., 2] - a[..., 2])
    return out


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def validate_covariance(cov, name: str = "covariance", tol: float = 1e-12) -> np.ndarray:
    """Return ``cov`` as a 3x3 array or raise :class:`ConfigurationError`.

    Zero (positive semi-definite) matrices are accepted so that noise-free
    scenarios can be expressed; negative eigenvalues and asymmetry are not.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise ConfigurationError(f"{name} must be 3x3, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ConfigurationError(f"{name} has non-finite entries")
    if np.max(np.abs(cov - cov.T)) > tol:
        raise ConfigurationError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < -tol * max(1.0, eig.max()):
        raise ConfigurationError(f"{name} is not positive semi-definite (min eigenvalue {eig.min():g})")
    return cov


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root ``S`` with ``S @ S.T == cov`` for PSD ``cov``."""
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_pose_noise(cov, rng: np.random.Generator) -> Pose2:
    """Draw a body-frame perturbation ``N(0, cov)`` as a :class:`Pose2`."""
    cov = validate_covariance(cov, "noise covariance")
    eps = covariance_sqrt(cov) @ rng.standard_normal(3)
    return Pose2(eps[0], eps[1], eps[2])
