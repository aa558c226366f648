"""Viewpoint-dependent classifier models.

A model maps ``(class label, relative pose robot->object)`` to a Gaussian
over classifier score vectors.  Labels are 1-based.  Every model exposes
vectorized ``mean_batch`` / ``sqrt_info_batch`` used by the smoother and by
the weight sampler; the scalar helpers wrap them.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, LoadError
from .geometry import Pose2, between

# Square-root information of the simulated classifier noise, Sigma_c = (R'R)^-1.
SIMULATION_SQRT_INFO = np.array([[1.5, -0.75], [0.0, 1.5]])

LOG_2PI = math.log(2.0 * math.pi)


class ViewpointModel:
    """Base class: Gaussian classifier-score model with constant covariance."""

    num_classes: int

    def __init__(self, num_classes: int, sqrt_info):
        if num_classes < 2:
            raise ConfigurationError("a classifier model needs at least two classes")
        self.num_classes = int(num_classes)
        w = np.asarray(sqrt_info, dtype=float)
        if w.shape != (num_classes, num_classes):
            raise ConfigurationError(f"sqrt_info must be {num_classes}x{num_classes}")
        if abs(np.linalg.det(w)) < 1e-12:
            raise ConfigurationError("sqrt_info must be invertible")
        self._sqrt_info = w
        self._log_det_w = float(np.log(abs(np.linalg.det(w))))

    # subclasses implement this one
    def _mean(self, labels: np.ndarray, rel: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_labels(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 1 or labels.max() > self.num_classes):
            raise ContractViolation(f"class labels must lie in [1, {self.num_classes}]")
        return labels

    def mean_batch(self, labels, rel: np.ndarray) -> np.ndarray:
        rel = np.asarray(rel, dtype=float).reshape(-1, 3)
        labels = np.broadcast_to(self.check_labels(labels), rel.shape[:1])
        return self._mean(labels, rel)

    def sqrt_info_batch(self, labels, rel: np.ndarray) -> np.ndarray:
        n = np.asarray(rel).reshape(-1, 3).shape[0]
        return np.broadcast_to(self._sqrt_info, (n,) + self._sqrt_info.shape)

    def mean_jacobian_batch(self, labels, rel: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """``d h / d rel`` as an ``(n, M, 3)`` array (central differences by default)."""
        rel = np.asarray(rel, dtype=float).reshape(-1, 3)
        out = np.empty((rel.shape[0], self.num_classes, 3))
        for j in range(3):
            d = np.zeros(3)
            d[j] = step
            out[:, :, j] = (self.mean_batch(labels, rel + d) - self.mean_batch(labels, rel - d)) / (2 * step)
        return out

    @property
    def covariance_matrix(self) -> np.ndarray:
        return np.linalg.inv(self._sqrt_info.T @ self._sqrt_info)

    def log_likelihood_batch(self, z: np.ndarray, labels, rel: np.ndarray) -> np.ndarray:
        """Gaussian log-density of score vectors ``z`` (``(n, M)``)."""
        h = self.mean_batch(labels, rel)
        r = (np.asarray(z, dtype=float) - h) @ self._sqrt_info.T
        return -0.5 * np.sum(r * r, axis=-1) + self._log_det_w - 0.5 * self.num_classes * LOG_2PI


class SimulationModel(ViewpointModel):
    """Two-class aliasing model: scores depend on sin of the relative yaw.

    At relative yaw -90 deg both classes predict ``[0.5, 0.5]``; at +90 deg
    the prediction is one-hot on the true class.
    """

    def __init__(self, sqrt_info=SIMULATION_SQRT_INFO):
        super().__init__(2, sqrt_info)

    def _mean(self, labels, rel):
        s = np.sin(rel[:, 2])
        strong = 0.25 * s + 0.75
        weak = 0.25 * (1.0 - s)
        out = np.empty((rel.shape[0], 2))
        is_one = labels == 1
        out[:, 0] = np.where(is_one, strong, weak)
        out[:, 1] = np.where(is_one, weak, strong)
        return out

    def mean_jacobian_batch(self, labels, rel, step=None):
        rel = np.asarray(rel, dtype=float).reshape(-1, 3)
        labels = np.broadcast_to(self.check_labels(labels), rel.shape[:1])
        dc = 0.25 * np.cos(rel[:, 2])
        out = np.zeros((rel.shape[0], 2, 3))
        sign = np.where(labels == 1, 1.0, -1.0)
        out[:, 0, 2] = sign * dc
        out[:, 1, 2] = -sign * dc
        return out


class ConstantModel(ViewpointModel):
    """Viewpoint-independent model: one fixed score vector per class."""

    def __init__(self, means, sqrt_info):
        means = np.asarray(means, dtype=float)
        if means.ndim != 2 or means.shape[0] != means.shape[1]:
            raise ConfigurationError("constant model needs an M x M table of class means")
        super().__init__(means.shape[0], sqrt_info)
        self.means = means

    def _mean(self, labels, rel):
        return self.means[labels - 1]

    def mean_jacobian_batch(self, labels, rel, step=None):
        n = np.asarray(rel).reshape(-1, 3).shape[0]
        return np.zeros((n, self.num_classes, 3))


class LookupModel(ViewpointModel):
    """Grid model over relative yaw ``psi`` and a second angle ``theta``.

    Means are bilinearly interpolated between grid nodes (periodic in psi)
    and renormalized onto the simplex.  Planar poses carry no elevation, so
    ``theta`` is a fixed model attribute (``elevation_deg``).
    """

    def __init__(self, psi_deg, theta_deg, table, sqrt_info=None, elevation_deg: Optional[float] = None):
        table = np.asarray(table, dtype=float)
        m = table.shape[0]
        if sqrt_info is None:
            sqrt_info = np.eye(m) * SIMULATION_SQRT_INFO[0, 0] if m != 2 else SIMULATION_SQRT_INFO
        super().__init__(m, sqrt_info)
        self.psi_deg = np.asarray(psi_deg, dtype=float)
        self.theta_deg = np.asarray(theta_deg, dtype=float)
        # table: (class, psi, theta, M)
        self.table = table
        if elevation_deg is None:
            elevation_deg = float(0.5 * (self.theta_deg[0] + self.theta_deg[-1]))
        self.elevation_deg = float(elevation_deg)

    def _interp_axis(self, grid, q, periodic):
        n = grid.size
        if n == 1:
            z = np.zeros(q.shape, dtype=int)
            return z, z, np.zeros(q.shape)
        if periodic:
            q = np.mod(q - grid[0], 360.0) + grid[0]
        q = np.clip(q, grid[0], grid[-1])
        hi = np.clip(np.searchsorted(grid, q, side="right"), 1, n - 1)
        lo = hi - 1
        t = (q - grid[lo]) / (grid[hi] - grid[lo])
        return lo, hi, t

    def mean_at(self, labels, psi_deg, theta_deg) -> np.ndarray:
        labels = np.asarray(labels, dtype=int) - 1
        psi_deg = np.asarray(psi_deg, dtype=float)
        theta_deg = np.broadcast_to(np.asarray(theta_deg, dtype=float), psi_deg.shape)
        p0, p1, tp = self._interp_axis(self.psi_deg, psi_deg, periodic=True)
        t0, t1, tt = self._interp_axis(self.theta_deg, theta_deg, periodic=False)
        tab = self.table
        v = (
            tab[labels, p0, t0] * ((1 - tp) * (1 - tt))[:, None]
            + tab[labels, p1, t0] * (tp * (1 - tt))[:, None]
            + tab[labels, p0, t1] * ((1 - tp) * tt)[:, None]
            + tab[labels, p1, t1] * (tp * tt)[:, None]
        )
        v = np.clip(v, 0.0, None)
        return v / v.sum(axis=1, keepdims=True)

    def _mean(self, labels, rel):
        return self.mean_at(labels, np.degrees(rel[:, 2]), self.elevation_deg)


def predict(model: ViewpointModel, c: int, rel: Pose2):
    """Predicted score mean and covariance for class ``c`` at relative pose ``rel``."""
    mean = model.mean_batch([c], rel.as_array()[None, :])[0]
    return mean, model.covariance_matrix


def semantic_log_likelihood(model: ViewpointModel, z, c: int, robot: Pose2, obj: Pose2) -> float:
    rel = between(robot, obj)
    return float(model.log_likelihood_batch(np.asarray(z, float)[None, :], [c], rel.as_array()[None, :])[0])


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and renormalize; an all-zero vector maps to uniform."""
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    s = v.sum()
    if s <= 0.0:
        return np.full(v.shape, 1.0 / v.size)
    return v / s


def sample_semantic(model: ViewpointModel, c: int, rel: Pose2, rng: np.random.Generator) -> np.ndarray:
    mean, _ = predict(model, c, rel)
    # z = h + W^-1 eps has covariance (W'W)^-1
    noise = np.linalg.solve(model._sqrt_info, rng.standard_normal(model.num_classes))
    return project_to_simplex(mean + noise)


def load_lookup_model(path, sqrt_info=None, elevation_deg=None, tol: float = 1e-3) -> LookupModel:
    """Read a CSV grid with header ``class, psi_deg, theta_deg, p1..pM``."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if r and any(x.strip() for x in r)]
    except OSError as exc:
        raise LoadError(f"cannot read lookup grid {path}: {exc}") from exc
    except StopIteration:
        raise LoadError(f"lookup grid {path} is empty") from None
    if header[:3] != ["class", "psi_deg", "theta_deg"] or len(header) < 5:
        raise LoadError("lookup grid header must be: class, psi_deg, theta_deg, p1..pM")
    m = len(header) - 3
    if header[3:] != [f"p{i}" for i in range(1, m + 1)]:
        raise LoadError("probability columns must be named p1..pM")
    try:
        data = np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise LoadError(f"non-numeric entry in lookup grid: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != m + 3:
        raise LoadError("ragged rows in lookup grid")
    probs = data[:, 3:]
    if np.any(probs < -tol) or np.any(probs > 1 + tol) or np.any(np.abs(probs.sum(axis=1) - 1.0) > tol):
        raise LoadError("lookup grid rows must be probability vectors (tolerance 1e-3)")
    classes = np.unique(data[:, 0]).astype(int)
    if list(classes) != list(range(1, m + 1)):
        raise LoadError(f"lookup grid must define classes 1..{m}")
    psis = np.unique(data[:, 1])
    thetas = np.unique(data[:, 2])
    if psis[0] > -180.0 + 1e-9 or psis[-1] < 180.0 - 1e-9:
        raise LoadError("lookup grid must cover psi in [-180, 180] degrees")
    table = np.full((m, psis.size, thetas.size, m), np.nan)
    pi = {v: i for i, v in enumerate(psis)}
    ti = {v: i for i, v in enumerate(thetas)}
    for row in data:
        table[int(row[0]) - 1, pi[row[1]], ti[row[2]]] = row[3:]
    if np.isnan(table).any():
        raise LoadError("lookup grid is missing nodes (every class x psi x theta is required)")
    return LookupModel(psis, thetas, table, sqrt_info=sqrt_info, elevation_deg=elevation_deg)


def write_lookup_grid(path, model_fn, num_classes: int, psi_deg: Sequence[float], theta_deg: Sequence[float]) -> None:
    """Write a grid file by evaluating ``model_fn(c, psi_deg, theta_deg)``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "psi_deg", "theta_deg"] + [f"p{i}" for i in range(1, num_classes + 1)])
        for c in range(1, num_classes + 1):
            for p in psi_deg:
                for t in theta_deg:
                    w.writerow([c, p, t] + [f"{v:.12g}" for v in model_fn(c, p, t)])
