"""Information-form Gaussian densities over named SE(2) variables.

A :class:`GaussianDensity` stores ``(info, vec)`` over the stacked tangent
vectors ``delta`` of its variables, where a variable's value is
``point ⊕ delta`` and ``point`` is its linearization point.  The density is
``exp(-0.5 delta' info delta + vec' delta)`` up to normalization.

The chart ``p ⊕ delta`` is affine in ``delta``, so re-expressing a density at
a different linearization point (:func:`transport`) is exact.  This is what
lets densities built by different robots be multiplied and divided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import ContractViolation, RelinearizationRequired, SamplingUnavailable
from .geometry import Pose2, between_arrays, compose_arrays

ROBOT = "robot"
OBJECT = "object"

# Linearization points closer than this are treated as identical.
RELINEARIZE_TOL = 1e-6


@dataclass(frozen=True, order=True)
class VariableKey:
    kind: str
    owner: int
    index: int

    def __str__(self):
        if self.kind == ROBOT:
            return f"x{self.owner}_{self.index}"
        return f"o{self.index}"

    @property
    def is_object(self) -> bool:
        return self.kind == OBJECT


def robot_key(robot: int, step: int) -> VariableKey:
    return VariableKey(ROBOT, int(robot), int(step))


def object_key(obj: int) -> VariableKey:
    return VariableKey(OBJECT, 0, int(obj))


def _rot_blocks(theta: np.ndarray) -> np.ndarray:
    """Per-variable tangent transport blocks ``blockdiag(R(theta), 1)``."""
    n = theta.shape[0]
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros((n, 3, 3))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s
    out[:, 1, 0] = s
    out[:, 1, 1] = c
    out[:, 2, 2] = 1.0
    return out


def _block_diag_apply_left(blocks: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """``blockdiag(blocks)' @ mat`` for ``mat`` with ``3n`` rows."""
    n = blocks.shape[0]
    m = mat.reshape(n, 3, -1)
    return np.einsum("nji,njk->nik", blocks, m).reshape(mat.shape)


class GaussianDensity:
    """Canonical-form Gaussian (or Gaussian factor) over pose variables."""

    __slots__ = ("keys", "info", "vec", "points", "_index")

    def __init__(self, keys: Sequence[VariableKey], info, vec, points):
        self.keys = tuple(keys)
        n = len(self.keys)
        self.info = np.asarray(info, dtype=float).reshape(3 * n, 3 * n)
        self.vec = np.asarray(vec, dtype=float).reshape(3 * n)
        self.points = np.asarray(points, dtype=float).reshape(n, 3)
        self._index = {k: i for i, k in enumerate(self.keys)}
        if len(self._index) != n:
            raise ContractViolation("duplicate variable keys in density")

    # construction -------------------------------------------------------
    @classmethod
    def empty(cls) -> "GaussianDensity":
        return cls((), np.zeros((0, 0)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_prior(cls, key: VariableKey, mean: Pose2, cov) -> "GaussianDensity":
        cov = np.asarray(cov, dtype=float)
        return cls((key,), np.linalg.inv(cov), np.zeros(3), mean.as_array()[None, :])

    @classmethod
    def from_moments(cls, keys, points, mean_delta, cov) -> "GaussianDensity":
        info = np.linalg.inv(np.asarray(cov, dtype=float))
        return cls(keys, info, info @ np.asarray(mean_delta, dtype=float), points)

    def copy(self) -> "GaussianDensity":
        return GaussianDensity(self.keys, self.info.copy(), self.vec.copy(), self.points.copy())

    # queries --------------------------------------------------------------
    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self._index

    def __repr__(self):
        return f"GaussianDensity({', '.join(map(str, self.keys))})"

    @property
    def dim(self) -> int:
        return 3 * len(self.keys)

    def index(self, key: VariableKey) -> int:
        return self._index[key]

    def slices(self, keys: Iterable[VariableKey]) -> np.ndarray:
        idx = [self._index[k] for k in keys]
        return (3 * np.asarray(idx, dtype=int)[:, None] + np.arange(3)).reshape(-1)

    def point(self, key: VariableKey) -> Pose2:
        return Pose2.from_array(self.points[self._index[key]])

    def linearization_points(self) -> dict:
        return {k: Pose2.from_array(p) for k, p in zip(self.keys, self.points)}

    def is_positive_definite(self) -> bool:
        if self.dim == 0:
            return True
        try:
            np.linalg.cholesky(self.info)
        except np.linalg.LinAlgError:
            return False
        return True

    def mean_delta(self) -> np.ndarray:
        if self.dim == 0:
            return np.zeros(0)
        try:
            return linalg.cho_solve(linalg.cho_factor(self.info), self.vec)
        except linalg.LinAlgError:
            return np.linalg.solve(self.info, self.vec)

    def mean_points(self) -> np.ndarray:
        """Mean as an ``(n, 3)`` array of poses."""
        if self.dim == 0:
            return np.zeros((0, 3))
        return compose_arrays(self.points, self.mean_delta().reshape(-1, 3))

    def mean(self) -> dict:
        return {k: Pose2.from_array(p) for k, p in zip(self.keys, self.mean_points())}

    def covariance(self) -> np.ndarray:
        """Covariance of the tangent vector at the linearization points."""
        if self.dim == 0:
            return np.zeros((0, 0))
        try:
            return linalg.cho_solve(linalg.cho_factor(self.info), np.eye(self.dim))
        except linalg.LinAlgError as exc:
            raise SamplingUnavailable("information matrix is not positive definite") from exc

    def marginal_covariance(self, key: VariableKey) -> np.ndarray:
        s = self.slices([key])
        return self.covariance()[np.ix_(s, s)]

    def recentered(self) -> "GaussianDensity":
        """Same density, linearized at its own mean (so ``vec == 0``)."""
        return transport(self, self.mean_points())


def transport(d: GaussianDensity, new_points) -> GaussianDensity:
    """Re-express ``d`` with linearization points ``new_points``.

    With ``delta_old = a + A delta_new`` (``a = between(old, new)``,
    ``A = blockdiag(R(a_theta), 1)``) the quadratic form maps to
    ``info' = A' info A`` and ``vec' = A' (vec - info a)``.
    """
    new_points = np.asarray(new_points, dtype=float).reshape(-1, 3)
    if d.dim == 0:
        return d
    a = between_arrays(d.points, new_points)
    blocks = _rot_blocks(a[:, 2])
    av = a.reshape(-1)
    vec = _block_diag_apply_left(blocks, (d.vec - d.info @ av)[:, None])[:, 0]
    tmp = _block_diag_apply_left(blocks, d.info)
    info = _block_diag_apply_left(blocks, tmp.T.copy()).T
    info = 0.5 * (info + info.T)
    return GaussianDensity(d.keys, info, vec, new_points.copy())


def _align(target_points: np.ndarray, other: GaussianDensity, keys, relinearize: bool):
    """Transport ``other`` so its shared variables use ``target_points``."""
    pts = other.points.copy()
    changed = False
    for i, k in enumerate(other.keys):
        if k in keys:
            tp = target_points[keys[k]]
            diff = between_arrays(pts[i], tp)
            if np.max(np.abs(diff)) > RELINEARIZE_TOL:
                if not relinearize:
                    raise RelinearizationRequired(
                        f"linearization points for {k} differ by {np.max(np.abs(diff)):.3g}"
                    )
                changed = True
            pts[i] = tp
    if changed or not np.array_equal(pts, other.points):
        return transport(other, pts)
    return other


def multiply(a: GaussianDensity, b: GaussianDensity, relinearize: bool = True) -> GaussianDensity:
    """Product of two densities; information adds on aligned blocks.

    ``b`` is transported onto ``a``'s linearization points for shared
    variables.  With ``relinearize=False`` a mismatch beyond
    :data:`RELINEARIZE_TOL` raises :class:`RelinearizationRequired` instead.
    """
    if b.dim == 0:
        return a.copy()
    if a.dim == 0:
        return b.copy()
    b = _align(a.points, b, a._index, relinearize)
    new_keys = [k for k in b.keys if k not in a._index]
    keys = a.keys + tuple(new_keys)
    n = len(keys)
    info = np.zeros((3 * n, 3 * n))
    vec = np.zeros(3 * n)
    info[: a.dim, : a.dim] = a.info
    vec[: a.dim] = a.vec
    points = np.vstack([a.points] + [b.points[b.index(k)][None, :] for k in new_keys]) if new_keys else a.points.copy()
    index = {k: i for i, k in enumerate(keys)}
    s = (3 * np.array([index[k] for k in b.keys])[:, None] + np.arange(3)).reshape(-1)
    info[np.ix_(s, s)] += b.info
    vec[s] += b.vec
    return GaussianDensity(keys, info, vec, points)


def divide(numerator: GaussianDensity, denominator: GaussianDensity, relinearize: bool = True) -> GaussianDensity:
    """Quotient factor; information subtracts on aligned blocks.

    The result may be indefinite: it is a factor, not a density.
    """
    missing = [k for k in denominator.keys if k not in numerator._index]
    if missing:
        raise ContractViolation(
            "denominator variables must be a subset of the numerator: missing "
            + ", ".join(map(str, missing))
        )
    if denominator.dim == 0:
        return numerator.copy()
    den = _align(numerator.points, denominator, numerator._index, relinearize)
    s = numerator.slices(den.keys)
    info = numerator.info.copy()
    vec = numerator.vec.copy()
    info[np.ix_(s, s)] -= den.info
    vec[s] -= den.vec
    return GaussianDensity(numerator.keys, info, vec, numerator.points.copy())


def marginalize(d: GaussianDensity, keep: Sequence[VariableKey]) -> GaussianDensity:
    """Schur-complement marginal over ``keep`` (in the given order)."""
    keep = list(keep)
    if not keep:
        raise ContractViolation("marginalize requires a non-empty keep set")
    unknown = [k for k in keep if k not in d._index]
    if unknown:
        raise ContractViolation("cannot keep unknown variables: " + ", ".join(map(str, unknown)))
    if len(set(keep)) != len(keep):
        raise ContractViolation("duplicate keys in keep set")
    keep_set = set(keep)
    drop = [k for k in d.keys if k not in keep_set]
    sk = d.slices(keep)
    pts = d.points[[d.index(k) for k in keep]]
    if not drop:
        return GaussianDensity(keep, d.info[np.ix_(sk, sk)], d.vec[sk], pts)
    sd = d.slices(drop)
    a = d.info[np.ix_(sk, sk)]
    b = d.info[np.ix_(sk, sd)]
    c = d.info[np.ix_(sd, sd)]
    rhs = np.hstack([b.T, d.vec[sd][:, None]])
    try:
        sol = linalg.cho_solve(linalg.cho_factor(c), rhs)
    except linalg.LinAlgError:
        sol = np.linalg.solve(c, rhs)
    info = a - b @ sol[:, :-1]
    vec = d.vec[sk] - b @ sol[:, -1]
    return GaussianDensity(keep, 0.5 * (info + info.T), vec, pts)


def evaluate_density(d: GaussianDensity, point: Mapping[VariableKey, Pose2], normalized: bool = True) -> float:
    """Log-density at ``point``, measured in the tangent of the linearization points.

    With ``normalized=False`` the unnormalized exponent
    ``-0.5 delta' info delta + vec' delta`` is returned, which is also
    defined for indefinite factors.
    """
    missing = [k for k in d.keys if k not in point]
    if missing:
        raise ContractViolation("point is missing variables: " + ", ".join(map(str, missing)))
    if d.dim == 0:
        return 0.0
    x = np.array([point[k].as_array() for k in d.keys])
    delta = between_arrays(d.points, x).reshape(-1)
    expo = -0.5 * delta @ d.info @ delta + d.vec @ delta
    if not normalized:
        return float(expo)
    try:
        cf = linalg.cho_factor(d.info)
    except linalg.LinAlgError as exc:
        raise SamplingUnavailable("cannot normalize an indefinite density") from exc
    mu = linalg.cho_solve(cf, d.vec)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(expo - 0.5 * d.vec @ mu + 0.5 * logdet - 0.5 * d.dim * math.log(2 * math.pi))


def sample_deltas(d: GaussianDensity, eps: np.ndarray) -> np.ndarray:
    """Map standard normal draws ``eps`` (``(n, dim)``) to tangent samples."""
    try:
        chol = np.linalg.cholesky(d.info)
    except np.linalg.LinAlgError as exc:
        raise SamplingUnavailable("density is not positive definite") from exc
    mu = linalg.cho_solve((chol, True), d.vec)
    # info = L L'  =>  cov = L'^-1 L^-1, so L'^-1 eps has covariance cov.
    return mu[None, :] + linalg.solve_triangular(chol, eps.T, lower=True, trans="T").T


def sample_array(d: GaussianDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` joint samples as an ``(n, len(d), 3)`` pose array."""
    eps = rng.standard_normal((n, d.dim))
    deltas = sample_deltas(d, eps).reshape(n, len(d), 3)
    return compose_arrays(d.points[None, :, :], deltas)


def sample(d: GaussianDensity, n: int, rng: np.random.Generator) -> list:
    """``n`` joint samples, each a mapping from key to :class:`Pose2`."""
    arr = sample_array(d, n, rng)
    return [{k: Pose2.from_array(p) for k, p in zip(d.keys, row)} for row in arr]
