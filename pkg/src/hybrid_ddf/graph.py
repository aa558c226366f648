"""Nonlinear factor graphs over SE(2) variables and Gauss-Newton smoothing.

Factors are small frozen records.  Linearization is vectorized per factor
kind; packed arrays are cached and extended incrementally because graphs
only ever grow.  Linear (information-form) factors are accumulated into a
single :class:`~hybrid_ddf.gaussian.GaussianDensity`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
from scipy import linalg

from .errors import ContractViolation, UnderConstrainedError
from .gaussian import GaussianDensity, VariableKey, _block_diag_apply_left, _rot_blocks, multiply
from .geometry import Pose2, between_arrays, compose, compose_arrays, wrap_angles

PRIOR = "prior"
ODOMETRY = "odometry"
GEOMETRIC = "geometric-observation"
SEMANTIC = "semantic-observation"
EXTERNAL = "external-marginal"

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-9


def sqrt_information(cov) -> np.ndarray:
    """Upper-triangular ``W`` with ``W' W = inv(cov)``."""
    cov = np.asarray(cov, dtype=float)
    info = np.linalg.inv(cov)
    return np.linalg.cholesky(info).T


@dataclass(frozen=True, eq=False)
class PriorFactor:
    key: VariableKey
    mean: Pose2
    sqrt_info: np.ndarray
    kind: str = PRIOR

    @classmethod
    def from_covariance(cls, key, mean, cov):
        return cls(key, mean, sqrt_information(cov))

    @property
    def keys(self):
        return (self.key,)


@dataclass(frozen=True, eq=False)
class BetweenFactor:
    """Relative-pose factor ``between(a, b) ≈ measured`` (odometry or geometric)."""

    key_a: VariableKey
    key_b: VariableKey
    measured: Pose2
    sqrt_info: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        if self.kind not in (ODOMETRY, GEOMETRIC):
            raise ContractViolation(f"invalid between-factor kind {self.kind!r}")
        w = np.asarray(self.sqrt_info, dtype=float)
        # Full relative-pose measurements must constrain all three dofs.
        if w.shape != (3, 3) or np.linalg.matrix_rank(w) < 3:
            raise ContractViolation("relative-pose factor needs a full-rank 3x3 noise model")

    @classmethod
    def from_covariance(cls, key_a, key_b, measured, cov, kind=ODOMETRY):
        return cls(key_a, key_b, measured, sqrt_information(cov), kind)

    @property
    def keys(self):
        return (self.key_a, self.key_b)


@dataclass(frozen=True, eq=False)
class SemanticFactor:
    """Classifier-score factor for one detection under a fixed object class.

    ``label`` may be left ``None``; :meth:`FactorGraph.add_factor` fills it
    from the graph's class realization.
    """

    robot: VariableKey
    obj: VariableKey
    z: np.ndarray
    model: object
    label: Optional[int] = None
    kind: str = SEMANTIC

    @property
    def keys(self):
        return (self.robot, self.obj)


@dataclass(frozen=True, eq=False)
class LinearFactor:
    """A fixed information-form factor, e.g. an external marginal ratio."""

    density: GaussianDensity
    kind: str = EXTERNAL

    @property
    def keys(self):
        return self.density.keys


@dataclass
class _Pack:
    """Packed arrays for the first ``count`` factors of a graph."""

    count: int = 0
    prior_i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    prior_m: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    prior_w: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    btw_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    btw_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    btw_z: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    btw_w: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    # semantic factors grouped by model identity: id -> (model, r, o, z, label)
    sem: dict = field(default_factory=dict)


class FactorGraph:
    """Growing factor graph with current estimates for every variable."""

    def __init__(self, realization: Optional[Mapping[int, int]] = None):
        self.factors: list = []
        self.realization = dict(realization) if realization is not None else None
        self._keys: list = []
        self._index: dict = {}
        self._x = np.zeros((0, 3))
        self.linear = GaussianDensity.empty()
        self._pack = _Pack()

    def copy(self) -> "FactorGraph":
        g = FactorGraph.__new__(FactorGraph)
        g.factors = list(self.factors)
        g.realization = dict(self.realization) if self.realization is not None else None
        g._keys = list(self._keys)
        g._index = dict(self._index)
        g._x = self._x.copy()
        g.linear = self.linear
        g._pack = replace(self._pack, sem=dict(self._pack.sem))
        return g

    # variables ----------------------------------------------------------
    @property
    def keys(self) -> list:
        return list(self._keys)

    @property
    def values(self) -> dict:
        return {k: Pose2.from_array(self._x[i]) for i, k in enumerate(self._keys)}

    def __contains__(self, key) -> bool:
        return key in self._index

    def value(self, key: VariableKey) -> Pose2:
        return Pose2.from_array(self._x[self._index[key]])

    def value_array(self) -> np.ndarray:
        return self._x.copy()

    def set_values(self, x: np.ndarray) -> None:
        self._x = np.asarray(x, dtype=float).reshape(len(self._keys), 3).copy()

    def insert(self, key: VariableKey, value: Pose2) -> None:
        if key in self._index:
            raise ContractViolation(f"variable {key} already exists")
        self._index[key] = len(self._keys)
        self._keys.append(key)
        self._x = np.vstack([self._x, value.as_array()[None, :]])

    def set_realization_label(self, obj_id: int, label: int) -> None:
        if self.realization is None:
            self.realization = {}
        self.realization[int(obj_id)] = int(label)

    # factors ------------------------------------------------------------
    def add_factor(self, f, initial: Optional[Mapping[VariableKey, Pose2]] = None) -> "FactorGraph":
        """Append ``f``; absent variables are created from ``initial`` or inferred.

        A missing endpoint of a relative-pose factor is initialized by
        composing the existing endpoint with the measurement; a missing
        prior variable starts at the prior mean.
        """
        initial = initial or {}
        if isinstance(f, SemanticFactor):
            f = self._resolve_label(f)
        for k in f.keys:
            if k in self._index:
                continue
            if k in initial:
                self.insert(k, initial[k])
            elif isinstance(f, PriorFactor):
                self.insert(k, f.mean)
            elif isinstance(f, BetweenFactor) and k == f.key_b and f.key_a in self._index:
                self.insert(k, compose(self.value(f.key_a), f.measured))
            elif isinstance(f, BetweenFactor) and k == f.key_a and f.key_b in self._index:
                self.insert(k, compose(self.value(f.key_b), f.measured.inverse()))
            elif isinstance(f, LinearFactor):
                self.insert(k, f.density.point(k))
            else:
                raise ContractViolation(f"factor references unknown variable {k} and no initial guess was given")
        if isinstance(f, LinearFactor):
            self.linear = multiply(self.linear, f.density)
        self.factors.append(f)
        return self

    def _resolve_label(self, f: SemanticFactor) -> SemanticFactor:
        obj_id = f.obj.index
        fixed = None if self.realization is None else self.realization.get(obj_id)
        if fixed is None:
            raise ContractViolation(f"semantic factor on object {obj_id} whose class is not fixed in this hypothesis")
        if f.label is not None and f.label != fixed:
            raise ContractViolation(
                f"semantic factor label {f.label} disagrees with hypothesis class {fixed} for object {obj_id}"
            )
        if f.label is None:
            f = replace(f, label=fixed)
        return f

    def _packed(self) -> _Pack:
        pack = self._pack
        if pack.count == len(self.factors):
            return pack
        new = self.factors[pack.count :]
        pri = [f for f in new if isinstance(f, PriorFactor)]
        btw = [f for f in new if isinstance(f, BetweenFactor)]
        sem = [f for f in new if isinstance(f, SemanticFactor)]
        idx = self._index
        out = replace(pack, count=len(self.factors), sem=dict(pack.sem))
        if pri:
            out.prior_i = np.concatenate([pack.prior_i, [idx[f.key] for f in pri]]).astype(int)
            out.prior_m = np.vstack([pack.prior_m, [f.mean.as_array() for f in pri]])
            out.prior_w = np.concatenate([pack.prior_w, np.stack([f.sqrt_info for f in pri])])
        if btw:
            out.btw_a = np.concatenate([pack.btw_a, [idx[f.key_a] for f in btw]]).astype(int)
            out.btw_b = np.concatenate([pack.btw_b, [idx[f.key_b] for f in btw]]).astype(int)
            out.btw_z = np.vstack([pack.btw_z, [f.measured.as_array() for f in btw]])
            out.btw_w = np.concatenate([pack.btw_w, np.stack([f.sqrt_info for f in btw])])
        for f in sem:
            mid = id(f.model)
            model, r, o, z, lab = out.sem.get(mid, (f.model, np.zeros(0, int), np.zeros(0, int), None, np.zeros(0, int)))
            zf = np.asarray(f.z, dtype=float)[None, :]
            out.sem[mid] = (
                model,
                np.append(r, idx[f.robot]),
                np.append(o, idx[f.obj]),
                zf if z is None else np.vstack([z, zf]),
                np.append(lab, int(f.label)),
            )
        self._pack = out
        return out


def add_factor(g: FactorGraph, f, initial=None) -> FactorGraph:
    return g.add_factor(f, initial)


# -- linearization ----------------------------------------------------------


def between_jacobians(xa: np.ndarray, xb: np.ndarray):
    """``e = between(xa, xb)`` and its Jacobians w.r.t. body-frame perturbations."""
    e = between_arrays(xa, xb)
    n = e.shape[0]
    ja = np.zeros((n, 3, 3))
    ja[:, 0, 0] = -1.0
    ja[:, 1, 1] = -1.0
    ja[:, 0, 2] = e[:, 1]
    ja[:, 1, 2] = -e[:, 0]
    ja[:, 2, 2] = -1.0
    jb = _rot_blocks(e[:, 2])
    return e, ja, jb


def relative_residual(e: np.ndarray, z: np.ndarray):
    """Residual ``between(z, e)`` and its Jacobian w.r.t. ``e``."""
    cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
    dx = e[:, 0] - z[:, 0]
    dy = e[:, 1] - z[:, 1]
    r = np.empty_like(e)
    r[:, 0] = cz * dx + sz * dy
    r[:, 1] = -sz * dx + cz * dy
    r[:, 2] = wrap_angles(e[:, 2] - z[:, 2])
    dr = np.zeros((e.shape[0], 3, 3))
    dr[:, 0, 0] = cz
    dr[:, 0, 1] = sz
    dr[:, 1, 0] = -sz
    dr[:, 1, 1] = cz
    dr[:, 2, 2] = 1.0
    return r, dr


def semantic_residuals(model, labels, rel: np.ndarray, z: np.ndarray):
    """Whitened residual ``W (z - h)`` and its Jacobian ``-W dh/d rel``."""
    h = model.mean_batch(labels, rel)
    w = model.sqrt_info_batch(labels, rel)
    r = np.einsum("nij,nj->ni", w, z - h)
    jac = -np.einsum("nij,njk->nik", w, model.mean_jacobian_batch(labels, rel))
    return r, jac


def _scatter(hess, grad, cols, jac, res):
    """Accumulate ``J'J`` and ``J'r`` for factors with column indices ``cols``."""
    dim = hess.shape[0]
    jtj = np.einsum("nri,nrj->nij", jac, jac)
    jtr = np.einsum("nri,nr->ni", jac, res)
    flat = (cols[:, :, None] * dim + cols[:, None, :]).reshape(-1)
    hess += np.bincount(flat, weights=jtj.reshape(-1), minlength=dim * dim).reshape(dim, dim)
    grad += np.bincount(cols.reshape(-1), weights=jtr.reshape(-1), minlength=dim)


def _cols(*indices):
    return (3 * np.stack(indices, axis=1)[:, :, None] + np.arange(3)).reshape(len(indices[0]), -1)


def linearize(g: FactorGraph, x: Optional[np.ndarray] = None):
    """Gauss-Newton system ``(H, grad, cost)`` at ``x`` (default: current values)."""
    x = g._x if x is None else x
    pack = g._packed()
    dim = 3 * len(g._keys)
    hess = np.zeros((dim, dim))
    grad = np.zeros(dim)
    cost = 0.0

    if pack.prior_i.size:
        xi = x[pack.prior_i]
        r, _ = relative_residual(xi, pack.prior_m)
        # d between(m, x ⊕ d) = blockdiag(R(x_theta - m_theta), 1) d
        jr = _rot_blocks(wrap_angles(xi[:, 2] - pack.prior_m[:, 2]))
        wr = np.einsum("nij,nj->ni", pack.prior_w, r)
        wj = np.einsum("nij,njk->nik", pack.prior_w, jr)
        _scatter(hess, grad, _cols(pack.prior_i), wj, wr)
        cost += 0.5 * float(np.sum(wr * wr))

    if pack.btw_a.size:
        e, ja, jb = between_jacobians(x[pack.btw_a], x[pack.btw_b])
        r, dr = relative_residual(e, pack.btw_z)
        jac = np.concatenate([dr @ ja, dr @ jb], axis=2)
        wr = np.einsum("nij,nj->ni", pack.btw_w, r)
        wj = np.einsum("nij,njk->nik", pack.btw_w, jac)
        _scatter(hess, grad, _cols(pack.btw_a, pack.btw_b), wj, wr)
        cost += 0.5 * float(np.sum(wr * wr))

    for model, ri, oi, zs, labels in pack.sem.values():
        e, ja, jb = between_jacobians(x[ri], x[oi])
        wr, de = semantic_residuals(model, labels, e, zs)
        jac = np.concatenate([de @ ja, de @ jb], axis=2)
        _scatter(hess, grad, _cols(ri, oi), jac, wr)
        cost += 0.5 * float(np.sum(wr * wr))

    lin = g.linear
    if lin.dim:
        idx = np.array([g._index[k] for k in lin.keys])
        a = between_arrays(lin.points, x[idx])
        blocks = _rot_blocks(a[:, 2])
        av = a.reshape(-1)
        s = (3 * idx[:, None] + np.arange(3)).reshape(-1)
        # A' info A and A' (info a - vec) with A = blockdiag(blocks)
        tmp = _block_diag_apply_left(blocks, lin.info)
        hess[np.ix_(s, s)] += _block_diag_apply_left(blocks, tmp.T.copy()).T
        grad[s] += _block_diag_apply_left(blocks, (lin.info @ av - lin.vec)[:, None])[:, 0]
        cost += float(0.5 * av @ lin.info @ av - lin.vec @ av)

    return hess, grad, cost


def _unconstrained_keys(g: FactorGraph, hess: np.ndarray) -> list:
    w, v = np.linalg.eigh(hess)
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    null = v[:, w <= 1e-10 * scale]
    if null.size == 0:
        return []
    weight = np.sum(null.reshape(len(g._keys), 3, -1) ** 2, axis=(1, 2))
    return [k for k, wk in zip(g._keys, weight) if wk > 1e-6]


def optimize(g: FactorGraph, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> GaussianDensity:
    """Gauss-Newton MAP estimate and its Laplace approximation.

    The graph's values are updated in place (warm start for later calls).
    The returned density is linearized at the final estimate with
    ``info = J'WJ`` and ``vec = -grad``, so its mean is the last
    Gauss-Newton iterate.
    """
    if not g._keys:
        return GaussianDensity.empty()
    x = g._x.copy()
    for _ in range(max(1, max_iters)):
        hess, grad, _ = linearize(g, x)
        try:
            cf = linalg.cho_factor(hess)
        except linalg.LinAlgError:
            raise UnderConstrainedError(_unconstrained_keys(g, hess)) from None
        step = -linalg.cho_solve(cf, grad)
        if not np.all(np.isfinite(step)):
            raise UnderConstrainedError(_unconstrained_keys(g, hess))
        if np.linalg.norm(step) < tol:
            break
        x = compose_arrays(x, step.reshape(-1, 3))
    else:
        # out of iterations: report the system at the last iterate
        hess, grad, _ = linearize(g, x)
    g._x = x
    return GaussianDensity(g._keys, 0.5 * (hess + hess.T), -grad, x.copy())
