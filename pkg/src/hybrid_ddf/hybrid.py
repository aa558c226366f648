"""Hybrid beliefs: one conditional Gaussian per class realization plus a weight.

Each :class:`Hypothesis` keeps its own factor graph (full robot trajectory
and the known objects, with class labels fixed by the realization) and the
Laplace approximation returned by the last smoothing pass.  Weights are kept
in log space and normalized with log-sum-exp.

The weight update integrates the step likelihood over the involved
variables (newest robot pose and the objects seen at this step).  The
geometric part is integrated in closed form after linearizing at the
propagated mean; the semantic part, whose mean depends nonlinearly on the
viewpoint, is averaged over samples from the resulting Gaussian.  Standard
normal draws are shared by all hypotheses of one update (common random
numbers), which keeps Monte-Carlo noise from reordering hypotheses.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import ContractViolation
from .gaussian import (
    GaussianDensity,
    VariableKey,
    marginalize,
    multiply,
    object_key,
    robot_key,
    sample_deltas,
)
from .geometry import Pose2, between_arrays, compose, compose_arrays
from .graph import (
    GEOMETRIC,
    ODOMETRY,
    BetweenFactor,
    FactorGraph,
    LinearFactor,
    PriorFactor,
    SemanticFactor,
    between_jacobians,
    linearize,
    optimize,
    relative_residual,
    sqrt_information,
)

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_SAMPLES = 100
DEFAULT_PRIOR_SIGMA = 1e3
DEFAULT_INITIAL_COV = np.diag([1e-4, 1e-4, 1e-5])


@dataclass(frozen=True, order=True)
class ClassRealization:
    """Class labels of a set of objects, stored sorted by object ID."""

    items: Tuple[Tuple[int, int], ...] = ()

    @classmethod
    def of(cls, mapping: Mapping[int, int]) -> "ClassRealization":
        return cls(tuple(sorted((int(o), int(c)) for o, c in mapping.items())))

    @property
    def objects(self) -> Tuple[int, ...]:
        return tuple(o for o, _ in self.items)

    def as_dict(self) -> Dict[int, int]:
        return dict(self.items)

    def __getitem__(self, obj: int) -> int:
        for o, c in self.items:
            if o == obj:
                return c
        raise KeyError(obj)

    def __len__(self):
        return len(self.items)

    def restrict(self, objects: Iterable[int]) -> "ClassRealization":
        keep = set(objects)
        return ClassRealization(tuple(p for p in self.items if p[0] in keep))

    def extend(self, mapping: Mapping[int, int]) -> "ClassRealization":
        d = self.as_dict()
        d.update(mapping)
        return ClassRealization.of(d)

    def __str__(self):
        return "{" + ", ".join(f"o{o}:c{c}" for o, c in self.items) + "}"


@dataclass
class Hypothesis:
    realization: ClassRealization
    graph: FactorGraph
    belief: GaussianDensity
    log_weight: float

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


@dataclass(frozen=True)
class StepInputs:
    """Local measurements of one robot at one step (data association given)."""

    odometry: Pose2
    odometry_cov: np.ndarray
    geometric: Tuple[Tuple[int, Pose2], ...] = ()
    geometric_cov: Optional[np.ndarray] = None
    semantic: Tuple[Tuple[int, np.ndarray], ...] = ()

    @property
    def observed_objects(self) -> Tuple[int, ...]:
        return tuple(sorted({o for o, _ in self.geometric} | {o for o, _ in self.semantic}))


@dataclass
class HybridBelief:
    robot: int
    num_classes: int
    hypotheses: List[Hypothesis]
    known_objects: Tuple[int, ...]
    class_prior: np.ndarray
    pose_priors: Dict[int, GaussianDensity] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def initial(
        cls,
        robot: int,
        pose: Pose2,
        cov=DEFAULT_INITIAL_COV,
        num_classes: int = 2,
        class_prior=None,
    ) -> "HybridBelief":
        """Single empty-realization hypothesis anchored by a prior on ``x_0``."""
        if class_prior is None:
            class_prior = np.full(num_classes, 1.0 / num_classes)
        class_prior = np.asarray(class_prior, dtype=float)
        if class_prior.shape != (num_classes,) or abs(class_prior.sum() - 1.0) > 1e-9 or np.any(class_prior <= 0):
            raise ContractViolation("class prior must be a strictly positive probability vector of length M")
        g = FactorGraph(realization={})
        g.add_factor(PriorFactor.from_covariance(robot_key(robot, 0), pose, cov))
        belief = optimize(g)
        hyp = Hypothesis(ClassRealization(), g, belief, 0.0)
        return cls(robot, num_classes, [hyp], (), class_prior, {}, 0)

    def copy(self) -> "HybridBelief":
        return HybridBelief(
            self.robot,
            self.num_classes,
            list(self.hypotheses),
            self.known_objects,
            self.class_prior,
            dict(self.pose_priors),
            self.step,
        )

    # queries ----------------------------------------------------------------
    @property
    def current_key(self) -> VariableKey:
        return robot_key(self.robot, self.step)

    def log_weights(self) -> np.ndarray:
        return np.array([h.log_weight for h in self.hypotheses])

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights())

    def best(self) -> Hypothesis:
        return self.hypotheses[int(np.argmax(self.log_weights()))]

    def by_realization(self) -> Dict[ClassRealization, Hypothesis]:
        return {h.realization: h for h in self.hypotheses}

    def __len__(self):
        return len(self.hypotheses)


def weak_object_prior(obj: int, mean: Pose2, sigma: float = DEFAULT_PRIOR_SIGMA) -> GaussianDensity:
    return GaussianDensity.from_prior(object_key(obj), mean, np.eye(3) * sigma**2)


def _normalize(hyps: List[Hypothesis]) -> List[Hypothesis]:
    lw = np.array([h.log_weight for h in hyps])
    lse = logsumexp(lw)
    for h, v in zip(hyps, lw - lse):
        h.log_weight = float(v)
    return hyps


# -- expansion ------------------------------------------------------------------


def expand_for_new_objects(
    hb: HybridBelief,
    new_ids: Sequence[int],
    class_prior=None,
    pose_priors: Optional[Mapping[int, GaussianDensity]] = None,
) -> HybridBelief:
    """Cartesian-product expansion of the realization set with new objects.

    Weights are multiplied by the class prior of each new label and every
    conditional belief by the (weak) pose prior of each new object.
    """
    new_ids = [int(o) for o in new_ids]
    if not new_ids:
        return hb.copy()
    if len(set(new_ids)) != len(new_ids):
        raise ContractViolation("duplicate object IDs in expansion")
    dup = sorted(set(new_ids) & set(hb.known_objects))
    if dup:
        raise ContractViolation(f"objects already known: {dup}")
    pose_priors = dict(pose_priors or {})
    missing = [o for o in new_ids if o not in pose_priors]
    if missing:
        raise ContractViolation(f"no pose prior supplied for new objects {missing}")
    prior = hb.class_prior if class_prior is None else np.asarray(class_prior, dtype=float)
    log_prior = np.log(prior)
    labels = range(1, hb.num_classes + 1)

    out: List[Hypothesis] = []
    for h in hb.hypotheses:
        g0 = h.graph.copy()
        belief0 = h.belief
        for o in new_ids:
            g0.add_factor(LinearFactor(pose_priors[o]))
            belief0 = multiply(belief0, pose_priors[o])
        for combo in itertools.product(labels, repeat=len(new_ids)):
            g = g0.copy()
            mapping = dict(zip(new_ids, combo))
            for o, c in mapping.items():
                g.set_realization_label(o, c)
            lw = h.log_weight + float(sum(log_prior[c - 1] for c in combo))
            out.append(Hypothesis(h.realization.extend(mapping), g, belief0, lw))
    res = hb.copy()
    res.hypotheses = _normalize(out)
    res.known_objects = tuple(sorted(set(hb.known_objects) | set(new_ids)))
    res.pose_priors.update(pose_priors)
    return res


def new_object_priors(hb: HybridBelief, inputs: StepInputs, sigma: float = DEFAULT_PRIOR_SIGMA) -> Dict[int, GaussianDensity]:
    """Weak priors for objects first seen in ``inputs``.

    Centered at the first-observation estimate ``x_{k-1} ⊕ u ⊕ z`` using the
    most probable hypothesis.
    """
    best = hb.best()
    x_prev = best.graph.value(hb.current_key)
    x_new = compose(x_prev, inputs.odometry)
    out = {}
    for o, z in inputs.geometric:
        if o not in hb.known_objects and o not in out:
            out[o] = weak_object_prior(o, compose(x_new, z), sigma)
    unplaced = [o for o in inputs.observed_objects if o not in hb.known_objects and o not in out]
    if unplaced:
        raise ContractViolation(f"objects {unplaced} first seen without a geometric measurement")
    return out


# -- the weight integral ------------------------------------------------------


def _propagated_marginal(belief: GaussianDensity, prev: VariableKey, new: VariableKey, objs, odom: Pose2, odom_w) -> GaussianDensity:
    """``∫ b_{k-1} M_k`` marginal over ``[x_k] + objs``, linearized at its mean."""
    m = marginalize(belief, [prev] + [object_key(o) for o in objs]).recentered()
    g = FactorGraph()
    g.add_factor(LinearFactor(m))
    g.add_factor(BetweenFactor(prev, new, odom, odom_w, ODOMETRY))
    hess, grad, _ = linearize(g)
    joint = GaussianDensity(g.keys, 0.5 * (hess + hess.T), -grad, g.value_array())
    return marginalize(joint, [new] + [object_key(o) for o in objs])


def weight_log_integral(
    belief: GaussianDensity,
    realization: ClassRealization,
    prev: VariableKey,
    new: VariableKey,
    inputs: StepInputs,
    model,
    eps: np.ndarray,
) -> float:
    """``log ∫ L_k(x_k, X_inv; C) p(x_k, X_inv) dX`` for one hypothesis.

    ``belief`` is the (possibly externally updated) previous belief; the
    propagated marginal is formed here.  ``eps`` holds the standard normal
    draws, one row per sample, ``3 * (1 + |involved objects|)`` columns.
    """
    objs = inputs.observed_objects
    if not objs:
        return 0.0
    odom_w = sqrt_information(inputs.odometry_cov)
    prop = _propagated_marginal(belief, prev, new, objs, inputs.odometry, odom_w)
    pts = prop.points
    col = {o: i + 1 for i, o in enumerate(objs)}
    dim = prop.dim
    log_z = 0.0
    post = prop
    if inputs.geometric:
        geo_w = sqrt_information(inputs.geometric_cov)
        m = len(inputs.geometric)
        oi = np.array([col[o] for o, _ in inputs.geometric])
        zs = np.array([z.as_array() for _, z in inputs.geometric])
        e, ja, jb = between_jacobians(np.repeat(pts[:1], m, axis=0), pts[oi])
        r, dr = relative_residual(e, zs)
        r0 = (r @ geo_w.T).reshape(-1)
        jac = np.zeros((3 * m, dim))
        for i in range(m):
            rows = slice(3 * i, 3 * i + 3)
            jac[rows, 0:3] = geo_w @ dr[i] @ ja[i]
            jac[rows, 3 * oi[i] : 3 * oi[i] + 3] += geo_w @ dr[i] @ jb[i]
        # prop is centered up to round-off; keep its mean anyway
        r_mu = r0 + jac @ prop.mean_delta()
        cov = prop.covariance()
        s = np.eye(3 * m) + jac @ cov @ jac.T
        cf = linalg.cho_factor(s)
        logdet_s = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        quad = float(r_mu @ linalg.cho_solve(cf, r_mu))
        log_det_w = float(np.log(abs(np.linalg.det(geo_w))))
        log_z = m * (log_det_w - 1.5 * LOG_2PI) - 0.5 * logdet_s - 0.5 * quad
        # Residual r(d) ≈ r0 + J d with d measured from the (mean) points.
        post = GaussianDensity(prop.keys, prop.info + jac.T @ jac, prop.vec - jac.T @ r0, pts)
    if not inputs.semantic:
        return log_z
    if eps.shape[1] != dim:
        raise ContractViolation(f"sample draws have {eps.shape[1]} columns, expected {dim}")
    n = eps.shape[0]
    poses = compose_arrays(pts[None, :, :], sample_deltas(post, eps).reshape(n, len(objs) + 1, 3))
    ll = np.zeros(n)
    for o, z in inputs.semantic:
        rel = between_arrays(poses[:, 0], poses[:, col[o]])
        zz = np.broadcast_to(np.asarray(z, dtype=float), (n, model.num_classes))
        ll += model.log_likelihood_batch(zz, np.full(n, realization[o]), rel)
    return log_z + float(logsumexp(ll) - math.log(n))


# -- updates ------------------------------------------------------------------


def involved_dim(inputs: StepInputs) -> int:
    return 3 * (1 + len(inputs.observed_objects))


def draw_eps(rng: np.random.Generator, inputs: StepInputs, n_samples: int) -> np.ndarray:
    return rng.standard_normal((n_samples, involved_dim(inputs)))


def _add_step_factors(g: FactorGraph, prev, new, inputs: StepInputs, model) -> None:
    g.add_factor(BetweenFactor(prev, new, inputs.odometry, sqrt_information(inputs.odometry_cov), ODOMETRY))
    if inputs.geometric:
        geo_w = sqrt_information(inputs.geometric_cov)
        for o, z in inputs.geometric:
            okey = object_key(o)
            f = BetweenFactor(new, okey, z, geo_w, GEOMETRIC)
            g.add_factor(f)
    for o, z in inputs.semantic:
        g.add_factor(SemanticFactor(new, object_key(o), np.asarray(z, dtype=float), model))


def update(
    hb: HybridBelief,
    inputs: StepInputs,
    model,
    rng: Optional[np.random.Generator] = None,
    n_samples: int = DEFAULT_SAMPLES,
    eps: Optional[np.ndarray] = None,
    ext=None,
    max_iters: int = 100,
    tol: float = 1e-9,
) -> HybridBelief:
    """Shared body of the local and distributed updates.

    ``ext`` maps a realization to ``(continuous factor or None, log discrete
    factor)``; ``None`` means no external information.
    """
    unknown = [o for o in inputs.observed_objects if o not in hb.known_objects]
    if unknown:
        raise ContractViolation(f"measurements reference unknown objects {unknown}; expand first")
    if eps is None:
        if rng is None:
            raise ContractViolation("either rng or eps must be supplied")
        eps = draw_eps(rng, inputs, n_samples)
    prev = hb.current_key
    new = robot_key(hb.robot, hb.step + 1)

    out: List[Hypothesis] = []
    for h in hb.hypotheses:
        g = h.graph.copy()
        belief = h.belief
        lw = h.log_weight
        if ext is not None:
            factor, log_phi = ext(h.realization)
            lw += log_phi
            if factor is not None and factor.dim:
                g.add_factor(LinearFactor(factor))
                belief = multiply(belief, factor)
        lw += weight_log_integral(belief, h.realization, prev, new, inputs, model, eps)
        _add_step_factors(g, prev, new, inputs, model)
        post = optimize(g, max_iters=max_iters, tol=tol)
        out.append(Hypothesis(h.realization, g, post, lw))
    res = hb.copy()
    res.hypotheses = _normalize(out)
    res.step = hb.step + 1
    return res


def local_update(hb, inputs: StepInputs, model, rng=None, n_samples=DEFAULT_SAMPLES, eps=None, **kw) -> HybridBelief:
    """Local-information update (odometry, geometric and semantic factors)."""
    return update(hb, inputs, model, rng=rng, n_samples=n_samples, eps=eps, **kw)


def prune(hb: HybridBelief, ratio_threshold: float) -> HybridBelief:
    """Drop hypotheses whose weight is below ``ratio_threshold`` times the max."""
    if not 0.0 <= ratio_threshold < 1.0:
        raise ContractViolation("prune ratio must lie in [0, 1)")
    res = hb.copy()
    if ratio_threshold == 0.0 or len(hb.hypotheses) <= 1:
        return res
    lw = hb.log_weights()
    cut = math.log(ratio_threshold) + lw.max()
    res.hypotheses = _normalize(
        [Hypothesis(h.realization, h.graph, h.belief, h.log_weight) for h, v in zip(hb.hypotheses, lw) if v >= cut]
    )
    return res


def class_marginal(hb: HybridBelief, obj: int) -> np.ndarray:
    if obj not in hb.known_objects:
        raise ContractViolation(f"object {obj} is not known")
    p = np.zeros(hb.num_classes)
    for h, w in zip(hb.hypotheses, hb.weights()):
        p[h.realization[obj] - 1] += w
    return p / p.sum()


@dataclass
class PoseSummary:
    """Weighted means over hypotheses plus per-hypothesis estimates."""

    keys: Tuple[VariableKey, ...]
    mean: Dict[VariableKey, Pose2]
    weights: np.ndarray
    hypothesis_means: List[Dict[VariableKey, Pose2]]
    beliefs: List[GaussianDensity]

    def marginal_covariances(self, key: VariableKey) -> List[np.ndarray]:
        return [b.marginal_covariance(key) for b in self.beliefs]


def pose_summary(hb: HybridBelief) -> PoseSummary:
    if not hb.hypotheses:
        raise ContractViolation("empty hybrid belief")
    w = hb.weights()
    w = w / w.sum()
    keys = hb.hypotheses[0].graph.keys
    arrs = np.stack([np.array([h.graph.value(k).as_array() for k in keys]) for h in hb.hypotheses])
    xy = np.einsum("h,hkd->kd", w, arrs[:, :, :2])
    th = np.arctan2(np.einsum("h,hk->k", w, np.sin(arrs[:, :, 2])), np.einsum("h,hk->k", w, np.cos(arrs[:, :, 2])))
    mean = {k: Pose2(xy[i, 0], xy[i, 1], th[i]) for i, k in enumerate(keys)}
    hmeans = [{k: Pose2.from_array(a[i]) for i, k in enumerate(keys)} for a in arrs]
    return PoseSummary(tuple(keys), mean, w, hmeans, [h.belief for h in hb.hypotheses])
