import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from hybrid_ddf.classifier import ConstantModel, SimulationModel
from hybrid_ddf.errors import ContractViolation
from hybrid_ddf.gaussian import GaussianDensity, object_key, robot_key
from hybrid_ddf.geometry import Pose2, between, compose
from hybrid_ddf.graph import FactorGraph, PriorFactor, optimize
from hybrid_ddf.hybrid import (
    ClassRealization,
    HybridBelief,
    Hypothesis,
    StepInputs,
    class_marginal,
    draw_eps,
    expand_for_new_objects,
    local_update,
    new_object_priors,
    pose_summary,
    prune,
    weak_object_prior,
    weight_log_integral,
)

ODOM_COV = np.diag([0.003, 0.003, 0.001])
GEO_COV = np.diag([0.1, 0.1, 0.01])
CONST = ConstantModel([[0.8, 0.2], [0.3, 0.7]], np.eye(2) * 3)


def start(m=2, prior=None):
    return HybridBelief.initial(1, Pose2(), num_classes=m, class_prior=prior)


def expand(hb, objs, prior=None):
    priors = {o: weak_object_prior(o, Pose2(2.0 + o, 0, 0)) for o in objs}
    return expand_for_new_objects(hb, objs, class_prior=prior, pose_priors=priors)


def step_inputs(objs=(), z=None, geo=True):
    geo_meas = tuple((o, Pose2(2.0 + o, 0, 0)) for o in objs) if geo else ()
    sem = tuple((o, np.asarray(z if z is not None else [0.6, 0.4])) for o in objs)
    return StepInputs(Pose2(0, 0, 0), ODOM_COV, geo_meas, GEO_COV, sem)


def assert_normalized(hb):
    assert math.fsum(hb.weights()) == pytest.approx(1.0, abs=1e-9)


# -- expand -------------------------------------------------------------------


def test_expand_empty_is_unchanged():
    hb = start()
    out = expand_for_new_objects(hb, [])
    assert len(out) == 1 and out.known_objects == ()


def test_expand_uniform():
    out = expand(start(), [1])
    np.testing.assert_allclose(sorted(out.weights()), [0.5, 0.5])


def test_expand_outer_product():
    hb = expand(start(), [1], prior=[0.7, 0.3])
    out = expand(hb, [2], prior=[0.9, 0.1])
    got = {h.realization: h.weight for h in out.hypotheses}
    expected = {
        ClassRealization.of({1: a, 2: b}): pa * pb
        for (a, pa), (b, pb) in itertools.product([(1, 0.7), (2, 0.3)], [(1, 0.9), (2, 0.1)])
    }
    assert set(got) == set(expected)
    for r, w in expected.items():
        assert got[r] == pytest.approx(w, abs=1e-12)
    np.testing.assert_allclose(class_marginal(out, 2), [0.9, 0.1], atol=1e-12)
    np.testing.assert_allclose(class_marginal(out, 1), [0.7, 0.3], atol=1e-12)


def test_expand_count_multiplies_by_m_power():
    hb = expand(start(m=3), [1, 2])
    assert len(hb) == 9
    assert len(expand(hb, [5])) == 27


def test_expand_duplicate_and_known():
    hb = expand(start(), [1])
    with pytest.raises(ContractViolation):
        expand(hb, [1])
    with pytest.raises(ContractViolation):
        expand(start(), [2, 2])


def test_expand_requires_pose_prior():
    with pytest.raises(ContractViolation):
        expand_for_new_objects(start(), [1])


# -- prune / marginal ----------------------------------------------------------


def with_weights(weights):
    hb = expand(start(m=len(weights)), [1])
    for h, w in zip(hb.hypotheses, weights):
        h.log_weight = math.log(w)
    return hb


def test_prune_example():
    out = prune(with_weights([0.6, 0.39, 0.01]), 0.05)
    np.testing.assert_allclose(out.weights(), [0.6 / 0.99, 0.39 / 0.99], atol=1e-12)


def test_prune_zero_threshold_and_single():
    hb = with_weights([0.6, 0.39, 0.01])
    assert len(prune(hb, 0.0)) == 3
    assert len(prune(start(), 0.99)) == 1


def test_prune_boundary_is_kept():
    out = prune(with_weights([0.5, 0.25, 0.25]), 0.5)
    assert len(out) == 3


def test_prune_invalid_ratio():
    with pytest.raises(ContractViolation):
        prune(start(), 1.0)
    with pytest.raises(ContractViolation):
        prune(start(), -0.1)


def test_class_marginal_examples():
    hb = with_weights([0.7, 0.3])
    np.testing.assert_allclose(class_marginal(hb, 1), [0.7, 0.3])
    single = prune(with_weights([0.999, 0.001]), 0.5)
    np.testing.assert_allclose(class_marginal(single, 1), [1.0, 0.0])
    with pytest.raises(ContractViolation):
        class_marginal(hb, 9)


# -- pose summary ---------------------------------------------------------------


def hypothesis_at(pose, w, label):
    g = FactorGraph({})
    g.add_factor(PriorFactor.from_covariance(robot_key(1, 0), pose, np.eye(3) * 0.1))
    return Hypothesis(ClassRealization.of({1: label}), g, optimize(g), math.log(w))


def test_pose_summary_examples():
    k = robot_key(1, 0)
    hb = start()
    hb.hypotheses = [hypothesis_at(Pose2(0, 0, 0), 0.5, 1), hypothesis_at(Pose2(2, 0, 0), 0.5, 2)]
    assert pose_summary(hb).mean[k].isclose(Pose2(1, 0, 0), 1e-12)
    hb.hypotheses = [
        hypothesis_at(Pose2(0, 0, 0.1), 0.2, 1),
        hypothesis_at(Pose2(1, 2, 0.2), 0.3, 2),
        hypothesis_at(Pose2(4, -1, 0.3), 0.5, 2),
    ]
    s = pose_summary(hb)
    assert s.mean[k].x == pytest.approx(0.3 + 2.0, abs=1e-12)
    assert s.mean[k].y == pytest.approx(0.6 - 0.5, abs=1e-12)
    th = math.atan2(0.2 * math.sin(0.1) + 0.3 * math.sin(0.2) + 0.5 * math.sin(0.3),
                    0.2 * math.cos(0.1) + 0.3 * math.cos(0.2) + 0.5 * math.cos(0.3))
    assert s.mean[k].theta == pytest.approx(th, abs=1e-12)
    np.testing.assert_allclose(s.marginal_covariances(k)[0], np.eye(3) * 0.1, atol=1e-12)


def test_pose_summary_circular_mean_across_pi():
    k = robot_key(1, 0)
    hb = start()
    hb.hypotheses = [hypothesis_at(Pose2(0, 0, math.pi - 0.1), 0.5, 1), hypothesis_at(Pose2(0, 0, -math.pi + 0.1), 0.5, 2)]
    assert abs(abs(pose_summary(hb).mean[k].theta) - math.pi) < 1e-9


# -- local update ----------------------------------------------------------------


def test_odometry_only_update():
    hb = with_weights([0.7, 0.3])
    inputs = StepInputs(Pose2(1, 0, 0), ODOM_COV)
    out = local_update(hb, inputs, CONST, rng=np.random.default_rng(0))
    np.testing.assert_allclose(out.weights(), [0.7, 0.3], atol=1e-12)
    assert out.step == 1
    cov = out.hypotheses[0].belief.marginal_covariance(robot_key(1, 1))
    c0 = np.diag([1e-4, 1e-4, 1e-5])
    expected = c0 + ODOM_COV + np.array([[0, 0, 0], [0, 1e-5, 1e-5], [0, 1e-5, 0]])
    np.testing.assert_allclose(cov, expected, atol=1e-9)


def test_update_unknown_object_is_contract_violation():
    with pytest.raises(ContractViolation):
        local_update(start(), step_inputs([1]), CONST, rng=np.random.default_rng(0))


def test_new_object_prior_requires_geometry():
    with pytest.raises(ContractViolation):
        new_object_priors(start(), step_inputs([1], geo=False))


def test_new_object_prior_is_first_observation_estimate():
    hb = HybridBelief.initial(1, Pose2(1, 1, math.pi / 2))
    inputs = StepInputs(Pose2(1, 0, 0), ODOM_COV, ((4, Pose2(2, 0, 0)),), GEO_COV)
    pri = new_object_priors(hb, inputs)
    assert Pose2.from_array(pri[4].points[0]).isclose(Pose2(1, 4, math.pi / 2), 1e-12)


def gauss_ll(z, mean, w):
    return multivariate_normal(mean, np.linalg.inv(w.T @ w)).logpdf(z)


def test_constant_model_matches_closed_form_bayes():
    hb = expand(start(), [1])
    z = np.array([0.62, 0.38])
    out = local_update(hb, step_inputs([1], z), CONST, rng=np.random.default_rng(1))
    ll = np.array([gauss_ll(z, CONST.means[c], CONST._sqrt_info) for c in range(2)])
    post = np.exp(ll - logsumexp(ll))
    np.testing.assert_allclose(class_marginal(out, 1), post, atol=1e-9)
    assert_normalized(out)


def test_brute_force_oracle_three_objects():
    objs = [1, 2, 3]
    prior = [0.6, 0.4]
    hb = expand(start(prior=prior), objs, prior=prior)
    rng = np.random.default_rng(7)
    zs = []
    for k in range(3):
        seen = objs[: k + 1]
        z = {o: np.clip(rng.normal([0.5, 0.5], 0.2), 0, 1) for o in seen}
        zs.append(z)
        inputs = StepInputs(
            Pose2(0, 0, 0), ODOM_COV, tuple((o, Pose2(2.0 + o, 0, 0)) for o in seen), GEO_COV,
            tuple((o, z[o]) for o in seen),
        )
        hb = local_update(hb, inputs, CONST, rng=rng)
        assert_normalized(hb)
    got = {h.realization: h.weight for h in hb.hypotheses}
    logs = {}
    for combo in itertools.product([1, 2], repeat=3):
        real = ClassRealization.of(dict(zip(objs, combo)))
        lp = sum(math.log(prior[c - 1]) for c in combo)
        for z in zs:
            lp += sum(gauss_ll(v, CONST.means[real[o] - 1], CONST._sqrt_info) for o, v in z.items())
        logs[real] = lp
    norm = logsumexp(list(logs.values()))
    for real, lp in logs.items():
        assert got[real] == pytest.approx(math.exp(lp - norm), abs=1e-9)


def test_ambiguous_viewpoint_leaves_ratio():
    hb = expand_for_new_objects(
        HybridBelief.initial(1, Pose2(), cov=np.diag([1e-6, 1e-6, 1e-8])),
        [1], class_prior=[0.7, 0.3], pose_priors={1: weak_object_prior(1, Pose2(2, 0, -math.pi / 2))},
    )
    tight = np.diag([1e-4, 1e-4, 1e-6])
    inputs = StepInputs(Pose2(), tight, ((1, Pose2(2, 0, -math.pi / 2)),), tight, ((1, np.array([0.9, 0.1])),))
    out = local_update(hb, inputs, SimulationModel(), rng=np.random.default_rng(0))
    np.testing.assert_allclose(class_marginal(out, 1), [0.7, 0.3], atol=1e-3)


def test_permutation_invariance():
    hb = expand(start(), [1, 2])
    a = ((1, np.array([0.7, 0.3])), (2, np.array([0.2, 0.8])))
    geo = ((1, Pose2(3, 0, 0)), (2, Pose2(4, 0, 0)))
    in1 = StepInputs(Pose2(), ODOM_COV, geo, GEO_COV, a)
    in2 = StepInputs(Pose2(), ODOM_COV, geo[::-1], GEO_COV, a[::-1])
    eps = draw_eps(np.random.default_rng(3), in1, 100)
    o1 = local_update(hb, in1, SimulationModel(), eps=eps)
    o2 = local_update(hb, in2, SimulationModel(), eps=eps)
    w1 = {h.realization: h.weight for h in o1.hypotheses}
    w2 = {h.realization: h.weight for h in o2.hypotheses}
    for r in w1:
        assert w1[r] == pytest.approx(w2[r], abs=1e-6)


def test_geometric_integral_matches_monte_carlo():
    """Analytic geometric evidence against brute-force sampling of the prior."""
    hb = expand_for_new_objects(
        HybridBelief.initial(1, Pose2(), cov=np.diag([0.01, 0.01, 0.001])),
        [1], pose_priors={1: GaussianDensity.from_prior(object_key(1), Pose2(2, 0, 0), np.diag([0.02, 0.02, 0.002]))},
    )
    h = hb.hypotheses[0]
    z = Pose2(2.1, 0.05, 0.02)
    inputs = StepInputs(Pose2(0.5, 0, 0), ODOM_COV, ((1, z),), GEO_COV)
    got = weight_log_integral(h.belief, h.realization, robot_key(1, 0), robot_key(1, 1), inputs, CONST, np.zeros((1, 6)))

    rng = np.random.default_rng(0)
    n = 200_000
    x0 = rng.multivariate_normal([0, 0, 0], np.diag([0.01, 0.01, 0.001]), n)
    lo = rng.multivariate_normal([2, 0, 0], np.diag([0.02, 0.02, 0.002]), n)
    w = rng.multivariate_normal([0, 0, 0], ODOM_COV, n)
    ll = np.empty(n)
    geo = multivariate_normal(np.zeros(3), GEO_COV)
    rs = np.empty((n, 3))
    for i in range(n):
        x1 = compose(Pose2.from_array(x0[i]), compose(Pose2(0.5, 0, 0), Pose2.from_array(w[i])))
        rs[i] = between(z, between(x1, Pose2.from_array(lo[i]))).as_array()
    ll = geo.logpdf(rs)
    mc = logsumexp(ll) - math.log(n)
    assert got == pytest.approx(mc, abs=0.02)
