import math

import numpy as np
import pytest

from hybrid_ddf.classifier import (
    SIMULATION_SQRT_INFO,
    ConstantModel,
    SimulationModel,
    load_lookup_model,
    predict,
    project_to_simplex,
    sample_semantic,
    semantic_log_likelihood,
    write_lookup_grid,
)
from hybrid_ddf.errors import ConfigurationError, ContractViolation, LoadError
from hybrid_ddf.geometry import Pose2

SIM = SimulationModel()


def rel(deg):
    return Pose2(2.0, 0.0, math.radians(deg))


@pytest.mark.parametrize(
    "c, deg, expected",
    [(1, 90, [1.0, 0.0]), (2, 90, [0.0, 1.0]), (1, -90, [0.5, 0.5]), (2, -90, [0.5, 0.5]), (1, 0, [0.75, 0.25])],
)
def test_simulation_means(c, deg, expected):
    mean, _ = predict(SIM, c, rel(deg))
    np.testing.assert_allclose(mean, expected, atol=1e-12)


def test_covariance_from_sqrt_info():
    r = SIMULATION_SQRT_INFO
    np.testing.assert_allclose(SIM.covariance_matrix, np.linalg.inv(r.T @ r), atol=1e-14)


def test_aliasing_equal_likelihood():
    z = np.array([0.4, 0.6])
    robot, obj = Pose2(0, 0, 0), Pose2(2, 0, -math.pi / 2)
    assert semantic_log_likelihood(SIM, z, 1, robot, obj) == pytest.approx(
        semantic_log_likelihood(SIM, z, 2, robot, obj), abs=1e-12
    )


def test_class_symmetry():
    m1, _ = predict(SIM, 1, rel(33))
    m2, _ = predict(SIM, 2, rel(33))
    np.testing.assert_allclose(m1, m2[::-1], atol=1e-15)


def test_mean_on_simplex_everywhere():
    psi = np.linspace(-math.pi, math.pi, 101)
    r = np.column_stack([np.ones_like(psi), np.zeros_like(psi), psi])
    for c in (1, 2):
        m = SIM.mean_batch(np.full(psi.size, c), r)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
        assert m.min() >= -1e-12


def test_analytic_jacobian_matches_finite_differences():
    r = np.array([[1.0, 0.5, 0.3], [2.0, -1.0, -2.5]])
    lab = np.array([1, 2])
    jac = SIM.mean_jacobian_batch(lab, r)
    h = 1e-6
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        fd = (SIM.mean_batch(lab, r + d) - SIM.mean_batch(lab, r - d)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, j], fd, atol=1e-8)


def test_log_likelihood_gaussian_oracle():
    z = np.array([0.3, 0.7])
    mean, cov = predict(SIM, 1, rel(20))
    d = z - mean
    expected = -0.5 * d @ np.linalg.solve(cov, d) - 0.5 * math.log(np.linalg.det(2 * math.pi * cov))
    got = semantic_log_likelihood(SIM, z, 1, Pose2(), rel(20))
    assert got == pytest.approx(expected, abs=1e-12)


def test_invalid_class():
    with pytest.raises(ContractViolation):
        predict(SIM, 3, rel(0))
    with pytest.raises(ContractViolation):
        predict(SIM, 0, rel(0))


def test_project_to_simplex():
    np.testing.assert_allclose(project_to_simplex(np.array([1.2, -0.2])), [1.0, 0.0])
    np.testing.assert_allclose(project_to_simplex(np.array([-1.0, -2.0])), [0.5, 0.5])
    np.testing.assert_allclose(project_to_simplex(np.array([0.2, 0.2])), [0.5, 0.5])


def test_sample_semantic_on_simplex_and_deterministic():
    a = [sample_semantic(SIM, 1, rel(10), np.random.default_rng(s)) for s in range(50)]
    b = [sample_semantic(SIM, 1, rel(10), np.random.default_rng(s)) for s in range(50)]
    np.testing.assert_array_equal(a, b)
    for z in a:
        assert z.min() >= 0 and z.sum() == pytest.approx(1.0)


def test_unprojected_noise_covariance():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((200_000, 2))
    noise = np.linalg.solve(SIMULATION_SQRT_INFO, eps.T).T
    np.testing.assert_allclose(np.cov(noise.T), SIM.covariance_matrix, atol=0.01)


def test_constant_model():
    m = ConstantModel([[0.8, 0.2], [0.3, 0.7]], np.eye(2) * 4)
    mean, cov = predict(m, 2, rel(75))
    np.testing.assert_allclose(mean, [0.3, 0.7])
    np.testing.assert_allclose(cov, np.eye(2) / 16)
    assert np.all(m.mean_jacobian_batch([1], np.zeros((1, 3))) == 0)
    with pytest.raises(ConfigurationError):
        ConstantModel([[0.5, 0.5]], np.eye(2))


def _sim_table(c, psi, theta):
    m, _ = predict(SIM, c, Pose2(1, 0, math.radians(psi)))
    return m


@pytest.fixture
def grid_path(tmp_path):
    p = tmp_path / "grid.csv"
    write_lookup_grid(p, _sim_table, 2, np.arange(-180, 181, 30), [0.0, 10.0])
    return p


def test_lookup_reproduces_nodes(grid_path):
    lm = load_lookup_model(grid_path)
    for deg in (-180, -90, 0, 30, 90, 150):
        np.testing.assert_allclose(predict(lm, 1, rel(deg))[0], predict(SIM, 1, rel(deg))[0], atol=1e-10)


def test_lookup_midpoint_is_linear_interpolation(grid_path):
    lm = load_lookup_model(grid_path)
    a = predict(SIM, 2, rel(0))[0]
    b = predict(SIM, 2, rel(30))[0]
    np.testing.assert_allclose(predict(lm, 2, rel(15))[0], (a + b) / 2, atol=1e-10)


def test_lookup_periodic_in_psi(grid_path):
    lm = load_lookup_model(grid_path)
    np.testing.assert_allclose(
        lm.mean_at([1], [179.0], 5.0), lm.mean_at([1], [-181.0], 5.0), atol=1e-12
    )


def _write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


def test_lookup_bad_header(tmp_path):
    with pytest.raises(LoadError):
        load_lookup_model(_write(tmp_path, "cls,psi,theta,p1,p2\n1,0,0,0.5,0.5\n"))


def test_lookup_not_probability(tmp_path):
    rows = "class,psi_deg,theta_deg,p1,p2\n" + "".join(
        f"{c},{p},0,0.9,0.9\n" for c in (1, 2) for p in (-180, 180)
    )
    with pytest.raises(LoadError, match="probability"):
        load_lookup_model(_write(tmp_path, rows))


def test_lookup_missing_class(tmp_path):
    rows = "class,psi_deg,theta_deg,p1,p2\n" + "".join(f"1,{p},0,0.5,0.5\n" for p in (-180, 180))
    with pytest.raises(LoadError, match="classes"):
        load_lookup_model(_write(tmp_path, rows))


def test_lookup_psi_coverage(tmp_path):
    rows = "class,psi_deg,theta_deg,p1,p2\n" + "".join(
        f"{c},{p},0,0.5,0.5\n" for c in (1, 2) for p in (-90, 90)
    )
    with pytest.raises(LoadError, match="psi"):
        load_lookup_model(_write(tmp_path, rows))


def test_lookup_missing_node(tmp_path):
    rows = "class,psi_deg,theta_deg,p1,p2\n" + "".join(
        f"{c},{p},0,0.5,0.5\n" for c in (1, 2) for p in (-180, 0, 180)
    )
    rows += "1,0,10,0.5,0.5\n"
    with pytest.raises(LoadError, match="missing"):
        load_lookup_model(_write(tmp_path, rows))


def test_lookup_unreadable(tmp_path):
    with pytest.raises(LoadError):
        load_lookup_model(tmp_path / "nope.csv")
