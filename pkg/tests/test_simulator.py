import ast
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

import hybrid_ddf
from hybrid_ddf.errors import ConfigurationError
from hybrid_ddf.geometry import Pose2, between
from hybrid_ddf.scenario import BUNDLED, ScenarioConfig, ground_truth
from hybrid_ddf.simulator import MODES, generate_step, run

PKG = Path(hybrid_ddf.__file__).parent


def base_dict(**kw):
    d = {
        "name": "t",
        "steps": 3,
        "num_classes": 2,
        "sensing_range_m": 10.0,
        "communication_range_m": 10.0,
        "motion_noise_cov_diag_m2_m2_rad2": [0.003, 0.003, 0.001],
        "geometric_noise_cov_diag_m2_m2_rad2": [0.1, 0.1, 0.01],
        "initial_pose_cov_diag_m2_m2_rad2": [1e-4, 1e-4, 1e-5],
        "classifier": {"type": "simulation"},
        "robots": [{"id": 1, "initial_pose_m_m_rad": [0, 0, 0], "control_segments": [{"steps": 3, "dx_m": 1.0}]}],
        "objects": [{"id": 1, "pose_m_m_rad": [11.01, 0, 0], "class": 1}],
        "gn_tol": 1e-6,
    }
    d.update(kw)
    return d


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load(name):
    cfg = ScenarioConfig.bundled(name)
    assert cfg.steps >= 1 and cfg.robots
    gt = ground_truth(cfg)
    assert all(len(v) == cfg.steps + 1 for v in gt.values())


def test_sensing_range_boundary():
    cfg = ScenarioConfig.from_dict(base_dict())
    gt = ground_truth(cfg)
    # at k=1 the robot is at x=1: object 10.01 m away
    rec = generate_step(cfg, gt, 1, np.random.default_rng(0))
    assert rec.robots[1].geometric == () and rec.robots[1].semantic == ()
    # at k=2 the distance is 9.01 m
    rec = generate_step(cfg, gt, 2, np.random.default_rng(0))
    assert [o for o, _ in rec.robots[1].geometric] == [1]


def test_zero_noise_measurements_equal_truth():
    cfg = ScenarioConfig.from_dict(base_dict())
    cfg = dataclasses.replace(cfg, motion_cov=np.zeros((3, 3)), geometric_cov=np.zeros((3, 3)))
    gt = ground_truth(cfg)
    rec = generate_step(cfg, gt, 3, np.random.default_rng(0))
    assert rec.robots[1].odometry.isclose(between(gt[1][2], gt[1][3]), 1e-12)
    (oid, z), = rec.robots[1].geometric
    assert z.isclose(between(gt[1][3], cfg.objects[0].pose), 1e-12)


def test_step_outside_horizon():
    cfg = ScenarioConfig.from_dict(base_dict())
    with pytest.raises(ValueError):
        generate_step(cfg, ground_truth(cfg), 4, np.random.default_rng(0))


def test_timestamp_scenario_connectivity():
    cfg = ScenarioConfig.bundled("timestamps")
    gt = ground_truth(cfg)
    pairs = {k: generate_step(cfg, gt, k, np.random.default_rng(k)).comm_pairs for k in range(1, cfg.steps + 1)}
    for k in range(1, 6):
        assert pairs[k] == ()
    for k in range(6, 13):
        assert pairs[k] == ((2, 3),)
    assert (1, 2) in pairs[13]


def test_communication_symmetry():
    cfg = ScenarioConfig.bundled("desk")
    gt = ground_truth(cfg)
    rec = generate_step(cfg, gt, 10, np.random.default_rng(0))
    for a, b in rec.comm_pairs:
        assert b in rec.neighbours(a) and a in rec.neighbours(b)


def test_local_mode_has_no_distributed_state():
    cfg = ScenarioConfig.bundled("timestamps")
    art = run(cfg, modes=("local",), seed=0, steps=3)
    assert all(a.dist == {} for a in art.agents.values())
    assert {row[3] for row in art.rows} == {"local"}
    # stacks are never exchanged
    assert all(t == 0 for k in art.stack_timestamps.values() for s in k.values() for t in s.values())


def test_single_robot_distributed_matches_local():
    cfg = ScenarioConfig.bundled("ambiguity").with_overrides(steps=6)
    art = run(cfg, modes=MODES, seed=3)
    rows = {(r[1], r[2], r[4]): {} for r in art.rows}
    for s, k, rid, mode, metric, v in art.rows:
        rows[(k, rid, metric)][mode] = v
    for vals in rows.values():
        assert vals["distributed"] == pytest.approx(vals["local"], abs=1e-9)
        assert vals["double-count"] == pytest.approx(vals["local"], abs=1e-9)


def test_run_deterministic():
    cfg = ScenarioConfig.bundled("timestamps")
    a = run(cfg, seed=5, steps=7)
    b = run(cfg, seed=5, steps=7)
    assert a.rows == b.rows
    assert a.stack_timestamps == b.stack_timestamps


def test_different_seeds_differ():
    cfg = ScenarioConfig.bundled("ambiguity").with_overrides(steps=3)
    a = run(cfg, modes=("local",), seed=1)
    b = run(cfg, modes=("local",), seed=2)
    assert a.rows != b.rows


def test_unknown_mode():
    with pytest.raises(ValueError):
        run(ScenarioConfig.bundled("ambiguity"), modes=("centralized",))


def test_inference_modules_never_see_ground_truth():
    """Inference code may not import the scenario or simulator modules."""
    for mod in ("gaussian", "graph", "hybrid", "fusion", "wire", "classifier", "geometry"):
        tree = ast.parse((PKG / f"{mod}.py").read_text())
        imported = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.ImportFrom):
                imported.add((node.module or "").split(".")[-1])
            elif isinstance(node, ast.Import):
                imported.update(a.name.split(".")[-1] for a in node.names)
        assert not imported & {"scenario", "simulator", "metrics", "cli"}, mod


def test_step_inputs_carry_only_measurements():
    cfg = ScenarioConfig.bundled("desk")
    gt = ground_truth(cfg)
    rec = generate_step(cfg, gt, 1, np.random.default_rng(0))
    inputs = rec.inputs(1, cfg)
    names = {f.name for f in dataclasses.fields(inputs)}
    assert names == {"odometry", "odometry_cov", "geometric", "geometric_cov", "semantic"}
    assert not inputs.odometry.isclose(between(gt[1][0], gt[1][1]), 1e-9)


# -- configuration errors ---------------------------------------------------------


@pytest.mark.parametrize(
    "patch, match",
    [
        ({"steps": 0}, "steps"),
        ({"num_classes": 1}, "num_classes"),
        ({"sensing_range_m": 0}, "ranges"),
        ({"prune_ratio": 1.0}, "prune"),
        ({"motion_noise_cov_diag_m2_m2_rad2": [0, 0.1, 0.1]}, "positive definite"),
        ({"classifier": {"type": "magic"}}, "classifier"),
        ({"objects": [{"id": 1, "pose_m_m_rad": [0, 0, 0], "class": 3}]}, "class"),
        (
            {"objects": [{"id": 1, "pose_m_m_rad": [0, 0, 0], "class": 1}, {"id": 1, "pose_m_m_rad": [1, 0, 0], "class": 1}]},
            "unique",
        ),
    ],
)
def test_invalid_configs(patch, match):
    with pytest.raises(ConfigurationError, match=match):
        ScenarioConfig.from_dict(base_dict(**patch))


def test_missing_key_is_configuration_error():
    d = base_dict()
    del d["robots"]
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict(d)


def test_load_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.json"
    with pytest.raises(ConfigurationError, match="nope.json"):
        ScenarioConfig.load(p)


def test_load_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigurationError, match="JSON"):
        ScenarioConfig.load(p)


def test_waypoints_reach_target():
    d = base_dict(robots=[{"id": 1, "initial_pose_m_m_rad": [0, 0, 0], "waypoints_m": [[0, 2], [2, 2]], "speed_m_per_step": 1.0}])
    d["steps"] = 5
    cfg = ScenarioConfig.from_dict(d)
    gt = ground_truth(cfg)[1]
    assert (gt[2].x, gt[2].y) == pytest.approx((0, 2))
    assert (gt[4].x, gt[4].y) == pytest.approx((2, 2))
    assert gt[5].isclose(gt[4], 1e-12)


def test_lookup_classifier_relative_to_scenario(tmp_path):
    from hybrid_ddf.classifier import SimulationModel, predict, write_lookup_grid

    sim = SimulationModel()
    write_lookup_grid(tmp_path / "g.csv", lambda c, p, t: predict(sim, c, Pose2(1, 0, math.radians(p)))[0], 2,
                      np.arange(-180, 181, 10), [0.0])
    d = base_dict(classifier={"type": "lookup", "path": "g.csv"})
    (tmp_path / "s.json").write_text(json.dumps(d))
    cfg = ScenarioConfig.load(tmp_path / "s.json")
    m = cfg.build_model()
    np.testing.assert_allclose(predict(m, 1, Pose2(1, 0, math.pi / 2))[0], [1, 0], atol=1e-9)


def test_signature_ignores_seed():
    a = ScenarioConfig.from_dict(base_dict(seed=1))
    b = ScenarioConfig.from_dict(base_dict(seed=2))
    c = ScenarioConfig.from_dict(base_dict(steps=2))
    assert a.signature() == b.signature() != c.signature()
