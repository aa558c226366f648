"""Scenario engine: measurement generation, communication and the step loop.

One pass over a scenario computes every requested mode.  Local beliefs and
stacks do not depend on the mode (own slots are built from local beliefs
only), so each robot keeps one local belief, one stack, and one distributed
belief per distributed mode.

Per step ``k`` and robot ``r``:

1. receive the stacks neighbours held at the end of step ``k-1`` and merge;
2. local update (expand new objects, update, prune);
3. refresh the own slot with the local belief (once it knows an object);
4. external update from the merged stack versus ``r``'s stack at ``k-1``;
5. distributed update per mode.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classifier import sample_semantic
from .fusion import Stack, build_own_slot, compute_external_update, distributed_update, merge_stacks
from .gaussian import object_key, robot_key
from .geometry import Pose2, between, compose, sample_pose_noise
from .hybrid import HybridBelief, StepInputs, draw_eps, pose_summary
from .metrics import belief_metrics
from .scenario import ScenarioConfig, ground_truth

LOCAL = "local"
DISTRIBUTED = "distributed"
DOUBLE_COUNT = "double-count"
MODES = (LOCAL, DISTRIBUTED, DOUBLE_COUNT)

# stream tags for seeding
_MEAS_STREAM = 0
_SAMPLE_STREAM = 1


@dataclass(frozen=True)
class RobotMeasurements:
    odometry: Pose2
    geometric: Tuple[Tuple[int, Pose2], ...]
    semantic: Tuple[Tuple[int, np.ndarray], ...]


@dataclass(frozen=True)
class StepRecord:
    step: int
    robots: Dict[int, RobotMeasurements]
    comm_pairs: Tuple[Tuple[int, int], ...]

    def neighbours(self, robot: int) -> List[int]:
        out = [b for a, b in self.comm_pairs if a == robot] + [a for a, b in self.comm_pairs if b == robot]
        return sorted(out)

    def inputs(self, robot: int, cfg: ScenarioConfig) -> StepInputs:
        m = self.robots[robot]
        return StepInputs(m.odometry, cfg.motion_cov, m.geometric, cfg.geometric_cov, m.semantic)


def generate_step(cfg: ScenarioConfig, truth: dict, k: int, rng: np.random.Generator, model=None) -> StepRecord:
    """Noisy measurements for step ``k`` (``1 <= k <= steps``)."""
    if not 1 <= k <= cfg.steps:
        raise ValueError(f"step {k} outside horizon 1..{cfg.steps}")
    model = model or cfg.build_model()
    per = {}
    for r in cfg.robots:
        prev, cur = truth[r.id][k - 1], truth[r.id][k]
        odom = compose(between(prev, cur), sample_pose_noise(cfg.motion_cov, rng))
        geo, sem = [], []
        for o in cfg.objects:
            if cur.translation_distance(o.pose) > cfg.sensing_range_m:
                continue
            rel = between(cur, o.pose)
            geo.append((o.id, compose(rel, sample_pose_noise(cfg.geometric_cov, rng))))
            sem.append((o.id, sample_semantic(model, o.true_class, rel, rng)))
        per[r.id] = RobotMeasurements(odom, tuple(geo), tuple(sem))
    ids = sorted(r.id for r in cfg.robots)
    pairs = tuple(
        (a, b)
        for i, a in enumerate(ids)
        for b in ids[i + 1 :]
        if truth[a][k].translation_distance(truth[b][k]) <= cfg.communication_range_m
    )
    return StepRecord(k, per, pairs)


@dataclass
class RobotAgent:
    """Inference state of one robot."""

    robot: int
    local: HybridBelief
    stack: Stack
    dist: Dict[str, HybridBelief] = field(default_factory=dict)

    def belief(self, mode: str) -> HybridBelief:
        return self.local if mode == LOCAL else self.dist[mode]


@dataclass
class RunArtifact:
    seed: int
    signature: str
    modes: Tuple[str, ...]
    rows: List[tuple]
    timing: List[tuple]
    stack_timestamps: Dict[int, Dict[int, Dict[int, int]]]
    agents: Dict[int, RobotAgent]
    diagnostics: List[str]


def _truth_map(cfg: ScenarioConfig, truth: dict, k: int, robot: int) -> dict:
    out = {robot_key(robot, j): truth[robot][j] for j in range(k + 1)}
    out.update({object_key(o.id): o.pose for o in cfg.objects})
    return out


def run(
    cfg: ScenarioConfig,
    modes: Sequence[str] = MODES,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    collect_metrics: bool = True,
) -> RunArtifact:
    """Simulate ``cfg`` and run the requested inference modes side by side."""
    modes = tuple(modes)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown modes {bad}")
    seed = cfg.seed if seed is None else int(seed)
    horizon = cfg.steps if steps is None else min(int(steps), cfg.steps)
    model = cfg.build_model()
    truth = ground_truth(cfg)
    classes = {o.id: o.true_class for o in cfg.objects}
    dist_modes = [m for m in modes if m != LOCAL]
    ids = sorted(r.id for r in cfg.robots)
    gn = dict(max_iters=cfg.max_gn_iters, tol=cfg.gn_tol)

    agents = {}
    for r in cfg.robots:
        hb = HybridBelief.initial(r.id, r.initial_pose, cfg.initial_pose_cov, cfg.num_classes, cfg.class_prior)
        agents[r.id] = RobotAgent(r.id, hb, Stack.initial(r.id, ids), {m: hb for m in dist_modes})

    rows: List[tuple] = []
    timing: List[tuple] = []
    stamps: Dict[int, Dict[int, Dict[int, int]]] = {}
    diagnostics: List[str] = []
    for k in range(1, horizon + 1):
        rec = generate_step(cfg, truth, k, np.random.default_rng([seed, _MEAS_STREAM, k]), model)
        snapshots = {rid: a.stack for rid, a in agents.items()}
        stamps[k] = {}
        for rid in ids:
            agent = agents[rid]
            inputs = rec.inputs(rid, cfg)
            eps = draw_eps(np.random.default_rng([seed, _SAMPLE_STREAM, rid, k]), inputs, cfg.n_samples)
            t0 = time.perf_counter()
            agent.local = distributed_update(
                agent.local, inputs, None, model, eps=eps, prune_ratio=cfg.prune_ratio,
                prior_sigma=cfg.object_prior_sigma, **gn,
            )
            timing.append((seed, k, rid, LOCAL, time.perf_counter() - t0))
            if dist_modes:
                merged = merge_stacks(agent.stack, [snapshots[j] for j in rec.neighbours(rid)])
                if agent.local.known_objects:
                    merged = merged.with_slot(build_own_slot(agent.local, k))
                for mode in dist_modes:
                    t0 = time.perf_counter()
                    ext = compute_external_update(merged, agent.stack, rid, double_count=(mode == DOUBLE_COUNT))
                    agent.dist[mode] = distributed_update(
                        agent.dist[mode], inputs, ext, model, eps=eps, prune_ratio=cfg.prune_ratio,
                        prior_sigma=cfg.object_prior_sigma, **gn,
                    )
                    diagnostics += [f"k={k} r{rid} {mode}: {d}" for d in ext.diagnostics]
                    timing.append((seed, k, rid, mode, time.perf_counter() - t0))
                agent.stack = merged
            stamps[k][rid] = agent.stack.timestamps()
            if collect_metrics:
                tm = _truth_map(cfg, truth, k, rid)
                for mode in modes:
                    hb = agent.belief(mode)
                    vals = belief_metrics(hb, pose_summary(hb), tm, classes)
                    rows += [(seed, k, rid, mode, name, vals[name]) for name in sorted(vals)]
    return RunArtifact(seed, cfg.signature(), modes, rows, timing, stamps, agents, diagnostics)
