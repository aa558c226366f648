"""Classification and estimation metrics, and cross-run aggregation."""
from __future__ import annotations

import math
from collections import defaultdict
from typing import Dict, List, Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import ContractViolation
from .gaussian import GaussianDensity, VariableKey
from .geometry import Pose2
from .hybrid import HybridBelief, PoseSummary, class_marginal


def msde(marginal, true_class: int) -> float:
    """Mean square detection error ``(1/m) sum_i (1{i == c} - p_i)^2``."""
    p = np.asarray(marginal, dtype=float)
    m = p.size
    if not 1 <= true_class <= m:
        raise ContractViolation(f"true class {true_class} outside [1, {m}]")
    onehot = np.zeros(m)
    onehot[true_class - 1] = 1.0
    return float(np.mean((onehot - p) ** 2))


def weighted_position_error(summary: PoseSummary, truth: Mapping[VariableKey, Pose2], keys: Sequence[VariableKey] = None) -> float:
    """Weight-averaged Euclidean error, averaged over ``keys`` (default: all)."""
    keys = list(summary.keys if keys is None else keys)
    if not keys:
        raise ContractViolation("no variables to evaluate")
    missing = [k for k in keys if k not in truth]
    if missing:
        raise ContractViolation("ground truth missing for " + ", ".join(map(str, missing)))
    total = 0.0
    for k in keys:
        t = truth[k]
        d = np.array([m[k].translation_distance(t) for m in summary.hypothesis_means])
        total += float(summary.weights @ d)
    return total / len(keys)


def _position_variances(belief: GaussianDensity, keys: Sequence[VariableKey]) -> np.ndarray:
    """Mean of the x/y marginal variances for each key (selected columns only)."""
    cols = belief.slices(keys).reshape(len(keys), 3)[:, :2].reshape(-1)
    rhs = np.zeros((belief.dim, cols.size))
    rhs[cols, np.arange(cols.size)] = 1.0
    sol = linalg.cho_solve(linalg.cho_factor(belief.info), rhs)
    var = sol[cols, np.arange(cols.size)]
    return var.reshape(len(keys), 2).mean(axis=1)


def sqrt_position_covariance(summary: PoseSummary, keys: Sequence[VariableKey]) -> float:
    """Square root of the weight-averaged position variance over ``keys``."""
    v = sum(w * float(np.mean(_position_variances(b, keys))) for w, b in zip(summary.weights, summary.beliefs))
    return math.sqrt(max(v, 0.0))


def belief_metrics(hb: HybridBelief, summary: PoseSummary, truth: Mapping[VariableKey, Pose2], classes: Mapping[int, int]) -> Dict[str, float]:
    """Per-step metric values for one belief (rows with undefined values are omitted)."""
    from .gaussian import object_key

    robot = hb.current_key
    out = {
        "robot_position_error": weighted_position_error(summary, truth, [robot]),
        "sqrt_cov": sqrt_position_covariance(summary, [robot]),
        "n_hypotheses": float(len(hb.hypotheses)),
    }
    objs = [o for o in hb.known_objects if o in classes]
    if objs:
        out["msde"] = float(np.mean([msde(class_marginal(hb, o), classes[o]) for o in objs]))
        okeys = [object_key(o) for o in objs]
        out["object_position_error"] = weighted_position_error(summary, truth, okeys)
        out["object_sqrt_cov"] = sqrt_position_covariance(summary, okeys)
    return out


def aggregate_runs(runs: Sequence, n_runs: int = None) -> dict:
    """Cross-run mean and standard error per (mode, robot, metric, step).

    ``runs`` are objects with ``signature`` (configuration without seed) and
    ``rows`` (``(seed, step, robot, mode, metric, value)`` tuples).
    """
    runs = list(runs)
    if n_runs is not None and n_runs != len(runs):
        raise ContractViolation(f"expected {n_runs} runs, got {len(runs)}")
    if not runs:
        raise ContractViolation("no runs to aggregate")
    sigs = {r.signature for r in runs}
    if len(sigs) != 1:
        raise ContractViolation("runs come from different configurations")
    groups: Dict[tuple, List[float]] = defaultdict(list)
    for r in runs:
        for _, step, robot, mode, metric, value in r.rows:
            groups[(mode, robot, metric, step)].append(value)
    out: dict = {}
    for (mode, robot, metric, step), vals in sorted(groups.items()):
        v = np.asarray(vals, dtype=float)
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out.setdefault(mode, {}).setdefault(str(robot), {}).setdefault(metric, []).append(
            {"step": int(step), "mean": float(v.mean()), "stderr": se, "n": int(v.size)}
        )
    return {"n_runs": len(runs), "modes": out}


def final_means(summary: dict, metric: str, step: int = None) -> Dict[str, float]:
    """Run-averaged value of ``metric`` at the final (or given) step, averaged over robots."""
    res = {}
    for mode, robots in summary["modes"].items():
        vals = []
        for series in robots.values():
            pts = series.get(metric)
            if not pts:
                continue
            pick = pts[-1] if step is None else next((p for p in pts if p["step"] == step), None)
            if pick is not None:
                vals.append(pick["mean"])
        if vals:
            res[mode] = float(np.mean(vals))
    return res
