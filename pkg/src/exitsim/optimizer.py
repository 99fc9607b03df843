"""Latency-constrained threshold optimization and bandwidth adaptation.

``grid_search`` exhaustively enumerates threshold combinations and returns
the feasible point with the highest accuracy (ties: lower mean latency,
then lexicographically smallest thresholds).  ``sweep_bandwidths`` repeats
it across link rates, and ``fit_regressors`` distills the recorded optima
into small per-interval regressors mapping log10(bandwidth) to threshold
vectors, so one predictor serves every channel condition.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import engine
from .nncore import Mlp, TrainConfig, train
from .predictor import ExitPredictor, predict_scores
from .trace import Thresholds, TraceSet, atomic_write_text

# Clamp for regressed confidence thresholds: keep them meaningfully inside
# (1/P, 1) so the resulting Thresholds always validate.
LAMBDA_CLAMP_EPS = 1e-6


class InfeasibleError(RuntimeError):
    """No grid point satisfies the latency budget; carries the closest miss."""

    def __init__(self, message: str, min_latency_point: "PolicyPoint"):
        super().__init__(message)
        self.min_latency_point = min_latency_point


@dataclass(frozen=True)
class PolicyPoint:
    """One recorded solution: thresholds plus achieved accuracy/latency."""

    bandwidth: float
    lam: tuple[float, ...]
    gamma: tuple[float, ...]
    accuracy: float
    mean_latency_s: float
    feasible: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "gamma", tuple(float(v) for v in self.gamma))


def _as_scores(ts: TraceSet, ep) -> np.ndarray:
    if isinstance(ep, ExitPredictor):
        return predict_scores(ep, ts)
    return np.asarray(ep, dtype=np.float64)


def grid_search(ts: TraceSet, scores, env: engine.Environment,
                lambda_grid: Sequence[float], gamma_grid: Sequence[float]
                ) -> tuple[PolicyPoint, list[PolicyPoint]]:
    """Accuracy-maximizing thresholds under the mean-latency budget.

    Both grids are value lists applied to every early exit, so the search
    space is their Cartesian powers.  Returns the best feasible point and
    the full list of evaluated points; raises InfeasibleError (with the
    minimum-latency point attached) when nothing fits the budget.
    """
    n_early = ts.topology.num_early_exits
    lam_values = sorted(float(v) for v in lambda_grid)
    gam_values = sorted(float(v) for v in gamma_grid)
    if not lam_values or not gam_values:
        raise ValueError("threshold grids must be nonempty")
    if any(not (0.0 < v < 1.0) for v in lam_values):
        raise ValueError("lambda grid values must lie in (0, 1)")
    if any(not (0.0 <= v <= 1.0) for v in gam_values):
        raise ValueError("gamma grid values must lie in [0, 1]")
    scores = _as_scores(ts, scores)

    best: PolicyPoint | None = None
    min_lat: PolicyPoint | None = None
    frontier: list[PolicyPoint] = []
    for lam in itertools.product(lam_values, repeat=n_early):
        for gam in itertools.product(gam_values, repeat=n_early):
            stats = engine.policy_stats(ts, lam, gam, scores, env)
            point = PolicyPoint(
                bandwidth=env.bandwidth,
                lam=lam,
                gamma=gam,
                accuracy=stats.accuracy,
                mean_latency_s=stats.mean_latency_s,
                feasible=stats.mean_latency_s <= env.latency_budget,
            )
            frontier.append(point)
            if min_lat is None or point.mean_latency_s < min_lat.mean_latency_s:
                min_lat = point
            if point.feasible and (
                best is None
                or point.accuracy > best.accuracy
                or (point.accuracy == best.accuracy
                    and point.mean_latency_s < best.mean_latency_s)
            ):
                best = point
    if best is None:
        raise InfeasibleError(
            f"no grid point meets the {env.latency_budget * 1e3:.3g} ms budget at "
            f"{env.bandwidth:.6g} bit/s (closest: {min_lat.mean_latency_s * 1e3:.3g} ms)",
            min_lat,
        )
    return best, frontier


def sweep_bandwidths(ts: TraceSet, ep, env: engine.Environment,
                     bandwidths: Sequence[float],
                     lambda_grid: Sequence[float],
                     gamma_grid: Sequence[float]) -> list[PolicyPoint]:
    """grid_search per bandwidth, budget fixed; results in ascending order.

    A bandwidth with no feasible point contributes its minimum-latency
    point flagged infeasible instead of aborting the sweep.
    """
    if not bandwidths:
        raise ValueError("bandwidth list must be nonempty")
    if any(b <= 0 for b in bandwidths):
        raise ValueError("bandwidths must be strictly positive")
    scores = _as_scores(ts, ep)
    points = []
    for bw in sorted(float(b) for b in bandwidths):
        env_bw = replace(env, bandwidth=bw)
        try:
            best, _ = grid_search(ts, scores, env_bw, lambda_grid, gamma_grid)
            points.append(best)
        except InfeasibleError as exc:
            points.append(exc.min_latency_point)
    return points


@dataclass(frozen=True)
class ThresholdRegressor:
    """Per-interval pair of two-layer nets: log10(bandwidth) -> thresholds."""

    interval: tuple[float, float]
    train_bandwidths: tuple[float, ...]
    lam_net: Mlp
    gamma_net: Mlp
    log_center: float
    num_classes: int
    max_abs_error: float


def _clamp_lam(raw: np.ndarray, num_classes: int) -> np.ndarray:
    lo = 1.0 / num_classes + LAMBDA_CLAMP_EPS
    return np.clip(raw, lo, 1.0 - LAMBDA_CLAMP_EPS)


def fit_regressors(points: Sequence[PolicyPoint],
                   intervals: Sequence[tuple[float, float]],
                   num_classes: int,
                   cfg: TrainConfig | None = None,
                   hidden: int = 16) -> list[ThresholdRegressor]:
    """Fit one (lambda, gamma) regressor pair per bandwidth interval.

    Interval membership is inclusive on both ends, so a bandwidth shared by
    two intervals trains both regressors.  The recorded max_abs_error is
    the worst clamped-prediction error over the interval's training points.
    """
    if cfg is None:
        cfg = TrainConfig(lr=0.1, lr_end=1e-4, lr_end_epoch=8000, epochs=8000,
                          batch_size=16, weight_decay=0.0, seed=0)
    ordered = sorted(intervals, key=lambda iv: (float(iv[0]), float(iv[1])))
    out: list[ThresholdRegressor] = []
    for idx, (lo, hi) in enumerate(ordered):
        lo, hi = float(lo), float(hi)
        if not (0 < lo < hi):
            raise ValueError(f"bad interval ({lo}, {hi})")
        members = sorted(
            (p for p in points if lo <= p.bandwidth <= hi),
            key=lambda p: p.bandwidth,
        )
        if len(members) < 2:
            raise ValueError(
                f"interval {lo:.6g}-{hi:.6g} bit/s has {len(members)} training "
                "points; need at least 2"
            )
        bws = np.array([p.bandwidth for p in members])
        logb = np.log10(bws)
        center = float(np.mean(logb))
        x = (logb - center)[:, None]
        lam_targets = np.array([p.lam for p in members])
        gam_targets = np.array([p.gamma for p in members])
        n_early = lam_targets.shape[1]

        # Zero output weights + bias at the target mean start the net on the
        # mean schedule, so constant threshold schedules are reproduced
        # exactly and only residuals remain to fit.
        lam_net = Mlp.init([1, hidden, n_early], ["relu", "identity"],
                           seed=cfg.seed + 2 * idx)
        lam_net.weights[-1][:] = 0.0
        lam_net.biases[-1][:] = lam_targets.mean(axis=0)
        train(lam_net, x, lam_targets, "mse", replace(cfg, seed=cfg.seed + 2 * idx))
        gamma_net = Mlp.init([1, hidden, n_early], ["relu", "identity"],
                             seed=cfg.seed + 2 * idx + 1)
        gamma_net.weights[-1][:] = 0.0
        gamma_net.biases[-1][:] = gam_targets.mean(axis=0)
        train(gamma_net, x, gam_targets, "mse", replace(cfg, seed=cfg.seed + 2 * idx + 1))

        lam_hat = _clamp_lam(lam_net.forward(x), num_classes)
        gam_hat = np.clip(gamma_net.forward(x), 0.0, 1.0)
        err = max(
            float(np.max(np.abs(lam_hat - lam_targets))),
            float(np.max(np.abs(gam_hat - gam_targets))),
        )
        out.append(ThresholdRegressor(
            interval=(lo, hi),
            train_bandwidths=tuple(float(b) for b in bws),
            lam_net=lam_net,
            gamma_net=gamma_net,
            log_center=center,
            num_classes=int(num_classes),
            max_abs_error=err,
        ))
    return out


def adapt(regressors: Sequence[ThresholdRegressor], bandwidth: float) -> Thresholds:
    """Thresholds for a bandwidth, from the covering interval's regressors.

    A bandwidth on a shared endpoint routes to the lower interval.  Raw
    outputs are clamped into the valid threshold ranges.
    """
    bandwidth = float(bandwidth)
    chosen = None
    for reg in sorted(regressors, key=lambda r: r.interval):
        if reg.interval[0] <= bandwidth <= reg.interval[1]:
            chosen = reg
            break
    if chosen is None:
        raise ValueError(f"bandwidth {bandwidth:.6g} bit/s outside all regressor intervals")
    x = np.array([[math.log10(bandwidth) - chosen.log_center]])
    lam = _clamp_lam(chosen.lam_net.forward(x)[0], chosen.num_classes)
    gam = np.clip(chosen.gamma_net.forward(x)[0], 0.0, 1.0)
    return Thresholds(lam=tuple(lam.tolist()), gamma=tuple(gam.tolist()))


# -- serialization ------------------------------------------------------------


def policy_points_csv(points: Sequence[PolicyPoint]) -> str:
    if not points:
        raise ValueError("no policy points to serialize")
    n_early = len(points[0].lam)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (["bandwidth_bps"]
              + [f"lambda_{i + 1}" for i in range(n_early)]
              + [f"gamma_{i + 1}" for i in range(n_early)]
              + ["accuracy", "mean_latency_s", "feasible"])
    writer.writerow(header)
    for p in points:
        writer.writerow([repr(p.bandwidth)]
                        + [repr(v) for v in p.lam]
                        + [repr(v) for v in p.gamma]
                        + [repr(p.accuracy), repr(p.mean_latency_s),
                           "true" if p.feasible else "false"])
    return buf.getvalue()


def save_policy_points(points: Sequence[PolicyPoint], path: str | os.PathLike) -> None:
    atomic_write_text(path, policy_points_csv(points))


def load_policy_points(path: str | os.PathLike) -> list[PolicyPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty policy table")
    header = rows[0]
    lam_cols = [i for i, name in enumerate(header) if name.startswith("lambda_")]
    gam_cols = [i for i, name in enumerate(header) if name.startswith("gamma_")]
    try:
        bw_col = header.index("bandwidth_bps")
        acc_col = header.index("accuracy")
        lat_col = header.index("mean_latency_s")
        feas_col = header.index("feasible")
    except ValueError as exc:
        raise ValueError(f"{path}: missing policy table column: {exc}") from exc
    if not lam_cols or len(lam_cols) != len(gam_cols):
        raise ValueError(f"{path}: malformed threshold columns")
    points = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            points.append(PolicyPoint(
                bandwidth=float(row[bw_col]),
                lam=tuple(float(row[i]) for i in lam_cols),
                gamma=tuple(float(row[i]) for i in gam_cols),
                accuracy=float(row[acc_col]),
                mean_latency_s=float(row[lat_col]),
                feasible=row[feas_col] == "true",
            ))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return points


def save_regressors(regressors: Sequence[ThresholdRegressor],
                    path: str | os.PathLike) -> None:
    doc = {
        "kind": "threshold_regressors",
        "regressors": [
            {
                "interval": list(r.interval),
                "train_bandwidths": list(r.train_bandwidths),
                "log_center": r.log_center,
                "num_classes": r.num_classes,
                "max_abs_error": r.max_abs_error,
                "lam_net": r.lam_net.to_dict(),
                "gamma_net": r.gamma_net.to_dict(),
            }
            for r in regressors
        ],
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_regressors(path: str | os.PathLike) -> list[ThresholdRegressor]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "threshold_regressors":
        raise ValueError(f"{path}: not a threshold-regressor bundle")
    out = []
    for r in doc["regressors"]:
        out.append(ThresholdRegressor(
            interval=tuple(r["interval"]),
            train_bandwidths=tuple(r["train_bandwidths"]),
            lam_net=Mlp.from_dict(r["lam_net"]),
            gamma_net=Mlp.from_dict(r["gamma_net"]),
            log_center=r["log_center"],
            num_classes=r["num_classes"],
            max_abs_error=r["max_abs_error"],
        ))
    return out
