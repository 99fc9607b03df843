"""Exit-policy execution over stored traces with exact cost accounting.

Three policies share one cost model:

* plain      -- walk the exits in order; every reached exit is computed;
                terminate at the first exit whose confidence clears its
                threshold, otherwise transmit and finish at the server exit.
* predictor  -- same walk, but a reached exit is computed only when its skip
                score clears the prediction threshold; termination still
                requires the confidence test.  The predictor itself is
                charged to every sample.
* oracle     -- idealized routing: the terminating exit matches the plain
                walk, but only that one classifier is computed.

Comparisons are weak inequalities throughout: terminate when c >= lambda,
compute when s >= gamma.  Server-side FLOPs count toward total cost but
never toward latency (the server is assumed fast); transmission charges
ceil(raw_feature_bits / compression_ratio) bits against the link.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .trace import ExitTopology, Thresholds, TraceSet


@dataclass(frozen=True)
class Environment:
    """Device compute speed (FLOPS), link bandwidth (bit/s), budget (s)."""

    compute_speed: float
    bandwidth: float
    latency_budget: float

    def __post_init__(self) -> None:
        for name in ("compute_speed", "bandwidth", "latency_budget"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class DecisionRecord:
    """Outcome of running one sample under one policy."""

    sample_id: int
    exit_taken: int                      # 1-based; N means the server exit
    exits_computed: tuple[bool, ...]     # per early exit
    on_device_mflops: float
    transmitted: bool
    transmitted_bits: int
    correct: bool
    latency_s: float


@dataclass(frozen=True)
class AggregateReport:
    accuracy: float
    mean_on_device_mflops: float
    mean_total_mflops: float
    mean_latency_s: float
    exit_distribution: tuple[float, ...]
    budget_satisfied: bool

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_on_device_mflops": self.mean_on_device_mflops,
            "mean_total_mflops": self.mean_total_mflops,
            "mean_latency_s": self.mean_latency_s,
            "exit_distribution": list(self.exit_distribution),
            "budget_satisfied": self.budget_satisfied,
        }


def _check_lambda(topo: ExitTopology, lam: Sequence[float]) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (topo.num_early_exits,):
        raise ValueError(
            f"lambda must have length {topo.num_early_exits}, got shape {lam.shape}"
        )
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        raise ValueError("lambda entries must lie in (0, 1)")
    return lam


def _scores_matrix(ts: TraceSet, scores) -> np.ndarray:
    n_early = ts.topology.num_early_exits
    if isinstance(scores, Mapping):
        rows = []
        for s in ts.samples:
            if s.id not in scores:
                raise ValueError(f"missing predictor scores for sample id {s.id}")
            rows.append(scores[s.id])
        mat = np.asarray(rows, dtype=np.float64)
    else:
        mat = np.asarray(scores, dtype=np.float64)
    if mat.shape != (len(ts.samples), n_early):
        raise ValueError(
            f"scores must have shape ({len(ts.samples)}, {n_early}), got {mat.shape}"
        )
    if np.any(mat < 0.0) or np.any(mat > 1.0):
        raise ValueError("predictor scores must lie in [0, 1]")
    return mat


def _walk(conf: np.ndarray, lam: np.ndarray, seg: Sequence[float],
          exf: Sequence[float], computed: np.ndarray):
    """Shared exit walk; ``computed`` masks which reached exits are evaluated.

    Returns 0-based exit index (n_early means the server exit), per-sample
    device MFLOPs accumulated left to right in walk order, and the computed
    mask restricted to reached exits.
    """
    n_samples = conf.shape[0]
    n_early = len(seg)
    device = np.zeros(n_samples, dtype=np.float64)
    alive = np.ones(n_samples, dtype=bool)
    exit_idx = np.full(n_samples, n_early, dtype=np.int64)
    exits_done = np.zeros((n_samples, n_early), dtype=bool)
    for n in range(n_early):
        device[alive] += seg[n]
        comp = alive & computed[:, n]
        device[comp] += exf[n]
        exits_done[:, n] = comp
        term = comp & (conf[:, n] >= lam[n])
        exit_idx[term] = n
        alive &= ~term
    return exit_idx, device, exits_done, alive


def _oracle_costs(topo: ExitTopology, exit_idx: np.ndarray) -> np.ndarray:
    seg_prefix = np.cumsum(topo.segment_flops)
    n_early = topo.num_early_exits
    per_exit = np.empty(n_early + 1, dtype=np.float64)
    for k in range(n_early):
        per_exit[k] = seg_prefix[k] + topo.exit_flops[k]
    per_exit[n_early] = seg_prefix[n_early - 1]
    return per_exit[exit_idx]


def latency_of(record: DecisionRecord, topology: ExitTopology, env: Environment) -> float:
    """End-to-end seconds for one record: device compute plus transmission."""
    lat = record.on_device_mflops * 1e6 / env.compute_speed
    if record.transmitted:
        lat += record.transmitted_bits / env.bandwidth
    return lat


def _latencies(device: np.ndarray, transmitted: np.ndarray, topo: ExitTopology,
               env: Environment | None) -> np.ndarray:
    if env is None:
        return np.zeros_like(device)
    lat = device * 1e6 / env.compute_speed
    return lat + np.where(transmitted, topo.transmitted_bits / env.bandwidth, 0.0)


def _aggregate(ts: TraceSet, exit_idx: np.ndarray, device: np.ndarray,
               transmitted: np.ndarray, latencies: np.ndarray,
               env: Environment | None) -> AggregateReport:
    topo = ts.topology
    n = len(ts.samples)
    correct = ts.pred_matrix[np.arange(n), exit_idx] == ts.label_vector
    total = device + np.where(transmitted, topo.server_flops, 0.0)
    counts = np.bincount(exit_idx, minlength=topo.num_exits)
    mean_latency = float(np.mean(latencies))
    return AggregateReport(
        accuracy=float(np.mean(correct)),
        mean_on_device_mflops=float(np.mean(device)),
        mean_total_mflops=float(np.mean(total)),
        mean_latency_s=mean_latency,
        exit_distribution=tuple((counts / n).tolist()),
        budget_satisfied=(env is None) or (mean_latency <= env.latency_budget),
    )


def _records(ts: TraceSet, exit_idx: np.ndarray, device: np.ndarray,
             exits_done: np.ndarray, transmitted: np.ndarray,
             latencies: np.ndarray) -> list[DecisionRecord]:
    topo = ts.topology
    bits = topo.transmitted_bits
    n = len(ts.samples)
    correct = ts.pred_matrix[np.arange(n), exit_idx] == ts.label_vector
    out = []
    for i, s in enumerate(ts.samples):
        out.append(DecisionRecord(
            sample_id=s.id,
            exit_taken=int(exit_idx[i]) + 1,
            exits_computed=tuple(bool(v) for v in exits_done[i]),
            on_device_mflops=float(device[i]),
            transmitted=bool(transmitted[i]),
            transmitted_bits=bits if transmitted[i] else 0,
            correct=bool(correct[i]),
            latency_s=float(latencies[i]),
        ))
    return out


def run_plain(ts: TraceSet, lam: Sequence[float],
              env: Environment | None = None) -> tuple[list[DecisionRecord], AggregateReport]:
    """Confidence-gated early exiting; every reached exit is computed."""
    if not ts.samples:
        raise ValueError("empty trace set")
    topo = ts.topology
    lam = _check_lambda(topo, lam)
    computed = np.ones((len(ts.samples), topo.num_early_exits), dtype=bool)
    exit_idx, device, exits_done, transmitted = _walk(
        ts.conf_matrix, lam, topo.segment_flops, topo.exit_flops, computed
    )
    latencies = _latencies(device, transmitted, topo, env)
    report = _aggregate(ts, exit_idx, device, transmitted, latencies, env)
    return _records(ts, exit_idx, device, exits_done, transmitted, latencies), report


def run_with_predictor(ts: TraceSet, thresholds: Thresholds, scores,
                       env: Environment | None = None) -> tuple[list[DecisionRecord], AggregateReport]:
    """Skip-score gated walk; the predictor cost is charged to every sample.

    ``scores`` is either an (samples, early_exits) array aligned with the
    set order or a mapping from sample id to a score vector.
    """
    if not ts.samples:
        raise ValueError("empty trace set")
    topo = ts.topology
    lam = _check_lambda(topo, thresholds.lam)
    gamma = np.asarray(thresholds.gamma, dtype=np.float64)
    if gamma.shape != (topo.num_early_exits,):
        raise ValueError(
            f"gamma must have length {topo.num_early_exits}, got shape {gamma.shape}"
        )
    mat = _scores_matrix(ts, scores)
    exit_idx, device, exits_done, transmitted = _walk(
        ts.conf_matrix, lam, topo.segment_flops, topo.exit_flops, mat >= gamma
    )
    device = device + topo.predictor_flops
    latencies = _latencies(device, transmitted, topo, env)
    report = _aggregate(ts, exit_idx, device, transmitted, latencies, env)
    return _records(ts, exit_idx, device, exits_done, transmitted, latencies), report


def run_oracle(ts: TraceSet, lam: Sequence[float],
               env: Environment | None = None) -> tuple[list[DecisionRecord], AggregateReport]:
    """Idealized routing: compute only each sample's terminating exit."""
    if not ts.samples:
        raise ValueError("empty trace set")
    topo = ts.topology
    lam = _check_lambda(topo, lam)
    computed = np.ones((len(ts.samples), topo.num_early_exits), dtype=bool)
    exit_idx, _, _, transmitted = _walk(
        ts.conf_matrix, lam, topo.segment_flops, topo.exit_flops, computed
    )
    device = _oracle_costs(topo, exit_idx)
    n_early = topo.num_early_exits
    exits_done = np.zeros((len(ts.samples), n_early), dtype=bool)
    early = exit_idx < n_early
    exits_done[np.nonzero(early)[0], exit_idx[early]] = True
    latencies = _latencies(device, transmitted, topo, env)
    report = _aggregate(ts, exit_idx, device, transmitted, latencies, env)
    return _records(ts, exit_idx, device, exits_done, transmitted, latencies), report


def policy_stats(ts: TraceSet, lam: Sequence[float], gamma: Sequence[float] | None = None,
                 scores=None, env: Environment | None = None) -> AggregateReport:
    """Aggregate report without materializing per-sample records.

    This is the bulk evaluator behind threshold searches; with ``gamma``
    None it reproduces run_plain, otherwise run_with_predictor.
    """
    if not ts.samples:
        raise ValueError("empty trace set")
    topo = ts.topology
    lam = _check_lambda(topo, lam)
    if gamma is None:
        computed = np.ones((len(ts.samples), topo.num_early_exits), dtype=bool)
    else:
        gamma = np.asarray(gamma, dtype=np.float64)
        if scores is None:
            raise ValueError("gamma given without predictor scores")
        computed = _scores_matrix(ts, scores) >= gamma
    exit_idx, device, _, transmitted = _walk(
        ts.conf_matrix, lam, topo.segment_flops, topo.exit_flops, computed
    )
    if gamma is not None:
        device = device + topo.predictor_flops
    latencies = _latencies(device, transmitted, topo, env)
    return _aggregate(ts, exit_idx, device, transmitted, latencies, env)
