"""Skip-score predictor: training, scoring, and prediction-threshold choice.

The predictor is a small fully-connected net (hidden relu layer, sigmoid
head, one output per early exit) trained to imitate the confidence test of
a traced network: target 1 exactly when the exit would terminate the
sample.  Prediction thresholds are then picked on a grid as the cheapest
setting that pushes fewer than ``budget_fraction`` additional samples to
the final exit.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .nncore import Mlp, TrainConfig, train
from .trace import TraceSet, atomic_write_text

# Scores are kept strictly inside (0, 1); a saturated sigmoid would
# otherwise defeat the gamma = 1 "skip everything" contract.
_SCORE_EPS = 1e-12


def _check_lambda(lam, n_early: int) -> tuple[float, ...]:
    lam = tuple(float(v) for v in lam)
    if len(lam) != n_early:
        raise ValueError(f"lambda must have length {n_early}, got {len(lam)}")
    if any(not (0.0 < v < 1.0) for v in lam):
        raise ValueError("lambda entries must lie in (0, 1)")
    return lam


@dataclass(frozen=True)
class ExitPredictor:
    """Trained skip-score net plus the confidence thresholds it imitates."""

    net: Mlp
    lam: tuple[float, ...]
    predictor_flops: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "lam", _check_lambda(self.lam, self.net.out_dim))
        object.__setattr__(self, "predictor_flops", float(self.predictor_flops))
        if self.net.activations[-1] != "sigmoid":
            raise ValueError("predictor net must end in a sigmoid head")
        if self.predictor_flops < 0:
            raise ValueError("predictor_flops must be >= 0")


def make_labels(ts: TraceSet, lam) -> np.ndarray:
    """Binary targets per early exit: 1 exactly when confidence >= lambda."""
    n_early = ts.topology.num_early_exits
    lam = _check_lambda(lam, n_early)
    return (ts.conf_matrix[:, :n_early] >= np.asarray(lam)).astype(np.float64)


def train_predictor(ts: TraceSet, lam, hidden: int = 64,
                    cfg: TrainConfig | None = None,
                    predictor_flops: float | None = None) -> tuple[ExitPredictor, list[float]]:
    """Fit the skip-score net on the traced features against step labels."""
    if not ts.has_features:
        raise ValueError("trace set carries no features; cannot train the predictor")
    if cfg is None:
        cfg = TrainConfig(weight_decay=2e-4)
    n_early = ts.topology.num_early_exits
    lam = _check_lambda(lam, n_early)
    x = ts.feature_matrix
    targets = make_labels(ts, lam)
    net = Mlp.init([x.shape[1], hidden, n_early], ["relu", "sigmoid"], seed=cfg.seed)
    net, curve = train(net, x, targets, "bce", cfg)
    if predictor_flops is None:
        predictor_flops = ts.topology.predictor_flops
    return ExitPredictor(net=net, lam=lam, predictor_flops=predictor_flops), curve


def predict_scores(ep: ExitPredictor, ts: TraceSet) -> np.ndarray:
    """Skip scores for every sample, strictly inside (0, 1), set order."""
    if not ts.has_features:
        raise ValueError("trace set carries no features; cannot score it")
    if len(ep.lam) != ts.topology.num_early_exits:
        raise ValueError(
            f"predictor covers {len(ep.lam)} early exits, trace set has "
            f"{ts.topology.num_early_exits}"
        )
    out = ep.net.forward(ts.feature_matrix)
    return np.clip(out, _SCORE_EPS, 1.0 - _SCORE_EPS)


def gamma_grid(step: float) -> np.ndarray:
    """Candidate threshold values: multiples of ``step`` in [0, 1] plus 1."""
    if not (0.0 < step < 1.0):
        raise ValueError(f"grid step must lie in (0, 1), got {step}")
    return np.unique(np.concatenate([np.arange(0.0, 1.0, step), [1.0]]))


def select_gamma(ts: TraceSet, ep, lam, grid_step: float = 0.05,
                 budget_fraction: float = 0.02) -> tuple[float, ...]:
    """Cheapest grid point pushing < budget_fraction extra samples to exit N.

    ``ep`` is an ExitPredictor or a precomputed score matrix.  The zero
    vector reproduces the plain policy exactly, so a feasible point always
    exists; ties go to the lexicographically smallest gamma.
    """
    if not (0.0 < budget_fraction <= 1.0):
        raise ValueError(f"budget_fraction must lie in (0, 1], got {budget_fraction}")
    n_early = ts.topology.num_early_exits
    lam = _check_lambda(lam, n_early)
    scores = predict_scores(ep, ts) if isinstance(ep, ExitPredictor) else np.asarray(ep, dtype=np.float64)
    plain_last = engine.policy_stats(ts, lam).exit_distribution[-1]
    grid = gamma_grid(grid_step)
    best: tuple[float, ...] | None = None
    best_flops = np.inf
    for combo in itertools.product(grid, repeat=n_early):
        stats = engine.policy_stats(ts, lam, combo, scores)
        if stats.exit_distribution[-1] - plain_last >= budget_fraction:
            continue
        if stats.mean_on_device_mflops < best_flops:
            best = tuple(float(v) for v in combo)
            best_flops = stats.mean_on_device_mflops
    assert best is not None  # gamma = 0 vector is always feasible
    return best


def save_predictor(ep: ExitPredictor, path: str | os.PathLike) -> None:
    doc = {
        "kind": "exit_predictor",
        "lambda": list(ep.lam),
        "predictor_flops": ep.predictor_flops,
        "net": ep.net.to_dict(),
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_predictor(path: str | os.PathLike) -> ExitPredictor:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "exit_predictor":
        raise ValueError(f"{path}: not an exit-predictor checkpoint")
    return ExitPredictor(
        net=Mlp.from_dict(doc["net"]),
        lam=tuple(doc["lambda"]),
        predictor_flops=doc["predictor_flops"],
    )
