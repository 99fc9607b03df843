"""Trace-driven simulator and policy optimizer for early-exit co-inference."""

from .engine import (
    AggregateReport,
    DecisionRecord,
    Environment,
    latency_of,
    policy_stats,
    run_oracle,
    run_plain,
    run_with_predictor,
)
from .nncore import Mlp, TrainConfig, bce_loss, numeric_gradient_check, train, weighted_ce_loss
from .optimizer import (
    InfeasibleError,
    PolicyPoint,
    ThresholdRegressor,
    adapt,
    fit_regressors,
    grid_search,
    sweep_bandwidths,
)
from .predictor import (
    ExitPredictor,
    make_labels,
    predict_scores,
    select_gamma,
    train_predictor,
)
from .trace import (
    ExitTopology,
    SampleTrace,
    Thresholds,
    TraceFormatError,
    TraceSet,
    load_trace_set,
    save_trace_set,
    split_trace_set,
)
from .zoo import SynthSpec, ToyEarlyExitNet, emit_traces, generate_dataset, train_toy_net

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "DecisionRecord",
    "Environment",
    "ExitPredictor",
    "ExitTopology",
    "InfeasibleError",
    "Mlp",
    "PolicyPoint",
    "SampleTrace",
    "SynthSpec",
    "ThresholdRegressor",
    "Thresholds",
    "ToyEarlyExitNet",
    "TraceFormatError",
    "TraceSet",
    "TrainConfig",
    "adapt",
    "bce_loss",
    "emit_traces",
    "fit_regressors",
    "generate_dataset",
    "grid_search",
    "latency_of",
    "load_trace_set",
    "make_labels",
    "numeric_gradient_check",
    "policy_stats",
    "predict_scores",
    "run_oracle",
    "run_plain",
    "run_with_predictor",
    "save_trace_set",
    "select_gamma",
    "split_trace_set",
    "sweep_bandwidths",
    "train",
    "train_predictor",
    "train_toy_net",
    "weighted_ce_loss",
]
