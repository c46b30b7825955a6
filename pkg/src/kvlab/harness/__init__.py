from .traces import TraceBundle, TraceParams, gen_synthetic_trace, read_trace, write_trace
from .experiment import (
    ExperimentConfig,
    ResultRecord,
    ToyRunResult,
    run_ablation,
    run_experiment,
    run_toy_pipeline,
)

__all__ = [
    "TraceBundle",
    "TraceParams",
    "gen_synthetic_trace",
    "read_trace",
    "write_trace",
    "ExperimentConfig",
    "ResultRecord",
    "ToyRunResult",
    "run_ablation",
    "run_experiment",
    "run_toy_pipeline",
]
