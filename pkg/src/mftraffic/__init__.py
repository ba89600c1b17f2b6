"""Multifractal cascade models for self-similar traffic, MMPP baselines and a switch simulator."""

__version__ = "0.1.0"

from .cascade import (
    CascadeModel,
    fit_cascade,
    generate,
    lognormal_from_moments,
    predicted_cv2_at_scale,
    sigma_decay,
    solve_variance_system,
    solve_variance_system_recurrence,
    synthesize,
)
from .fractal import (
    estimate_holder,
    estimate_hurst,
    min_process_count,
    variance_time_curve,
)
from .mmpp import (
    MmppModel,
    fit_mmpp_histogram,
    fit_mmpp_scene,
    generate_mmpp,
    stationary_distribution,
)
from .netsim import NetworkConfig, SourceSpec, frame_to_packets, run_simulation, sweep_load
from .trace import Trace, aggregate, basic_stats, load_trace, to_measure

__all__ = [
    "CascadeModel",
    "MmppModel",
    "NetworkConfig",
    "SourceSpec",
    "Trace",
    "aggregate",
    "basic_stats",
    "estimate_holder",
    "estimate_hurst",
    "fit_cascade",
    "fit_mmpp_histogram",
    "fit_mmpp_scene",
    "frame_to_packets",
    "generate",
    "generate_mmpp",
    "load_trace",
    "lognormal_from_moments",
    "min_process_count",
    "predicted_cv2_at_scale",
    "run_simulation",
    "sigma_decay",
    "solve_variance_system",
    "solve_variance_system_recurrence",
    "stationary_distribution",
    "sweep_load",
    "synthesize",
    "to_measure",
    "variance_time_curve",
]
