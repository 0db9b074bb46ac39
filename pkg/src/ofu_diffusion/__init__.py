"""Optimistic learning and control of jump-driven systems through their diffusion limit."""
from .agent import AgentConfig, EpisodeRecord, lazy_trigger, run, select_optimistic
from .harness import RegretReport, SweepConfig, compute_regret, decompose_regret, emit_plots, sweep
from .jump_process import ClockConfig, EventLog, replay, rollout, sample_arrivals
from .learning import (ConfidenceState, DesignLog, RadiusSchedule, StateBound, beta_n, estimate_eluder, fit_nlls,
                       h_delta, membership, width_bounds)
from .models import LinearFamily, ModelSpec, Reward, TanhFamily, solve_care
from .planning import Grid, HjbSolution, evaluate_gain, greedy_policy, policy_suboptimality, solve_diffusive, solve_jump

__all__ = [
    "AgentConfig", "EpisodeRecord", "lazy_trigger", "run", "select_optimistic",
    "RegretReport", "SweepConfig", "compute_regret", "decompose_regret", "emit_plots", "sweep",
    "ClockConfig", "EventLog", "replay", "rollout", "sample_arrivals",
    "ConfidenceState", "DesignLog", "RadiusSchedule", "StateBound", "beta_n", "estimate_eluder", "fit_nlls",
    "h_delta", "membership", "width_bounds",
    "LinearFamily", "ModelSpec", "Reward", "TanhFamily", "solve_care",
    "Grid", "HjbSolution", "evaluate_gain", "greedy_policy", "policy_suboptimality", "solve_diffusive", "solve_jump",
]
