"""Single-loop deep actor-critic for constrained MDPs."""

from .actor import (ReplayStorage, SolverError, SurrogateState, solve_feasibility_subproblem,
                    solve_objective_subproblem, solve_surrogate_problem)
from .critic import CriticBank, CriticPair, Observation, average_step, td_step
from .harness import ExperimentConfig, MetricsRow, run_experiment, run_iteration, run_seed
from .nn import FeatureMap, MlpParams, MlpSpec, backward_params, forward, init_params
from .policy import ParamDomain, PolicyParams, grad_log_prob, init_policy, log_prob, sample_action
from .schedules import PowerLawSchedule, ScheduleSet, validate_region, value_at

__version__ = "0.1.0"
