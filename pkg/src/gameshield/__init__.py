"""Sandboxing unverified controllers in stochastic two-player games.

Offline: grid abstraction of a linear-Gaussian game with an adversary,
minimax synthesis of a fallback controller with per-state violation values.
Online: a gate that admits unverified inputs only while a formal bound on the
end-to-end violation probability stays under the configured budget, falling
back to the synthesized controller otherwise.
"""

from .abstraction import (AbstractKernel, Grid, RelationParams, build_grid,
                          build_kernel, check_relation_membership, load_kernel,
                          nearest_abstract_adversary, quantize_state,
                          safe_abstract_states, save_kernel, SINK,
                          verify_relation_empirically)
from .advisor import (ValueTables, advisor_guarantee, advisor_input, load_tables,
                      refine, save_tables, value_iteration)
from .automata import (Dfa, IntervalLabelling, SafetySpec, dfa_step, label,
                       labels_within, load_dfa_file, reachable_dfa_states,
                       trace_accepted)
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DomainError, GameshieldError, HorizonError,
                     InterfaceInfeasibleError, OutOfDomainError,
                     RelationInfeasibleError, SizingError)
from .game import LinearGaussianGame, output, step_dynamics, validate_game
from .oracle import (OracleInstance, build_product, exhaustive_violation_bound_check,
                     load_instance, policy_value, worst_case_adversary)
from .runtime import (AugmentedState, EpisodeTrace, init_augmented,
                      propagate_abstract, recover_noise, run_episode, run_step)
from .simulate import MetricsSummary, monte_carlo
from .supervisor import (ACCEPT, Decision, REJECT_RELATION, REJECT_RISK,
                         SupervisorRuntime, c1_update, c2_lookahead,
                         feasible_abstract_inputs)

__version__ = "0.1.0"
