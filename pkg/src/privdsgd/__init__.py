"""Privacy-preserving decentralized SGD: simulator, privacy calculator, attacks."""

__version__ = "0.1.0"

from .errors import (AssumptionViolated, ConfigError, DegenerateLaw,
                     DimensionMismatch, DisconnectedGraph, InvalidAgentIndex,
                     MissingMessages, PrivDsgdError, QuadratureFailure,
                     SingularSystem, ZeroStepsize)
from .topology import (AgentGraph, CouplingMatrix, build_graph,
                       metropolis_weights, reference_topology,
                       spectral_radius)
from .randomness import (MixingColumn, RandomSource, StepsizeMatrix,
                         StepsizeSchedule, mean_stepsize,
                         sample_mixing_column, sample_stepsize_matrix,
                         verify_schedule)
from .problems import (GradientOracle, MlpNetwork, SensorEstimationProblem,
                       SensorNetwork, closed_form_optimum, estimate_constants,
                       generate_blob_data, generate_sensor_data,
                       stochastic_gradient)
from .simulate import (MessageLog, NetworkState, Trajectory,
                       check_mean_dynamics, conventional_round, private_round,
                       recursion_certificate, run_experiment)
from .privacy import (MonteCarloEstimate, ObfuscationLaw, PrivacyBound,
                      conditional_entropy, evaluate_privacy, joint_entropy,
                      mmse_lower_bound, monte_carlo_mmse,
                      monte_carlo_product_entropy, product_density,
                      product_entropy)
from .attacks import (AttackReport, attack_conventional, attack_private,
                      curious_agent_view, eavesdropper_view,
                      residual_observable, score_gradient_attack)
from .config import ExperimentConfig, load_config_mapping

__all__ = [name for name in dir() if not name.startswith("_")]
