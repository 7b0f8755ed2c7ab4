"""Counterfactually fair offline reinforcement learning on simulated CMDPs."""
from .cmdp import (
    CmdpSpec, Dataset, Trajectory, counterfactual_dataset, linear_env, make_env, nonlinear_env,
    oracle_counterfactual_trajectory, replay, sample_dataset,
)
from .errors import (
    ArgumentError, CfrlError, CoverageError, DivergenceError, ProtocolError, RankDeficiencyError,
    RegressionFailure, UnsupportedOperationError,
)
from .evaluation import EvalConfig, EvalReport, cf_metric, discounted_return, fqe, fqe_bootstrap_se, rollout
from .experiment import ExperimentConfig, ResultTable, plot_trends, run_experiment
from .policy import (
    METHODS, BehaviorPolicy, FqiConfig, GreedyPolicy, QFunction, RandomPolicy, fqi, greedy_policy, train_baseline,
)
from .preprocess import (
    Marginals, MeanModel, MeanModelConfig, PreprocessedDataset, deploy_step, estimate_marginals,
    fit_transition_mean, flap_single_stage, preprocess,
)
from .regression import LeastSquaresSolver, LinearModel, MlpModel, TensorBasis, TrainConfig, fit_least_squares, fit_mlp
from .transitions import Transitions, from_sequences

__version__ = "0.1.0"
