"""Finite-horizon Bayesian optimization of time-dependent oracles.

The r2LEY acquisition values a candidate by the expected maximum of the
posterior mean at the horizon after one more simulated observation.
"""

from .acquisition import AcquisitionParams, ei, pi, propose_myopic, ucb
from .bench import RunConfig, RunRecord, make_config, replicate, run_bo, simple_regret, summarize
from .gp import Dataset, Hyperparams, PosteriorModel, build_model, extend_model_rank_one, fit_hyperparameters
from .kernel import KernelParams
from .lookahead import LookaheadConfig, final_decision, propose_r2ley, r2ley_estimate
from .optimizer import BoxDomain, maximize_box
from .testbed import OracleSpec, eval_oracle, extrema_at_horizon, load_table_oracle, observe, synthetic_oracle

__version__ = "0.1.0"
