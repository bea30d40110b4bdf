"""Learning evolution operators of dynamical systems with a contrastive loss.

Train an encoder ``phi`` and a linear predictor ``P`` so that
``<phi(x), P phi(y)>`` approximates the transition density ratio, then use
the least-squares operator on ``phi`` for spectral analysis and forecasting.
"""

from .dynamics import (PairDataset, Trajectory, load_trajectory, lorenz63_trajectory, make_pairs,
                       markov_chain_pairs, ou_trajectory, save_trajectory, split_with_gaps)
from .encoder import Encoder, EncoderConfig, init_params
from .objective import analytic_loss, contrastive_loss, vamp2_score
from .operator import (CovarianceBuffers, EvolutionOperatorModel, batch_covariances, least_squares_operator,
                       optimal_predictor)
from .spectral import eig, forecast, forecast_state, implied_timescale, linls_baseline, mode_frequency
from .training import TrainConfig, finalize_operator, train

__all__ = [
    "Trajectory", "PairDataset", "lorenz63_trajectory", "ou_trajectory", "markov_chain_pairs",
    "split_with_gaps", "make_pairs", "load_trajectory", "save_trajectory",
    "Encoder", "EncoderConfig", "init_params",
    "contrastive_loss", "analytic_loss", "vamp2_score",
    "CovarianceBuffers", "EvolutionOperatorModel", "batch_covariances", "least_squares_operator",
    "optimal_predictor",
    "eig", "forecast", "forecast_state", "implied_timescale", "linls_baseline", "mode_frequency",
    "TrainConfig", "train", "finalize_operator",
]

__version__ = "0.1.0"
