"""Dynamic regression and classification trees for data streams.

Particle clouds of treed partition models are updated one observation at a
time. A fixed budget of active points is kept by retiring old or
uninformative points into conjugate leaf priors, optionally with
exponential forgetting.
"""

__version__ = "0.1.0"

from .leaf import (
    LeafPosterior,
    MultinomialPrior,
    Predictive,
    RegressionPrior,
    log_marginal_likelihood,
    pool_priors,
    posterior,
    predictive,
    retire_into_prior,
    split_prior,
)
from .tree import Move, SplitRule, Tree, TreePriorConfig, apply_move, leaf_of, local_moves
from .discard import DiscardPolicy, alc_reduction, rect_integral, retire, select_retiree
from .smc import CloudConfig, ParticleCloud, Prediction
from .streams import (
    CsvSchema,
    DataError,
    MetricTrace,
    Observation,
    Stream,
    auc,
    ccr,
    gen_friedman,
    gen_moving_xor,
    gen_parabola,
    load_csv,
    prequential_eval,
    rmse,
    run_stream,
)

__all__ = [
    "CloudConfig", "CsvSchema", "DataError", "DiscardPolicy", "LeafPosterior", "MetricTrace",
    "Move", "MultinomialPrior", "Observation", "ParticleCloud", "Prediction", "Predictive",
    "RegressionPrior", "SplitRule", "Stream", "Tree", "TreePriorConfig", "alc_reduction",
    "apply_move", "auc", "ccr", "gen_friedman", "gen_moving_xor", "gen_parabola", "leaf_of",
    "load_csv", "local_moves", "log_marginal_likelihood", "pool_priors", "posterior",
    "predictive", "prequential_eval", "rect_integral", "retire", "retire_into_prior", "rmse",
    "run_stream", "select_retiree", "split_prior",
]
