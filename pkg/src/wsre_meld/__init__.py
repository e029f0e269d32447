"""Markov melding with weighted-sample self-density ratio estimation."""

__version__ = "0.1.0"

from .density import (AnalyticRatio, ConstantRatio, DensityModel, DimensionError, FunctionModel, MeldError,
                      OutOfSupportError, RatioEvaluator, SampleSet, SamplerError, analytic_ratio, constant_ratio,
                      pow_ratio)
from .kde import GaussianKde, bandwidth_rule, gaussian_product_params, kde_logpdf, naive_ratio, \
    weighted_kde_log_unnorm
from .mcmc import Chain, CustomBlock, MhSettings, RandomWalkBlock, gibbs_blocks, rw_metropolis
from .melding import MeldingRun, PooledPriorRatio, Submodel, pooled_ratio, stage_one, stage_two
from .wsre import (CombinedWsreRatio, JonesRatio, WeightedSampleSet, WeightingFunction, WsreConfig, WsreEstimate,
                   combine, estimate_single, solve_kappa, weighted_target, wsre_pipeline)
from .diagnostics import ess, qq_compare, stuck_runs
