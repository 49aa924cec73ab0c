"""Fairness post-processing with additive correction modules."""
__version__ = "0.1.0"

from .dataset import (BINARY, CATEGORICAL, CONTINUOUS, REGRESSION, CsvSchema, DatasetTable, SplitSpec,
                      SynthSpec, load_csv, split, standardize, subsample_sensitive, synth_two_group, write_csv)
from .divergence import MSE, KLBernoulli, bregman_glm, kl_bernoulli, mse_divergence
from .errors import *  # noqa: F401,F403
from .glm import EquivReport, lip_value, lpp_value, verify_equivalence
from .metrics import fpr_gap, hgr_inf, meo, pareto_filter, posthoc_correlation_analysis, prediction_error, sp_gap
from .model_core import FairModel, FrozenModule, ScoreColumn, ScoreModule, init_module
from .regularizers import Chi2Cond, KdeSP, MinDiffMMD, chi2_cond_penalty, kde_sp_penalty, mindiff_penalty, mmd2
from .training import (ObjectiveSpec, Protocol, TradeoffPoint, TrainConfig, TrainResult, fit_base, fit_frappe,
                       fit_inprocessing, naive_randomized_baseline, sweep)
