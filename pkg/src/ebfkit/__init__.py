"""ebfkit: mixed-effects fitting and empirical Bayes factors for random effects."""

from .artifact import load_fit, save_fit
from .bayes import (
    McmcConfig,
    PosteriorFit,
    diagnostics,
    gaussian_approx,
    gibbs_lmm,
    mwg_glmm,
)
from .classical import (
    FittedModel,
    blup_with_covariance,
    diagonal_omega_fallback,
    fit_lmm,
    profile_loglik,
    with_diagonal_omega,
)
from .covstruct import (
    Adjacency,
    car_cov,
    diag_cov,
    gp_se_kernel,
    intercept_slope_cov,
    log_det_psd,
)
from .criteria import CriteriaReport, aic, bic, dic, kfold_cv, lrt_chibar
from .datasets import load_scotland
from .ebf import EbfResult, ebf_for_term, ebf_joint, log_ebf
from .errors import DataError, EbfkitError, FormulaError, NumericalError, UserInputError
from .model import Dataset, ModelSpec, RandomTerm, build_design, parse_formula, read_csv, validate
from .simulate import SimGrid, SimResult, exact_scale, gen_crossed, pvalue_study_chibar, run_grid

__version__ = "0.1.0"
