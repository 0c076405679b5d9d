"""Statistics and linear-algebra kernel with no external statistics dependency."""

from .distributions import betainc, normal_cdf, normal_sf, t_cdf, t_sf, t_two_sided_p
from .fdr import FdrResult, bh_adjust
from .fisher import fisher_exact
from .inference import (
    TestResult,
    UndefinedCorrelation,
    cohens_d,
    one_sample_t,
    pearson_r,
    tost_equivalence,
    welch_t,
)
from .logistic import FitError, ProbeModel, fit_logistic, logistic_grad, logistic_loss
from .svd import SvdSpectrum, svd_spectrum

__all__ = [
    "FdrResult", "FitError", "ProbeModel", "SvdSpectrum", "TestResult", "UndefinedCorrelation",
    "betainc", "bh_adjust", "cohens_d", "fisher_exact", "fit_logistic", "logistic_grad",
    "logistic_loss", "normal_cdf", "normal_sf", "one_sample_t", "pearson_r", "svd_spectrum",
    "t_cdf", "t_sf", "t_two_sided_p", "tost_equivalence", "welch_t",
]
