"""Variational Bayes filtering and smoothing for linear models with skew t measurement noise."""

__version__ = "0.1.0"

from .distributions import (  # noqa: E402
    SkewTParams,
    chi2_quantile,
    sample_skew_t,
    skew_t_logpdf,
    skew_t_moments,
    skew_t_pdf,
    student_t_cdf,
    student_t_logpdf,
    student_t_pdf,
    trunc_normal_moments,
)
from .filters import (  # noqa: E402
    GaussianBelief,
    VbConfig,
    VbLatentState,
    kf_gated_update,
    kf_predict,
    kf_update,
    pf_init,
    pf_step,
    run_kf,
    run_kf_gated,
    run_pf,
    run_stvbf,
    run_tvbf,
    stvbf_step,
    tvbf_step,
)
from .smoothers import rtss, rtss_g, stvbs, tvbs  # noqa: E402
from .statespace import StateSpaceModel, Trajectory, simulate  # noqa: E402
