"""Quantile treatment effects on the treated via quantile factor models."""

from .baselines import PcaFit, gscm_qtt, oracle_qtt, pca_factors, select_rank_ic
from .inference import (
    BlockPlan,
    BootstrapResult,
    bootstrap_factor_interacted,
    bootstrap_qtt,
    draw_block_sample,
    make_block_plan,
)
from .panel import PanelData, PanelError, load_panel, split_control_treated, write_panel
from .qfm import QfmFit, QuantileFactorModel, RankSelection, fit_iqr, fit_isqr, normalize, select_rank
from .qr import (
    ConvergenceError,
    QrProblem,
    RankDeficientError,
    SmoothingSpec,
    check_loss,
    fit_qr,
    fit_sqr,
    kernel_K,
    kernel_k,
    score_psi,
)
from .qtt import (
    FactorInteractedQtt,
    QttEstimate,
    QttEstimator,
    TimeVaryingQtt,
    estimate_qtt,
    estimate_qtt_factor_interacted,
    estimate_qtt_multi,
    estimate_qtt_time_varying,
    predict_quantile_path,
)
from .simulate import DgpSpec, McReport, generate, run_mc

__version__ = "0.1.0"

__all__ = [
    "BlockPlan",
    "BootstrapResult",
    "ConvergenceError",
    "DgpSpec",
    "FactorInteractedQtt",
    "McReport",
    "PanelData",
    "PanelError",
    "PcaFit",
    "QfmFit",
    "QrProblem",
    "QttEstimate",
    "QttEstimator",
    "QuantileFactorModel",
    "RankDeficientError",
    "RankSelection",
    "SmoothingSpec",
    "TimeVaryingQtt",
    "bootstrap_factor_interacted",
    "bootstrap_qtt",
    "check_loss",
    "draw_block_sample",
    "estimate_qtt",
    "estimate_qtt_factor_interacted",
    "estimate_qtt_multi",
    "estimate_qtt_time_varying",
    "fit_iqr",
    "fit_isqr",
    "fit_qr",
    "fit_sqr",
    "generate",
    "gscm_qtt",
    "kernel_K",
    "kernel_k",
    "load_panel",
    "make_block_plan",
    "normalize",
    "oracle_qtt",
    "pca_factors",
    "predict_quantile_path",
    "run_mc",
    "score_psi",
    "select_rank",
    "select_rank_ic",
    "split_control_treated",
    "write_panel",
]
