"""MaxK top-k feature sparsification with CBSR-format sparse aggregation kernels."""

__version__ = "0.1.0"

from .cbsr import CbsrMatrix, PivotStats, densify, maxk_backward, maxk_forward, pivot_select_row
from .estimators import MaxK, MaxKGNNClassifier, MaxKMLPRegressor
from .graph import CsrGraph, NormalizationKind, load_matrix_market, normalize, transpose_view
from .kernels import ExecMode, dense_spmm, spgemm_forward, sspmm_backward
from .partition import EdgeGroupPlan, build_plan, plan_stats

__all__ = [
    "CbsrMatrix",
    "CsrGraph",
    "EdgeGroupPlan",
    "ExecMode",
    "MaxK",
    "MaxKGNNClassifier",
    "MaxKMLPRegressor",
    "NormalizationKind",
    "PivotStats",
    "build_plan",
    "dense_spmm",
    "densify",
    "load_matrix_market",
    "maxk_backward",
    "maxk_forward",
    "normalize",
    "pivot_select_row",
    "plan_stats",
    "spgemm_forward",
    "sspmm_backward",
    "transpose_view",
]
