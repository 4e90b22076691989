"""
Sliced Shapley 値のモンテカルロ推定
"""

from .sampler import SsvEstimate, SsvSampler, estimate_ssv, sample_once
from .stats import converged, mae, required_samples
from .table import ContributionTable, load_table, merge_tables, save_table

__all__ = [
    "ContributionTable", "SsvEstimate", "SsvSampler", "converged", "estimate_ssv", "load_table",
    "mae", "merge_tables", "required_samples", "sample_once", "save_table",
]
