"""Instrumental-variable and panel-matching estimators for fertility and employment."""

from .cbps import BalanceReport, balance_report, cbps_fit, cbps_weights
from .design import Dataset, ModelSpec, build_instruments, census_specs, encode, read_csv, subsample
from .errors import *  # noqa: F401,F403
from .iv import (
    anderson_rubin_ci,
    balance_table,
    complier_shares,
    late_by_group,
    ols_effect,
    tsls_fit,
    wald_estimate,
)
from .panel import PanelDataset, att, att_with_ci, find_matched_sets, refine
from .sim import DGPConfig, PanelConfig, oracle, simulate_census, simulate_panel
from .stats import DesignMatrix, bootstrap, hc1_covariance, ols_fit, two_sample_diff, wald_joint_test

__version__ = "0.1.0"
