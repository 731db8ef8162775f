"""Variance estimators, confidence intervals and study-level diagnostics."""

from .resampling import (
    bca_interval,
    cluster_bootstrap,
    cluster_jackknife,
    cluster_sandwich,
    hc_corrected,
    jackknife,
    pairs_bootstrap,
    sandwich,
    wald_interval,
)

__all__ = [
    "bca_interval",
    "cluster_bootstrap",
    "cluster_jackknife",
    "cluster_sandwich",
    "hc_corrected",
    "jackknife",
    "pairs_bootstrap",
    "sandwich",
    "wald_interval",
]
