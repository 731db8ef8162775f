"""Seedable data generators for the i.i.d. AIPW, near-boundary and clustered regimes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy.special import expit

from alevar import constants
from alevar.core.errors import InvalidSizeError
from alevar.core.models import ClusteredDataset, Dataset
from alevar.utils.streams import SeedLike, make_generator

MECHANISMS = ("residual-propensity", "covariate-treatment")

# Normaliser giving the perturbation direction unit variance under W ~ N(0, 1).
_DIRECTION_SCALE = math.sqrt(2.0 / math.sqrt(3.0) - 1.0)


@dataclass(frozen=True)
class DgpTruth:
    """
    Generating mechanism: Y = b0 + b1*A + b2*W + b3*A*W + b_j + eps with
    A | W ~ Bernoulli(expit(gamma*W)) and W ~ N(0, 1).
    """

    beta: Tuple[float, float, float, float] = constants.OUTCOME_COEFFICIENTS
    gamma: float = constants.PROPENSITY_SLOPE
    sigma_eps: float = constants.SIGMA_EPS
    sigma_b: float = 0.0
    m: int = 1
    noiseless: bool = False

    def __post_init__(self) -> None:
        if len(self.beta) != 4:
            raise ValueError("beta must hold (intercept, A, W, A*W)")
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be non-negative")
        if int(self.m) < 1:
            raise ValueError("cluster size m must be at least 1")

    @classmethod
    def from_icc(cls, icc: float, m: int, **kwargs) -> "DgpTruth":
        if not 0.0 <= icc < 1.0:
            raise ValueError(f"icc must lie in [0, 1), got {icc}")
        sigma_eps = float(kwargs.pop("sigma_eps", constants.SIGMA_EPS))
        sigma_b = sigma_eps * math.sqrt(icc / (1.0 - icc))
        return cls(sigma_eps=sigma_eps, sigma_b=sigma_b, m=int(m), **kwargs)

    def q0(self, a, w):
        b0, b1, b2, b3 = self.beta
        return b0 + b1 * a + b2 * w + b3 * a * w

    def g0_logit(self, w):
        return self.gamma * np.asarray(w, dtype=float)

    def g0(self, w):
        return expit(self.g0_logit(w))

    @property
    def psi0(self) -> float:
        # E[Q0(1, W) - Q0(0, W)] = b1 + b3 * E[W] with E[W] = 0
        return float(self.beta[1])

    @property
    def icc(self) -> float:
        return self.sigma_b**2 / (self.sigma_b**2 + self.sigma_eps**2)

    @property
    def sigma_y(self) -> float:
        """SD of the outcome residual Y - Q0(A, W)."""
        return math.sqrt(self.sigma_b**2 + self.sigma_eps**2)

    @property
    def design_effect(self) -> float:
        return 1.0 + (self.m - 1) * self.icc

    def without_noise(self) -> "DgpTruth":
        return replace(self, noiseless=True)


@dataclass(frozen=True)
class NearBoundaryConfig:
    lambda_q: float = constants.LAMBDA_Q
    lambda_g: float = constants.LAMBDA_G
    enabled: bool = True
    mechanism: str = constants.NEAR_BOUNDARY_MECHANISM

    def __post_init__(self) -> None:
        if self.lambda_q < 0 or self.lambda_g < 0:
            raise ValueError("perturbation scales must be non-negative")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown near-boundary mechanism {self.mechanism!r}")


def perturbation_direction(w):
    """Bounded, even, mean-zero, unit-variance direction h(w) under W ~ N(0, 1)."""
    w = np.asarray(w, dtype=float)
    return (math.sqrt(2.0) * np.exp(-0.5 * w * w) - 1.0) / _DIRECTION_SCALE


@dataclass(frozen=True)
class NuisanceShift:
    """Realised nuisance errors: Q shift q_amplitude*h(w), logit-g shift g_amplitude*h(w)."""

    q_amplitude: float
    g_amplitude: float
    mechanism: str

    def direction(self, w):
        if self.mechanism == "covariate-treatment":
            return np.ones_like(np.asarray(w, dtype=float))
        return perturbation_direction(w)


def _draw_units(n: int, truth: DgpTruth, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = rng.standard_normal(n)
    a = (rng.random(n) < truth.g0(w)).astype(np.int64)
    eps = rng.standard_normal(n)
    return w, a, eps


def gen_aipw_iid(n: int, truth: DgpTruth, seed: SeedLike) -> Dataset:
    if int(n) < 2:
        raise InvalidSizeError(f"n must be at least 2, got {n}")
    rng = make_generator(seed)
    w, a, eps = _draw_units(int(n), truth, rng)
    y = truth.q0(a, w)
    if not truth.noiseless:
        y = y + truth.sigma_eps * eps
    return Dataset(w=w, a=a, y=y)


def gen_clustered(j_clusters: int, truth: DgpTruth, seed: SeedLike) -> ClusteredDataset:
    if int(j_clusters) < 2:
        raise InvalidSizeError(f"j_clusters must be at least 2, got {j_clusters}")
    j_clusters = int(j_clusters)
    m = int(truth.m)
    n = j_clusters * m
    rng = make_generator(seed)
    w, a, eps = _draw_units(n, truth, rng)
    intercepts = rng.standard_normal(j_clusters)
    cluster_id = np.repeat(np.arange(j_clusters, dtype=np.int64), m)
    y = truth.q0(a, w)
    if not truth.noiseless:
        y = y + truth.sigma_b * intercepts[cluster_id] + truth.sigma_eps * eps
    return ClusteredDataset(
        w=w,
        a=a,
        y=y,
        cluster_id=cluster_id,
        member_index=np.tile(np.arange(m, dtype=np.int64), j_clusters),
    )


def perturbation_amplitudes(data: Dataset, truth: DgpTruth) -> Tuple[float, float]:
    """(eps_q, eps_g): normalised sums of W and of standardised treatment residuals."""
    n = len(data)
    if n == 0:
        raise InvalidSizeError("data must be nonempty")
    g = truth.g0(data.w)
    root_n = math.sqrt(n)
    eps_q = math.fsum(data.w) / root_n
    eps_g = math.fsum((data.a - g) / np.sqrt(g * (1.0 - g))) / root_n
    return eps_q, eps_g


def residual_amplitude(data: Dataset, truth: DgpTruth) -> float:
    """Normalised sum of outcome residuals; variance equals the design effect."""
    n = len(data)
    if n == 0:
        raise InvalidSizeError("data must be nonempty")
    residuals = data.y - truth.q0(data.a, data.w)
    return math.fsum(residuals) / (truth.sigma_y * math.sqrt(n))


def nuisance_shift(data: Dataset, truth: DgpTruth, config: NearBoundaryConfig) -> NuisanceShift:
    """
    Realise the near-boundary nuisance errors for this sample. Both shifts decay
    like s^{-1/4}, s being the number of independent sampling units.
    """
    if not config.enabled:
        return NuisanceShift(q_amplitude=0.0, g_amplitude=0.0, mechanism=config.mechanism)
    rate = float(data.sampling_units) ** -0.25
    if config.mechanism == "covariate-treatment":
        eps_q, eps_g = perturbation_amplitudes(data, truth)
        return NuisanceShift(
            q_amplitude=config.lambda_q * eps_q * rate,
            g_amplitude=config.lambda_g * eps_g * rate,
            mechanism=config.mechanism,
        )
    eps_y = residual_amplitude(data, truth)
    return NuisanceShift(
        q_amplitude=config.lambda_q * eps_y * rate,
        g_amplitude=config.lambda_g * rate,
        mechanism=config.mechanism,
    )


def anova_icc(values: np.ndarray, cluster_id: np.ndarray) -> float:
    """One-way random-effects ANOVA estimate of the intra-cluster correlation."""
    values = np.asarray(values, dtype=float)
    cluster_id = np.asarray(cluster_id, dtype=np.int64)
    _, labels = np.unique(cluster_id, return_inverse=True)
    sizes = np.bincount(labels).astype(float)
    j = sizes.size
    n = values.size
    if j < 2 or n <= j:
        raise InvalidSizeError("ICC needs at least two clusters and some replication within clusters")
    means = np.bincount(labels, weights=values) / sizes
    grand = values.mean()
    msb = math.fsum(sizes * (means - grand) ** 2) / (j - 1)
    msw = math.fsum((values - means[labels]) ** 2) / (n - j)
    n0 = (n - math.fsum(sizes**2) / n) / (j - 1)
    denom = msb + (n0 - 1.0) * msw
    if denom <= 0:
        return 0.0
    return (msb - msw) / denom


def residual_icc(data: Dataset, truth: DgpTruth) -> float:
    if data.cluster_id is None:
        raise ValueError("residual ICC needs clustered data")
    return anova_icc(data.y - truth.q0(data.a, data.w), data.cluster_id)
