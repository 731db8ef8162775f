"""
Calibration oracles for the near-boundary studies: kappa, sigma2_EIF and the
remainder constant c_R (limit and finite-size), computed by quadrature over
W ~ N(0, 1) with the treatment summed out analytically, plus Monte Carlo
cross-checks and the versioned calibration file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional

import bittensor as bt
import numpy as np
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from alevar import CALIBRATION_SCHEMA_VERSION
from alevar.core.dgp import (
    DgpTruth,
    NearBoundaryConfig,
    gen_aipw_iid,
    gen_clustered,
    perturbation_direction,
)
from alevar.core.errors import ConfigError, InvalidSizeError, ReportWriteError
from alevar.core.estimator import EstimatorPipeline, remainder_oracle, true_eif_scores
from alevar.study.config import parse_key_values
from alevar.utils.streams import SeedLike, make_generator, replicate_generator


# Normal density is below 1e-300 past this bound; expit saturates to 0 or 1 there.
QUADRATURE_BOUND = 40.0


def _expect(fn: Callable[[float], float]) -> float:
    """E[fn(W)] for W ~ N(0, 1), integrated over [-QUADRATURE_BOUND, QUADRATURE_BOUND]."""
    value, _ = integrate.quad(
        lambda w: fn(w) * norm.pdf(w),
        -QUADRATURE_BOUND,
        QUADRATURE_BOUND,
        points=(-4.0, 0.0, 4.0),
        epsabs=1e-13,
        epsrel=1e-11,
        limit=200,
    )
    return float(value)


def _direction(mechanism: str) -> Callable[[float], float]:
    if mechanism == "covariate-treatment":
        return lambda w: 1.0
    return lambda w: float(perturbation_direction(w))


def kappa(mechanism: str = "residual-propensity") -> float:
    """E[h(W)^2] for the perturbation direction of ``mechanism``."""
    h = _direction(mechanism)
    return _expect(lambda w: h(w) ** 2)


def sigma2_eif(truth: DgpTruth) -> float:
    """Per-unit variance of the efficient influence function."""
    b3 = truth.beta[3]
    outcome_part = _expect(lambda w: (b3 * w) ** 2)

    def inverse_weights(w: float) -> float:
        # 1/g + 1/(1-g) on the logit scale, finite where expit rounds to 0 or 1
        eta = float(truth.g0_logit(w))
        return 2.0 + math.exp(eta) + math.exp(-eta)

    return outcome_part + truth.sigma_y**2 * _expect(inverse_weights)


def c_r_limit(truth: DgpTruth, config: NearBoundaryConfig) -> float:
    """Limit of s * Var(R_rem) as the number of sampling units s grows."""
    k = kappa(config.mechanism)
    de = truth.design_effect if config.mechanism == "residual-propensity" else 1.0
    return config.lambda_q**2 * config.lambda_g**2 * k**2 * de


def c_r_at(size: int, truth: DgpTruth, config: NearBoundaryConfig) -> float:
    """
    Exact s * Var(R_rem) at ``size`` sampling units (n = size * m rows) for the
    residual-propensity mechanism, including the O(s^{-1/2}) terms.
    """
    if config.mechanism != "residual-propensity":
        raise ValueError("finite-size quadrature is only available for the residual-propensity mechanism")
    if int(size) < 2:
        raise InvalidSizeError(f"size must be at least 2, got {size}")
    s = float(size)
    n = s * truth.m
    rate = s**-0.25
    dg = config.lambda_g * rate
    h = _direction(config.mechanism)

    def parts(w: float):
        eta = float(truth.g0_logit(w))
        hw = h(w)
        eta_t = eta + dg * hw
        g = float(expit(eta))
        # inverse propensities via 1/expit(x) = 1 + exp(-x)
        inv_g, inv_1g = 1.0 + math.exp(-eta), 1.0 + math.exp(eta)
        inv_gt, inv_1gt = 1.0 + math.exp(-eta_t), 1.0 + math.exp(eta_t)
        v1, v0 = -hw * inv_gt, hw * inv_1gt
        w1, w0 = inv_gt - inv_g, -(inv_1gt - inv_1g)
        return g, v1, v0, w1, w0

    def moment(select: Callable[..., float]) -> float:
        def fn(w: float) -> float:
            g, v1, v0, w1, w0 = parts(w)
            return g * select(v1, w1) + (1.0 - g) * select(v0, w0)

        return _expect(fn)

    ev = moment(lambda v, _: v)
    ev2 = moment(lambda v, _: v * v)
    ew = moment(lambda _, x: x)
    ew2 = moment(lambda _, x: x * x)
    evw = moment(lambda v, x: v * x)

    de = truth.design_effect
    sigma_y = truth.sigma_y
    lam_q = config.lambda_q
    shift_term = lam_q**2 * rate**2 * de * (ev2 / n + (1.0 - 1.0 / n) * ev * ev)
    weight_term = (sigma_y**2 * ew2 + (truth.m - 1) * truth.sigma_b**2 * ew * ew) / n
    cross_term = 2.0 * lam_q * rate * sigma_y * de / math.sqrt(n) * ((1.0 - 1.0 / n) * ev * ew + evw / n)
    return s * (shift_term + weight_term + cross_term)


def solve_lambda_g(
    target_ratio: float,
    truth: DgpTruth,
    *,
    lambda_q: float,
    mechanism: str = "residual-propensity",
) -> float:
    """lambda_g giving c_R / sigma2_EIF = ``target_ratio`` in the limit."""
    if target_ratio <= 0 or lambda_q <= 0:
        raise ValueError("target ratio and lambda_q must be positive")
    de = truth.design_effect if mechanism == "residual-propensity" else 1.0
    return math.sqrt(target_ratio * sigma2_eif(truth) / de) / (lambda_q * kappa(mechanism))


def sigma2_eif_monte_carlo(truth: DgpTruth, draws: int = 200_000, seed: SeedLike = 0) -> float:
    data = gen_aipw_iid(draws, truth, make_generator(seed))
    return float(np.var(true_eif_scores(data, truth), ddof=1))


def c_r_monte_carlo(
    size: int,
    truth: DgpTruth,
    config: NearBoundaryConfig,
    *,
    reps: int = 500,
    base_seed: int = 0,
) -> float:
    """size * empirical Var(R_rem) of the near-boundary pipeline over ``reps`` samples."""
    pipeline = EstimatorPipeline(mode="near-boundary", truth=truth, near_boundary=config)
    remainders = np.empty(int(reps))
    for r in range(int(reps)):
        rng = replicate_generator(base_seed, 0, r, "calibration")
        data = gen_clustered(size, truth, rng) if truth.m > 1 else gen_aipw_iid(size, truth, rng)
        remainders[r] = remainder_oracle(pipeline.estimate(data), data, truth).r_rem
    return float(size * np.var(remainders, ddof=1))


@dataclass(frozen=True)
class CalibrationResult:
    kappa: float
    sigma2_eif: float
    c_r: float
    lambda_q: float
    lambda_g: float
    mechanism: str
    c_r_at: Dict[int, float] = field(default_factory=dict)
    schema_version: int = CALIBRATION_SCHEMA_VERSION

    @property
    def c_r_ratio(self) -> float:
        return self.c_r / self.sigma2_eif

    def ratio_at(self, size: int) -> float:
        return self.c_r_at.get(int(size), self.c_r) / self.sigma2_eif


def calibrate(
    truth: DgpTruth,
    config: NearBoundaryConfig,
    sizes: Iterable[int] = (),
) -> CalibrationResult:
    k = kappa(config.mechanism)
    s2 = sigma2_eif(truth)
    limit = c_r_limit(truth, config)
    finite: Dict[int, float] = {}
    sizes = [int(size) for size in sizes]
    if config.mechanism == "residual-propensity":
        finite = {size: c_r_at(size, truth, config) for size in sizes}
    elif sizes:
        # the product shift has O(n^{-1/4}) corrections with no closed quadrature here
        bt.logging.warning(
            f"calibration | mechanism={config.mechanism} has no finite-size c_r; only the limit {limit:.6g} "
            f"is reported for sizes={sorted(sizes)} and can be far off at small n (use --mc-reps to check)"
        )
    result = CalibrationResult(
        kappa=k,
        sigma2_eif=s2,
        c_r=limit,
        lambda_q=config.lambda_q,
        lambda_g=config.lambda_g,
        mechanism=config.mechanism,
        c_r_at=finite,
    )
    bt.logging.info(
        f"calibration | kappa={k:.8g} sigma2_eif={s2:.8g} c_r={limit:.8g} ratio={result.c_r_ratio:.6g} "
        f"sizes={sorted(finite)}"
    )
    return result


def write_calibration(path: str | Path, result: CalibrationResult) -> Path:
    target = Path(path)
    lines = [
        "# alevar calibration constants",
        f"schema_version = {result.schema_version}",
        f"mechanism = {result.mechanism}",
        f"lambda_q = {result.lambda_q!r}",
        f"lambda_g = {result.lambda_g!r}",
        f"kappa = {result.kappa!r}",
        f"sigma2_eif = {result.sigma2_eif!r}",
        f"c_r = {result.c_r!r}",
        f"c_r_ratio = {result.c_r_ratio!r}",
    ]
    lines += [f"c_r_at.{size} = {value!r}" for size, value in sorted(result.c_r_at.items())]
    tmp = target.with_suffix(target.suffix + ".tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("w", encoding="utf-8", newline="\n") as handle:
            handle.write("\n".join(lines) + "\n")
        tmp.replace(target)
    except OSError as exc:
        raise ReportWriteError(f"cannot write calibration file {target}: {exc}") from exc
    return target


def read_calibration(path: str | Path) -> CalibrationResult:
    target = Path(path)
    try:
        text = target.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read calibration file {target}: {exc}") from exc
    values = parse_key_values(text, source=str(target))
    version = values.get("schema_version")
    if version is None or int(version) != CALIBRATION_SCHEMA_VERSION:
        raise ConfigError(
            f"{target}: calibration schema_version {version!r} is not {CALIBRATION_SCHEMA_VERSION}; rerun calibrate"
        )
    try:
        finite = {int(k.split(".", 1)[1]): float(v) for k, v in values.items() if k.startswith("c_r_at.")}
        return CalibrationResult(
            kappa=float(values["kappa"]),
            sigma2_eif=float(values["sigma2_eif"]),
            c_r=float(values["c_r"]),
            lambda_q=float(values["lambda_q"]),
            lambda_g=float(values["lambda_g"]),
            mechanism=values.get("mechanism", "residual-propensity"),
            c_r_at=finite,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{target}: malformed calibration entry: {exc}") from exc


def load_calibration(path: Optional[str | Path]) -> Optional[CalibrationResult]:
    """Tolerant loader used by the harness; a missing path means no calibration."""
    if path is None or not Path(path).exists():
        return None
    return read_calibration(path)
