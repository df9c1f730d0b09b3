"""Calibrated bound ``floor + sigma * ln(N) / N`` and what follows from it:
sample-budget inversion, the two-factor sample-complexity ratio and the
parameter/memory scale table.
"""

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InfeasibleTargetError, InputError
from .riskbound import ct_amplifications

ARCHS = ("ko", "fc")
BYTES_FP32 = 4
BYTES_ADAM = 16
_UNITS = ("B", "KiB", "MiB", "GiB")


@dataclass(frozen=True)
class SweepRecord:
    arch: str
    h: int
    v: int
    b: int
    n: int
    seed: int
    lam: float
    train_err: float
    val_err: float
    test_err: float
    metric: str = "mse"
    fit_wall_ms: float = 0.0
    error_flag: str = ""

    @property
    def ok(self):
        return not self.error_flag and math.isfinite(self.test_err)


@dataclass(frozen=True)
class CalibrationFit:
    arch: str
    h: int
    floor: float
    sigma: float
    n_points: int
    metric: str = "mse"
    warning: str = ""


def log_ratio(n):
    """``ln(N) / N``."""
    return math.log(n) / n


def mean_curve(records):
    """Sorted N values and the seed-mean error at each."""
    groups = defaultdict(list)
    for r in records:
        if r.ok:
            groups[r.n].append(r.test_err)
    ns = sorted(groups)
    return np.array(ns, dtype=float), np.array([np.mean(groups[n]) for n in ns])


def fit_curve(ns, means):
    """``(floor, sigma, warning)`` for one learning curve.

    The floor is the smallest mean error observed; sigma is the
    no-intercept least-squares slope of ``mean - floor`` against
    ``ln N / N``, clamped at zero.
    """
    ns = np.asarray(ns, dtype=float)
    means = np.asarray(means, dtype=float)
    if len(np.unique(ns)) < 2:
        raise InputError("calibration needs at least two distinct N")
    if np.any(ns < 2):
        raise InputError("calibration needs N >= 2 everywhere")
    t = np.log(ns) / ns
    floor = float(np.min(means))
    sigma = float(np.dot(means - floor, t) / np.dot(t, t))
    warning = ""
    if sigma < 0:
        warning = f"negative slope {sigma:.3g} clamped to 0"
        sigma = 0.0
    return floor, sigma, warning


def fit_calibration(records):
    """Calibrate one (arch, h, metric) group of sweep records."""
    records = list(records)
    keys = {(r.arch, r.h, r.metric) for r in records}
    if len(keys) != 1:
        raise InputError(f"records must share one (arch, h, metric), got {sorted(keys)}")
    arch, h, metric = keys.pop()
    ns, means = mean_curve(records)
    floor, sigma, warning = fit_curve(ns, means)
    if warning:
        warnings.warn(f"{arch} h={h}: {warning}", RuntimeWarning, stacklevel=2)
    return CalibrationFit(arch, h, floor, sigma, len(ns), metric, warning)


def calibrated_bound(fit, n):
    if n < 2:
        raise InputError(f"need N >= 2, got {n}")
    return fit.floor + fit.sigma * log_ratio(n)


def invert_for_n(fit, epsilon):
    """Smallest integer ``N >= 2`` whose calibrated bound is at most ``epsilon``."""
    if not epsilon > fit.floor:
        raise InfeasibleTargetError(
            f"target {epsilon:.6g} is not above the floor {fit.floor:.6g}"
        )
    if fit.sigma <= 0:
        return 2
    for n in (2, 3):
        if calibrated_bound(fit, n) <= epsilon:
            return n
    # ln(N)/N decreases for N >= 3: bracket, then bisect.
    lo, hi = 3, 6
    while calibrated_bound(fit, hi) > epsilon:
        lo, hi = hi, 2 * hi
        if hi > 2**62:
            raise InfeasibleTargetError(f"target {epsilon:.6g} needs more than 2^62 samples")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if calibrated_bound(fit, mid) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


class SampleComplexityRatio(NamedTuple):
    structural_factor: float
    budget_factor: float
    double_ratio: float


def sample_complexity_ratio(fit_ko, fit_fc, epsilon):
    """Ratio of ``N / ln N`` needed by FC over KO to reach ``epsilon``.

    Splits into the slope ratio ``sigma_fc / sigma_ko`` and the
    approximation-budget factor ``(eps - floor_ko) / (eps - floor_fc)``.
    """
    if not epsilon > max(fit_ko.floor, fit_fc.floor):
        raise InfeasibleTargetError(
            f"target {epsilon:.6g} must exceed both floors "
            f"({fit_ko.floor:.6g}, {fit_fc.floor:.6g})"
        )
    if fit_ko.sigma == 0:
        raise InputError("sigma_ko is zero; the structural factor is undefined")
    structural = fit_fc.sigma / fit_ko.sigma
    budget = (epsilon - fit_ko.floor) / (epsilon - fit_fc.floor)
    return SampleComplexityRatio(structural, budget, structural * budget)


def structural_sparsity_factor(h, norm_k, norm_at):
    """Matched-kappa slope ratio ``H^2 / (4 ||K||^2 ||A^T||^2)``."""
    if not (norm_k > 0 and norm_at > 0):
        raise InputError("operator norms must be > 0")
    return h * h / (4.0 * norm_k**2 * norm_at**2)


def structural_sparsity_from_counts(geom, norm_k, norm_at):
    """The same factor assembled from amplifications and parameter counts."""
    counts = parameter_counts(geom)
    a1_ko = ct_amplifications(norm_k, norm_at)[0]
    a1_fc = 2
    return (a1_fc * counts.p_fc) / (a1_ko * counts.p_ko)


class ParameterCounts(NamedTuple):
    p_ko: int
    p_fc: int
    ratio: int


def parameter_counts(geom):
    p_ko = geom.v * geom.b
    p_fc = geom.h * geom.h * p_ko
    return ParameterCounts(p_ko, p_fc, p_fc // p_ko)


class MemoryTable(NamedTuple):
    ko_fp32_bytes: int
    ko_adam_bytes: int
    fc_fp32_bytes: int
    fc_adam_bytes: int

    def formatted(self):
        return {k: format_bytes(v) for k, v in self._asdict().items()}


def memory_table(geom):
    c = parameter_counts(geom)
    return MemoryTable(
        c.p_ko * BYTES_FP32, c.p_ko * BYTES_ADAM, c.p_fc * BYTES_FP32, c.p_fc * BYTES_ADAM
    )


def format_bytes(n):
    """Binary-prefixed size with three significant digits, at most two decimals.

    The unit is the largest one in which the value is still at least 0.1,
    so 320 B prints as ``0.31 KiB`` and 90 KiB stays ``90.0 KiB``.
    """
    value, unit = float(n), 0
    while unit + 1 < len(_UNITS) and value / 1024 >= 0.1:
        value /= 1024
        unit += 1
    if value >= 100:
        text = f"{value:.0f}"
    elif value >= 10:
        text = f"{value:.1f}"
    else:
        text = f"{value:.2f}"
    return f"{text} {_UNITS[unit]}"


def format_count(n):
    """Three-significant-digit scientific form, e.g. ``1.51e9``; small counts verbatim."""
    if n < 100:
        return str(n)
    mantissa, exponent = f"{n:.2e}".split("e")
    return f"{mantissa}e{int(exponent)}"
