"""Conformal data contamination tests.

Each family maps a batch of m conformal p-values to a statistic T and a
p-value u for H0: contamination factor <= pi_th.  Decomposing over the
number k of inliers in the batch, with b_k the inlier-count binomial mass:

  Storey    T = #{p_i > lambda},      exact at any calibration size:
            u = sum_{k>T} b_k F_NHG(floor(lambda (n+1)) - 1; n+k, n, k-T)
                + sum_{k<=T} b_k
  Quantile  T = (n+1) p_(m-i0),       exact:
            u = sum_{k>i0} b_k F_NHG(T - 1; n+k, n, k-i0) + sum_{k<=i0} b_k
  Fisher    T = 2 sum log((n+1) p_i), asymptotic in n
  Sum       T = sum p_i,              asymptotic in n
  GenericG  T = sum g(p_i) for an increasing nonnegative g, asymptotic

with n the calibration-set size.  The asymptotic families share one
formula: u = pi_th^m + sum_{k>=1} b_k F_{g,k}((T + k(s_k - 1) I_g)/s_k)
where s_k = sqrt(1 + k/n), I_g = int_0^1 g, and F_{g,k} is the CDF of a
k-fold sum of g over uniforms.  Storey and Quantile p-values depend on the
data only through a small integer statistic, so their full value tables
are cached per configuration.

The Fisher family defaults to the form derived by mapping its transform
through the chi-square complement (``fisher_formula="derived"``); the
variant with the chi-square CDF applied directly (``"printed"``) is kept
for comparison.  The two differ only by F vs 1-F of the same argument, and
Monte Carlo under the null shows the derived orientation is the
superuniform one that also rejects under heavy contamination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .statdist import (
    GFunction,
    NhgParams,
    binom_pmf_inliers_vector,
    chi2_cdf,
    fisher_variant_g,
    gsum_cdf,
    identity_g,
    nhg_cdf,
    nhg_cdf_table,
)

__all__ = [
    "FAMILIES",
    "ContamTestResult",
    "ContamTestSpec",
    "default_i0",
    "default_lambda",
    "fisher_pvalue",
    "fisher_stat",
    "generic_g_pvalue",
    "quantile_pvalue",
    "quantile_stat",
    "run_contam_test",
    "storey_pvalue",
    "storey_stat",
    "sum_pvalue",
    "sum_stat",
]

FAMILIES = ("storey", "quantile", "fisher", "sum", "generic_g")


@dataclass(frozen=True)
class ContamTestSpec:
    """Test family, contamination threshold, and family hyperparameters.

    lam (Storey) must sit on the grid {1, ..., n_cal}/(n_cal + 1); i0
    (Quantile) in [0, m-1]; g (GenericG) an increasing nonnegative
    transform.  Leave lam/i0 as None to get the defaults
    floor(n_cal/8)/(n_cal+1) and floor(m/3) at run time.
    """

    family: str
    pi_th: float
    lam: float | None = None
    i0: int | None = None
    g: GFunction | None = None
    fisher_formula: str = "derived"  # or "printed"

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        if not 0.0 <= self.pi_th < 1.0:
            raise ConfigurationError(f"pi_th must lie in [0, 1), got {self.pi_th}")
        if self.fisher_formula not in ("derived", "printed"):
            raise ConfigurationError(
                f"fisher_formula must be 'derived' or 'printed', got {self.fisher_formula!r}"
            )


@dataclass(frozen=True)
class ContamTestResult:
    statistic: float
    p_value: float
    spec: ContamTestSpec
    m: int
    n_cal: int


def default_lambda(n_cal: int) -> float:
    """floor(n_cal/8)/(n_cal+1), clamped onto the grid for tiny n_cal."""
    return max(1, n_cal // 8) / (n_cal + 1)


def default_i0(m: int) -> int:
    """floor(m/3)."""
    return m // 3


def lambda_grid_index(lam: float, n_cal: int, snap: bool = False) -> int:
    """Map lam to its integer grid index r with lam = r/(n_cal+1).

    Off-grid values raise unless ``snap`` is set, in which case lam is
    snapped down to floor(lam (n_cal+1)) clamped into [1, n_cal].
    """
    t = lam * (n_cal + 1)
    if snap:
        return min(n_cal, max(1, math.floor(t)))
    r = round(t)
    if abs(t - r) > 1e-9 or not 1 <= r <= n_cal:
        raise ConfigurationError(
            f"lambda={lam} is not on the grid {{1,...,{n_cal}}}/{n_cal + 1}"
        )
    return r


def storey_stat(pvalues, lam: float, n_cal: int, snap: bool = False) -> int:
    """Count of conformal p-values strictly above lambda."""
    r = lambda_grid_index(lam, n_cal, snap=snap)
    lam_grid = r / (n_cal + 1)
    return int(np.sum(np.asarray(pvalues, dtype=float) > lam_grid))


@lru_cache(maxsize=None)
def _storey_table(m: int, n_cal: int, lam_index: int, pi_th: float) -> tuple:
    b = binom_pmf_inliers_vector(m, pi_th)
    head = np.cumsum(b)  # head[t] = sum_{k<=t} b_k
    x = lam_index - 1
    out = []
    for t in range(m + 1):
        if t == m:
            out.append(1.0)  # second sum covers the whole binomial
            continue
        tail = 0.0
        for k in range(t + 1, m + 1):
            tail += b[k] * nhg_cdf(x, NhgParams(n_cal + k, n_cal, k - t))
        out.append(min(1.0, tail + float(head[t])))
    return tuple(out)


def storey_pvalue(T: int, m: int, n_cal: int, spec: ContamTestSpec) -> float:
    if not 0 <= T <= m:
        raise ValueError(f"T must lie in [0, {m}], got {T}")
    lam = spec.lam if spec.lam is not None else default_lambda(n_cal)
    lam_index = lambda_grid_index(lam, n_cal)
    return _storey_table(m, n_cal, lam_index, spec.pi_th)[T]


def quantile_stat(pvalues, i0: int, n_cal: int) -> int:
    """T = (n_cal+1) p_(m-i0), an integer by the p-value grid property."""
    p = np.sort(np.asarray(pvalues, dtype=float))
    m = p.size
    if not 0 <= i0 <= m - 1:
        raise ConfigurationError(f"i0 must lie in [0, {m - 1}], got {i0}")
    t = p[m - i0 - 1] * (n_cal + 1)
    T = round(t)
    if abs(t - T) > 1e-6 or not 1 <= T <= n_cal + 1:
        raise ValueError(
            f"p-value {p[m - i0 - 1]} is not on the conformal grid for n_cal={n_cal}"
        )
    return int(T)


@lru_cache(maxsize=None)
def _quantile_table(m: int, n_cal: int, i0: int, pi_th: float) -> tuple:
    b = binom_pmf_inliers_vector(m, pi_th)
    base = float(np.sum(b[: i0 + 1]))
    if i0 + 1 > m:
        tail = np.zeros(n_cal + 1)
    else:
        rows = np.stack(
            [
                nhg_cdf_table(NhgParams(n_cal + k, n_cal, k - i0))
                for k in range(i0 + 1, m + 1)
            ]
        )
        tail = rows.T @ b[i0 + 1 :]
    return tuple(np.minimum(base + tail, 1.0))  # index x corresponds to T = x+1


def quantile_pvalue(T: int, m: int, n_cal: int, spec: ContamTestSpec) -> float:
    if not 1 <= T <= n_cal + 1:
        raise ValueError(f"T must lie in [1, {n_cal + 1}], got {T}")
    i0 = spec.i0 if spec.i0 is not None else default_i0(m)
    if not 0 <= i0 <= m - 1:
        raise ConfigurationError(f"i0 must lie in [0, {m - 1}], got {i0}")
    return _quantile_table(m, n_cal, i0, spec.pi_th)[T - 1]


def fisher_stat(pvalues, n_cal: int) -> float:
    """T = 2 sum_i log((n_cal+1) p_i); zero iff every p-value is minimal."""
    p = np.asarray(pvalues, dtype=float)
    if np.any(p <= 0.0):
        raise ValueError("p-values must be positive (grid property violated)")
    return float(np.sum(fisher_variant_g(n_cal)(p)))


def _gsum_pvalue(T: float, m: int, n_cal: int, pi_th: float, g: GFunction) -> float:
    b = binom_pmf_inliers_vector(m, pi_th)
    acc = pi_th**m
    for k in range(1, m + 1):
        if b[k] < 1e-18:
            # the skipped terms total below 1e-16 since every CDF is <= 1
            continue
        scale = math.sqrt(1.0 + k / n_cal)
        y = (T + k * (scale - 1.0) * g.exact_integral) / scale
        acc += b[k] * gsum_cdf(y, k, g)
    return min(1.0, acc)


def _fisher_printed_pvalue(T: float, m: int, n_cal: int, pi_th: float) -> float:
    # The combination formula as printed, with the chi-square CDF applied
    # directly rather than through the complement mapping.  Kept only for
    # side-by-side comparison: its orientation reverses, so it does not
    # reject under heavy contamination.
    b = binom_pmf_inliers_vector(m, pi_th)
    ln_inv = math.log(1.0 / (n_cal + 1.0))
    acc = pi_th**m
    for k in range(1, m + 1):
        scale = math.sqrt(1.0 + k / n_cal)
        arg = (-T - 2.0 * k * ln_inv + 2.0 * k * (scale - 1.0)) / scale
        acc += b[k] * chi2_cdf(arg, 2 * k)
    return min(1.0, acc)


def fisher_pvalue(T: float, m: int, n_cal: int, spec: ContamTestSpec) -> float:
    if spec.fisher_formula == "printed":
        return _fisher_printed_pvalue(T, m, n_cal, spec.pi_th)
    return _gsum_pvalue(T, m, n_cal, spec.pi_th, fisher_variant_g(n_cal))


def sum_stat(pvalues) -> float:
    return float(np.sum(identity_g(np.asarray(pvalues, dtype=float))))


def sum_pvalue(T: float, m: int, n_cal: int, spec: ContamTestSpec) -> float:
    if not -1e-12 <= T <= m + 1e-12:
        raise ValueError(f"T must lie in [0, {m}], got {T}")
    return _gsum_pvalue(T, m, n_cal, spec.pi_th, identity_g)


def generic_g_pvalue(pvalues, g: GFunction, n_cal: int, pi_th: float) -> float:
    """Asymptotic p-value for the statistic sum_i g(p_i).

    With g tagged identity or fisher this reproduces sum_pvalue and the
    derived fisher_pvalue bit for bit (same code path); untagged g goes
    through the Monte Carlo CDF.
    """
    p = np.asarray(pvalues, dtype=float)
    T = float(np.sum(g(p)))
    return _gsum_pvalue(T, p.size, n_cal, pi_th, g)


def _resolve_spec(spec: ContamTestSpec, m: int, n_cal: int) -> ContamTestSpec:
    if spec.family == "storey" and spec.lam is None:
        return replace(spec, lam=default_lambda(n_cal))
    if spec.family == "quantile" and spec.i0 is None:
        return replace(spec, i0=default_i0(m))
    return spec


def run_contam_test(pvalues, spec: ContamTestSpec, n_cal: int) -> ContamTestResult:
    """Dispatch on the family: compute the statistic, then its p-value.

    The returned result carries the resolved spec (defaults filled in) so a
    run is reproducible from its record alone.
    """
    p = np.asarray(pvalues, dtype=float)
    m = int(p.size)
    if m == 0:
        raise ConfigurationError("empty batch: need at least one conformal p-value")
    spec = _resolve_spec(spec, m, n_cal)
    if spec.family == "storey":
        T = storey_stat(p, spec.lam, n_cal)
        u = storey_pvalue(T, m, n_cal, spec)
    elif spec.family == "quantile":
        if not 0 <= spec.i0 <= m - 1:
            raise ConfigurationError(f"i0 must lie in [0, {m - 1}], got {spec.i0}")
        T = quantile_stat(p, spec.i0, n_cal)
        u = quantile_pvalue(T, m, n_cal, spec)
    elif spec.family == "fisher":
        T = fisher_stat(p, n_cal)
        u = fisher_pvalue(T, m, n_cal, spec)
    elif spec.family == "sum":
        T = sum_stat(p)
        u = sum_pvalue(T, m, n_cal, spec)
    else:  # generic_g
        if spec.g is None:
            raise ConfigurationError("generic_g family requires a GFunction")
        T = float(np.sum(spec.g(p)))
        u = _gsum_pvalue(T, m, n_cal, spec.pi_th, spec.g)
    return ContamTestResult(
        statistic=float(T), p_value=float(u), spec=spec, m=m, n_cal=n_cal
    )
