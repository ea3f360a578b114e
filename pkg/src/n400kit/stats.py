"""Hypothesis tests and multiple-comparison corrections."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ._special import betainc, gammaincc
from .errors import InputError, NumericalError

ALTERNATIVES = ("two_sided", "less", "greater")
FDR_METHODS = ("BH", "BY")


@dataclass(frozen=True)
class TestResult:
    """Outcome of a single hypothesis test.

    ``alternative`` is ``"less"`` when the alternative hypothesis is that the
    first sample (or reduced model) has the smaller mean; LRTs are always
    reported as ``"greater"`` (upper chi-square tail).
    """

    __test__ = False  # not a pytest class

    statistic: float
    df: float
    p_raw: float
    alternative: str = "two_sided"
    label: str = ""
    p_adjusted: Optional[float] = None
    method: str = ""

    def with_adjusted(self, p_adjusted, method):
        return replace(self, p_adjusted=float(p_adjusted), method=method)


def chi_square_sf(x, df):
    """Upper tail probability of the chi-square distribution."""
    x = float(x)
    df = float(df)
    if not df > 0 or math.isnan(df):
        raise InputError(f"chi-square df must be positive, got {df}")
    if not x >= 0:
        raise InputError(f"chi-square statistic must be nonnegative, got {x}")
    return gammaincc(df / 2.0, x / 2.0)


def t_sf(t, df):
    """Upper tail probability P(T > t) of Student's t with ``df`` degrees of freedom."""
    t = float(t)
    df = float(df)
    if not df > 0 or math.isinf(df):
        raise InputError(f"t df must be positive and finite, got {df}")
    if math.isnan(t):
        raise InputError("t statistic is NaN")
    if t == 0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    # x = df / (df + t^2) and its complement, each formed without cancellation
    x = df / (df + t2)
    y = t2 / (df + t2)
    tail = 0.5 * betainc(df / 2.0, 0.5, x, y)
    return tail if t > 0 else 1.0 - tail


def _p_from_t(t, df, alternative):
    if alternative == "greater":
        return t_sf(t, df)
    if alternative == "less":
        return t_sf(-t, df)
    if alternative == "two_sided":
        return min(1.0, 2.0 * t_sf(abs(t), df))
    raise InputError(f"unknown alternative {alternative!r}; expected one of {ALTERNATIVES}")


def welch_t(a, b, alternative="two_sided", label=""):
    """Welch's unequal-variance two-sample t-test.

    Parameters
    ----------
    a, b : array_like
        The two samples.
    alternative : {"two_sided", "less", "greater"}
        ``"less"`` tests whether mean(a) < mean(b).

    Returns
    -------
    TestResult
        With Welch-Satterthwaite (fractional) degrees of freedom.
    """
    if alternative not in ALTERNATIVES:
        raise InputError(f"unknown alternative {alternative!r}; expected one of {ALTERNATIVES}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise InputError(f"welch_t needs at least 2 observations per sample, got {na} and {nb}")
    va = a.var(ddof=1) / na
    vb = b.var(ddof=1) / nb
    if va == 0 and vb == 0:
        raise InputError("welch_t: both samples have zero variance")
    se2 = va + vb
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (na - 1) + vb * vb / (nb - 1))
    return TestResult(statistic=float(t), df=float(df), p_raw=_p_from_t(t, df, alternative),
                      alternative=alternative, label=label)


def lrt(reduced, full, label=""):
    """Likelihood-ratio test between two nested ML fits.

    The caller is responsible for the nesting claim; what is checked here is
    that both models were fit to the same data and that ``full`` has more
    fixed effects.
    """
    if reduced.fingerprint != full.fingerprint:
        raise InputError("lrt: models were fit to different data (fingerprint mismatch)")
    df = full.n_fixed - reduced.n_fixed
    if df <= 0 or full.n_params <= reduced.n_params:
        raise InputError(
            f"lrt: full model must have more fixed effects than the reduced one "
            f"(got {full.n_fixed} vs {reduced.n_fixed})")
    if not (math.isfinite(full.loglik) and math.isfinite(reduced.loglik)):
        raise NumericalError("lrt: non-finite log-likelihood")
    stat = max(0.0, 2.0 * (full.loglik - reduced.loglik))
    return TestResult(statistic=stat, df=float(df), p_raw=chi_square_sf(stat, df),
                      alternative="greater", label=label)


def fdr_adjust(ps: Sequence[float], method="BY"):
    """Step-up false discovery rate adjustment.

    ``method`` is ``"BH"`` (Benjamini-Hochberg) or ``"BY"`` (Benjamini-Yekutieli,
    valid under arbitrary dependence). Adjusted values are returned in the
    input order and capped at 1.
    """
    method = method.upper()
    if method not in FDR_METHODS:
        raise InputError(f"unknown FDR method {method!r}; expected one of {FDR_METHODS}")
    p = np.asarray(ps, dtype=float)
    if p.ndim != 1:
        raise InputError("fdr_adjust expects a flat sequence of p-values")
    if p.size == 0:
        return []
    if np.any(~(p >= 0) | ~(p <= 1)):
        raise InputError("fdr_adjust: p-values must lie in [0, 1]")
    m = p.size
    c = float(np.sum(1.0 / np.arange(1, m + 1))) if method == "BY" else 1.0
    order = np.argsort(p, kind="mergesort")
    ranks = np.arange(1, m + 1)
    scaled = p[order] * m * c / ranks
    # running minimum from the largest p downwards
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(1.0, stepped)
    return out.tolist()


def adjust_results(results, method="BY"):
    """Attach FDR-adjusted p-values to a family of TestResults."""
    results = list(results)
    adjusted = fdr_adjust([r.p_raw for r in results], method)
    return [r.with_adjusted(q, method.upper()) for r, q in zip(results, adjusted)]


def mean_sd(xs):
    """Arithmetic mean and sample standard deviation (n - 1 denominator)."""
    x = np.asarray(xs, dtype=float)
    if x.size < 2:
        raise InputError(f"mean_sd needs at least 2 values, got {x.size}")
    return float(x.mean()), float(x.std(ddof=1))


def standard_error(xs):
    x = np.asarray(xs, dtype=float)
    if x.size < 2:
        raise InputError(f"standard error needs at least 2 values, got {x.size}")
    return float(x.std(ddof=1) / math.sqrt(x.size))
