"""Linear mixed-effects models with crossed random intercepts, fit by ML.

The model is ``y = X beta + Z b + e`` with ``b_g ~ N(0, sigma^2 theta_g^2 I)``
for each grouping factor ``g`` and ``e ~ N(0, sigma^2 I)``. For a fixed
vector of relative standard deviations ``theta`` the fixed effects and the
residual variance have closed forms, so only ``theta`` is searched
numerically (profiled deviance). Writing ``Lambda = diag(theta_g)`` and
``b = Lambda u``, the penalized least-squares problem

    min ||y - X beta - Z Lambda u||^2 + ||u||^2

is solved through a Cholesky factor of ``Lambda Z'Z Lambda + I``, which stays
well defined when a component of ``theta`` is exactly zero. All products with
the data are accumulated once, so each deviance evaluation costs
``O(q^3)`` regardless of the number of rows.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sps
from scipy.optimize import minimize

from .errors import InputError, NumericalError

INTERCEPT = "(Intercept)"
SINGULAR_THRESHOLD = 1e-4
DENSE_ORACLE_MAX_N = 2000
SUMMARY_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    """Outcome, fixed-effect terms and random-intercept factors.

    Terms are column names; ``"a:b"`` denotes the interaction of two columns.
    Non-numeric columns are treated as categorical and treatment coded with
    the alphabetically first level as reference.
    """

    outcome: str = "amplitude"
    fixed_terms: tuple = ()
    random_intercepts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_intercepts", tuple(self.random_intercepts))

    def with_terms(self, *terms):
        return ModelSpec(self.outcome, self.fixed_terms + tuple(terms), self.random_intercepts)


def _is_categorical(series):
    return not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series)


@dataclass(frozen=True)
class DesignInfo:
    """Recipe for rebuilding the fixed-effects matrix on new rows."""

    terms: tuple
    categorical: dict
    column_names: tuple
    keep: tuple

    def _block(self, table, col):
        if col in self.categorical:
            levels = self.categorical[col]
            values = table[col].astype(str).to_numpy()
            unknown = set(values) - set(levels)
            if unknown:
                raise InputError(f"column {col!r} has levels unseen at fit time: {sorted(unknown)[:5]}")
            mat = np.column_stack([(values == lv).astype(float) for lv in levels[1:]])
            return mat, [f"{col}[{lv}]" for lv in levels[1:]]
        vals = table[col].to_numpy(dtype=float)
        return vals[:, None], [col]

    def full_matrix(self, table):
        n = len(table)
        blocks = [np.ones((n, 1))]
        names = [INTERCEPT]
        for term in self.terms:
            parts = term.split(":")
            for p in parts:
                if p not in table.columns:
                    raise InputError(f"unknown predictor column {p!r}")
            mat, nm = self._block(table, parts[0])
            for p in parts[1:]:
                m2, n2 = self._block(table, p)
                mat = (mat[:, :, None] * m2[:, None, :]).reshape(n, -1)
                nm = [f"{a}:{b}" for a in nm for b in n2]
            blocks.append(mat)
            names.extend(nm)
        return np.hstack(blocks), names

    def matrix(self, table):
        X, _ = self.full_matrix(table)
        return np.ascontiguousarray(X[:, list(self.keep)])


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    y: np.ndarray
    X: np.ndarray
    Z: sps.csc_matrix
    column_names: tuple
    factors: tuple
    levels: tuple
    codes: np.ndarray
    info: DesignInfo
    spec: ModelSpec
    dropped: tuple = ()
    fingerprint: str = ""

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q_sizes(self):
        return tuple(len(lv) for lv in self.levels)


def _independent_columns(X, tol=1e-7):
    """Indices of columns that are not (numerically) in the span of earlier ones."""
    norms = np.linalg.norm(X, axis=0)
    keep = []
    Q = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        if norms[j] == 0:
            continue
        x = X[:, j] / norms[j]
        r = x - Q @ (Q.T @ x)
        # second pass keeps the projection accurate
        r = r - Q @ (Q.T @ r)
        rn = np.linalg.norm(r)
        if rn > tol:
            keep.append(j)
            Q = np.column_stack([Q, r / rn])
    return keep


def _fingerprint(y, codes, factors):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(codes, dtype=np.int64).tobytes())
    h.update("\x1f".join(factors).encode())
    return h.hexdigest()[:16]


def build_design(table, spec, drop_redundant=False):
    """Realize ``spec`` on ``table`` as dense ``X`` and sparse indicator ``Z``.

    With ``drop_redundant=True`` columns that are linear combinations of
    earlier ones are removed and listed in ``DesignMatrices.dropped``;
    otherwise a rank-deficient ``X`` raises :class:`NumericalError`.
    """
    cols = [spec.outcome] + list(spec.random_intercepts)
    for term in spec.fixed_terms:
        cols.extend(term.split(":"))
    absent = sorted({c for c in cols if c not in table.columns})
    if absent:
        raise InputError(f"model references columns missing from the table: {absent}")
    used = list(dict.fromkeys(cols))
    if table[used].isna().any().any():
        bad = [c for c in used if table[c].isna().any()]
        raise InputError(f"missing values in model columns {bad}")
    n = len(table)
    y = table[spec.outcome].to_numpy(dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError(f"outcome {spec.outcome!r} has non-finite values")

    categorical = {}
    for term in spec.fixed_terms:
        for c in term.split(":"):
            if c in categorical:
                continue
            if _is_categorical(table[c]):
                levels = tuple(sorted(table[c].astype(str).unique()))
                if len(levels) < 2:
                    raise InputError(f"categorical column {c!r} has fewer than 2 levels")
                categorical[c] = levels
            elif not np.all(np.isfinite(table[c].to_numpy(dtype=float))):
                raise InputError(f"predictor {c!r} has non-finite values")

    provisional = DesignInfo(spec.fixed_terms, categorical, (), ())
    X_full, names = provisional.full_matrix(table)
    keep = _independent_columns(X_full)
    dropped = tuple(nm for j, nm in enumerate(names) if j not in keep)
    if dropped and not drop_redundant:
        raise NumericalError(f"fixed-effects matrix is rank deficient; redundant columns: {list(dropped)}")
    info = DesignInfo(spec.fixed_terms, categorical, tuple(names[j] for j in keep), tuple(keep))
    X = np.ascontiguousarray(X_full[:, keep])

    factors = tuple(spec.random_intercepts)
    levels = []
    codes = np.empty((n, len(factors)), dtype=np.int64)
    blocks = []
    offset = 0
    for g, f in enumerate(factors):
        uniq, inv = np.unique(table[f].astype(str).to_numpy(), return_inverse=True)
        if len(uniq) < 2:
            raise InputError(f"grouping factor {f!r} has fewer than 2 levels")
        levels.append(tuple(uniq))
        codes[:, g] = inv
        blocks.append(inv + offset)
        offset += len(uniq)
    if factors:
        rows = np.repeat(np.arange(n), len(factors))
        colidx = np.column_stack(blocks).ravel()
        Z = sps.csc_matrix((np.ones(rows.size), (rows, colidx)), shape=(n, offset))
    else:
        Z = sps.csc_matrix((n, 0))
    if X.shape[1] + len(factors) + 1 > n:
        raise InputError(f"too few observations ({n}) for {X.shape[1]} fixed effects "
                         f"and {len(factors)} variance components")
    return DesignMatrices(y=y, X=X, Z=Z, column_names=info.column_names, factors=factors,
                          levels=tuple(levels), codes=codes, info=info, spec=spec,
                          dropped=dropped, fingerprint=_fingerprint(y, codes, factors))


@dataclass(frozen=True)
class ProfiledFit:
    """Conditional estimates at a fixed ``theta``."""

    theta: np.ndarray
    beta: np.ndarray
    sigma2: float
    u: np.ndarray
    blups: np.ndarray
    loglik: float
    cov_unscaled: np.ndarray


class _Profiler:
    def __init__(self, design):
        X, y, Z = design.X, design.y, design.Z
        self.X, self.y, self.Z = X, y, Z
        self.n = design.n
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.ZtZ = (Z.T @ Z).toarray()
        self.ZtX = np.asarray(Z.T @ X)
        self.Zty = np.asarray(Z.T @ y).ravel()
        self.block = np.repeat(np.arange(len(design.q_sizes)), design.q_sizes)
        self.q = self.ZtZ.shape[0]

    def solve(self, theta):
        theta = np.asarray(theta, dtype=float)
        lam = theta[self.block] if self.q else np.empty(0)
        if self.q:
            A = lam[:, None] * self.ZtZ * lam[None, :]
            A[np.diag_indices_from(A)] += 1.0
            L = sla.cholesky(A, lower=True, check_finite=False)
            cu = sla.solve_triangular(L, lam * self.Zty, lower=True, check_finite=False)
            RZX = sla.solve_triangular(L, lam[:, None] * self.ZtX, lower=True, check_finite=False)
            logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
            schur = self.XtX - RZX.T @ RZX
            rhs = self.Xty - RZX.T @ cu
        else:
            L = None
            cu = np.empty(0)
            RZX = np.empty((0, self.XtX.shape[0]))
            logdet = 0.0
            schur = self.XtX
            rhs = self.Xty
        RX = sla.cholesky(schur, lower=True, check_finite=False)
        cb = sla.solve_triangular(RX, rhs, lower=True, check_finite=False)
        beta = sla.solve_triangular(RX.T, cb, lower=False, check_finite=False)
        pwrss = self.yty - float(cu @ cu) - float(cb @ cb)
        if self.q:
            u = sla.solve_triangular(L.T, cu - RZX @ beta, lower=False, check_finite=False)
        else:
            u = np.empty(0)
        b = lam * u
        if pwrss < 1e-8 * self.yty:
            # near-exact fits cancel in the cross-product form; use the residuals
            r = self.y - self.X @ beta
            if self.q:
                r = r - self.Z @ b
            pwrss = float(r @ r) + float(u @ u)
        return beta, u, b, pwrss, logdet, RX

    def deviance(self, theta):
        try:
            _, _, _, pwrss, logdet, _ = self.solve(theta)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        if not pwrss > 0:
            return np.inf
        return logdet + self.n * (1.0 + _LOG_2PI + math.log(pwrss / self.n))

    def profile(self, theta):
        beta, u, b, pwrss, logdet, RX = self.solve(theta)
        if not pwrss > 0:
            raise NumericalError("penalized residual sum of squares is not positive")
        dev = logdet + self.n * (1.0 + _LOG_2PI + math.log(pwrss / self.n))
        rinv = sla.solve_triangular(RX, np.eye(RX.shape[0]), lower=True, check_finite=False)
        return ProfiledFit(theta=np.asarray(theta, dtype=float).copy(), beta=beta,
                           sigma2=pwrss / self.n, u=u, blups=b, loglik=-0.5 * dev,
                           cov_unscaled=rinv.T @ rinv)


def profile(design, theta):
    """ML estimates of ``beta`` and ``sigma^2`` and the log-likelihood at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(design.factors),) or np.any(theta < 0):
        raise InputError(f"theta must be {len(design.factors)} nonnegative values")
    return _Profiler(design).profile(theta)


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    column_names: tuple
    beta: np.ndarray
    beta_se: np.ndarray
    theta: np.ndarray
    sigma2: float
    blups: np.ndarray
    loglik: float
    n_obs: int
    converged: bool
    singular: bool
    factors: tuple
    levels: tuple
    info: DesignInfo = field(repr=False)
    fingerprint: str = ""
    dropped: tuple = ()
    n_evals: int = 0

    @property
    def n_fixed(self):
        return len(self.beta)

    @property
    def n_params(self):
        return len(self.beta) + len(self.theta) + 1

    @property
    def aic(self):
        return aic(self)

    @property
    def random_sd(self):
        return dict(zip(self.factors, (self.theta * math.sqrt(self.sigma2)).tolist()))

    def coef(self):
        return dict(zip(self.column_names, self.beta.tolist()))

    def blup_table(self, factor):
        g = self.factors.index(factor)
        start = sum(len(lv) for lv in self.levels[:g])
        return dict(zip(self.levels[g], self.blups[start:start + len(self.levels[g])].tolist()))

    def summary_text(self):
        """Versioned plain-text summary; floats use their exact repr."""
        lines = [f"n400kit-model {SUMMARY_VERSION}",
                 f"outcome {self.spec.outcome}",
                 f"fixed_terms {' '.join(self.spec.fixed_terms) or '-'}",
                 f"random_intercepts {' '.join(self.factors) or '-'}",
                 f"n_obs {self.n_obs}"]
        for nm, b, se in zip(self.column_names, self.beta, self.beta_se):
            lines.append(f"beta {nm} {float(b)!r} {float(se)!r}")
        for f, t in zip(self.factors, self.theta):
            lines.append(f"theta {f} {float(t)!r}")
        lines += [f"sigma2 {float(self.sigma2)!r}",
                  f"loglik {float(self.loglik)!r}",
                  f"aic {float(self.aic)!r}",
                  f"n_params {self.n_params}",
                  f"converged {str(self.converged).lower()}",
                  f"singular {str(self.singular).lower()}"]
        if self.dropped:
            lines.append(f"dropped {' '.join(self.dropped)}")
        return "\n".join(lines) + "\n"


def fit_ml(design, max_iter=500, fatol=1e-8, xatol=1e-6):
    """Maximum-likelihood fit by bounded Nelder-Mead over ``theta >= 0``.

    Starts from ``theta = 1`` for every factor. A fit that exhausts
    ``max_iter`` is returned with ``converged=False`` rather than raised.
    """
    prof = _Profiler(design)
    k = len(design.factors)
    n_evals = 0
    if k == 0:
        theta = np.empty(0)
        converged = True
    else:
        res = minimize(prof.deviance, x0=np.ones(k), method="Nelder-Mead",
                       bounds=[(0.0, None)] * k,
                       options={"maxiter": max_iter, "xatol": xatol, "fatol": fatol})
        theta = np.clip(np.asarray(res.x, dtype=float), 0.0, None)
        converged = bool(res.status == 0) and math.isfinite(res.fun)
        n_evals = int(res.nfev)
    try:
        pf = prof.profile(theta)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"factorization failed at the optimum: {exc}") from None
    if not math.isfinite(pf.loglik):
        raise NumericalError("non-finite log-likelihood at the optimum")
    se = np.sqrt(np.clip(np.diag(pf.cov_unscaled), 0.0, None) * pf.sigma2)
    return FittedModel(spec=design.spec, column_names=design.column_names, beta=pf.beta,
                       beta_se=se, theta=theta, sigma2=pf.sigma2, blups=pf.blups,
                       loglik=pf.loglik, n_obs=design.n, converged=converged,
                       singular=bool(np.any(theta < SINGULAR_THRESHOLD)),
                       factors=design.factors, levels=design.levels, info=design.info,
                       fingerprint=design.fingerprint, dropped=design.dropped,
                       n_evals=n_evals)


def fit(table, spec, drop_redundant=False, **kwargs):
    return fit_ml(build_design(table, spec, drop_redundant=drop_redundant), **kwargs)


def loglik(model):
    return model.loglik


def aic(model):
    return 2.0 * model.n_params - 2.0 * model.loglik


def predict(model, rows, mode="conditional"):
    """Predicted outcome for ``rows``.

    ``mode="marginal"`` returns ``X beta``; ``"conditional"`` adds each row's
    random intercepts, with zero for levels not seen during fitting.
    """
    if mode not in ("marginal", "conditional"):
        raise InputError(f"unknown prediction mode {mode!r}")
    yhat = model.info.matrix(rows) @ model.beta
    if mode == "marginal" or not model.factors:
        return yhat
    start = 0
    for g, f in enumerate(model.factors):
        if f not in rows.columns:
            raise InputError(f"conditional prediction needs grouping column {f!r}")
        lv = model.levels[g]
        effects = pd.Series(model.blups[start:start + len(lv)], index=list(lv))
        start += len(lv)
        yhat = yhat + rows[f].astype(str).map(effects).fillna(0.0).to_numpy(dtype=float)
    return yhat


def dense_loglik_oracle(design, beta, theta, sigma2):
    """Gaussian log-density of ``y`` under the marginal covariance, formed densely.

    Independent of the profiled computation; intended for verification on
    small problems (``n <= 2000``).
    """
    n = design.n
    if n > DENSE_ORACLE_MAX_N:
        raise InputError(f"dense oracle limited to n <= {DENSE_ORACLE_MAX_N}, got {n}")
    theta = np.asarray(theta, dtype=float)
    V = np.eye(n)
    for g in range(len(design.factors)):
        Zg = np.zeros((n, len(design.levels[g])))
        Zg[np.arange(n), design.codes[:, g]] = 1.0
        V += theta[g] ** 2 * (Zg @ Zg.T)
    V *= sigma2
    c, low = sla.cho_factor(V, lower=True)
    r = design.y - design.X @ np.asarray(beta, dtype=float)
    quad = float(r @ sla.cho_solve((c, low), r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return -0.5 * (n * _LOG_2PI + logdet + quad)
