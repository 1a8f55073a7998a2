"""Fitting engines: least squares, NB2 regression, score matrices and Wald tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .cohort import CohortTable
from .errors import ConvergenceError, DataError, NumericalError, RankDeficientError

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class ModelFit:
    """A fitted Gaussian or NB2 regression.

    ``score_matrix`` holds the per-unit score contributions at the optimum
    (residual times design row, divided by the error variance for OLS).
    """

    family: str
    names: tuple[str, ...]
    coefficients: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    score_matrix: np.ndarray
    loglik: float
    n_obs: int
    dispersion: float = 0.0
    sigma2: float = float("nan")
    cov_type: str = "model"
    iterations: int = 0

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def se(self, name: str) -> float:
        k = self.names.index(name)
        return float(np.sqrt(self.covariance[k, k]))


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    estimate: float
    stderr: float


# design helpers -------------------------------------------------------------


def design_matrix(table: CohortTable, adjust=(), transform: str = "identity"):
    """Intercept, treatment and optional adjustment covariates; returns ``(X, y, names)``."""
    if len(table) == 0:
        raise DataError("empty subset")
    cols = [np.ones(len(table)), table.treatment]
    names = ["intercept", "treatment"]
    for v in adjust:
        cov = table.schema[v]
        x = table.column(v)
        if cov.kind == "categorical":
            for k, lab in enumerate(cov.levels[1:], start=1):
                cols.append((x == k).astype(float))
                names.append(f"{v}[{lab}]")
        else:
            cols.append(x)
            names.append(v)
    return np.column_stack(cols), transform_outcome(table.outcome, transform), tuple(names)


def transform_outcome(y: np.ndarray, transform: str) -> np.ndarray:
    if transform == "identity":
        return np.asarray(y, dtype=float)
    if transform == "log1p":
        if np.any(y < 0):
            raise DataError("log1p transform needs nonnegative outcomes")
        return np.log1p(y)
    raise DataError(f"unknown outcome transform {transform!r}")


def _check_rank(X: np.ndarray) -> None:
    if X.shape[0] == 0:
        raise DataError("empty subset")
    if X.shape[0] <= X.shape[1]:
        raise RankDeficientError(f"{X.shape[0]} observations for {X.shape[1]} coefficients")
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise RankDeficientError("design has an all-zero column")
    cond = np.linalg.cond(X / norms)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficientError(f"design is rank deficient (condition number {cond:.3g})")


def cluster_meat(scores: np.ndarray, clusters=None) -> np.ndarray:
    """Sum over clusters of outer products of within-cluster score sums (no small-sample factor)."""
    if clusters is None:
        return scores.T @ scores
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    g = inv.max() + 1
    summed = np.column_stack([np.bincount(inv, weights=scores[:, j], minlength=g) for j in range(scores.shape[1])])
    return summed.T @ summed


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2


# OLS ------------------------------------------------------------------------


def fit_ols(X, y, names=None, cov_type: str = "model", clusters=None) -> ModelFit:
    """Least-squares fit.

    ``cov_type`` is ``"model"`` (sigma^2 (X'X)^-1 with sigma^2 = RSS/(n-k)),
    ``"robust"`` (HC0) or ``"cluster"`` (CR0, grouped by ``clusters``).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise DataError("design and outcome dimensions disagree")
    _check_rank(X)
    n, k = X.shape
    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    fitted = X @ beta
    resid = y - fitted
    # residuals at rounding level mean an exact fit; zero them so scores stay finite
    if np.max(np.abs(resid), initial=0.0) <= 1e-12 * max(1.0, float(np.max(np.abs(y), initial=0.0))):
        resid = np.zeros_like(resid)
        fitted = y.copy()
    rss = float(resid @ resid)
    sigma2 = rss / (n - k) if n > k else 0.0
    xtx_inv = np.linalg.inv(r) @ np.linalg.inv(r).T
    if cov_type == "model":
        cov = sigma2 * xtx_inv
    elif cov_type in ("robust", "cluster"):
        meat = cluster_meat(resid[:, None] * X, clusters if cov_type == "cluster" else None)
        cov = xtx_inv @ meat @ xtx_inv
    else:
        raise ValueError(f"unknown cov_type {cov_type!r}")
    s2_ml = rss / n
    loglik = -0.5 * n * (np.log(2 * np.pi * s2_ml) + 1) if s2_ml > 0 else np.inf
    fit = ModelFit(
        family="gaussian",
        names=tuple(names) if names is not None else tuple(f"x{j}" for j in range(k)),
        coefficients=beta,
        covariance=_sym(cov),
        residuals=resid,
        fitted=fitted,
        score_matrix=np.zeros((n, k)),
        loglik=float(loglik),
        n_obs=n,
        sigma2=sigma2,
        cov_type=cov_type,
    )
    object.__setattr__(fit, "score_matrix", score_matrix(fit, X))
    return fit


def score_matrix(fit: ModelFit, X, normalize: bool = True) -> np.ndarray:
    """Per-unit partial scores, one column per coefficient.

    Gaussian: ``residual * x / sigma^2`` (``residual * x`` when ``normalize`` is
    false). NB2: ``(y - mu) / (1 + alpha mu) * x``. A perfect fit gives zeros.
    """
    X = np.asarray(X, dtype=float)
    if X.shape != (fit.n_obs, len(fit.coefficients)):
        raise DataError(f"design shape {X.shape} does not match fit ({fit.n_obs}, {len(fit.coefficients)})")
    if fit.family == "gaussian":
        s = fit.residuals[:, None] * X
        if normalize:
            s = s / fit.sigma2 if fit.sigma2 > 0 else np.zeros_like(s)
        return s
    w = 1.0 / (1.0 + fit.dispersion * fit.fitted)
    return (fit.residuals * w)[:, None] * X


# NB2 ------------------------------------------------------------------------

_SERIES_X = 1e-2


def _f_small(x):
    # log1p(x) - x/(1+x) and x^2/(1+x)^2 - 2 f(x), by series when x is tiny
    n = np.arange(2, 14)[:, None]
    sign = np.where(n % 2 == 0, 1.0, -1.0)
    xn = x[None, :] ** n
    f = np.sum(sign * (n - 1) / n * xn, axis=0)
    h = np.sum(sign * (n - 1) * (n - 2) / n * xn, axis=0)
    return f, h


def _f_terms(x):
    f = np.empty_like(x)
    h = np.empty_like(x)
    small = x < _SERIES_X
    if small.any():
        f[small], h[small] = _f_small(x[small])
    big = ~small
    xb = x[big]
    f[big] = np.log1p(xb) - xb / (1 + xb)
    h[big] = xb**2 / (1 + xb) ** 2 - 2 * f[big]
    return f, h


def _count_sums(y_int, alpha, power):
    # sum_{k<y} k^p / (1 + alpha k)^p for p in {1, 2}
    ymax = int(y_int.max()) if len(y_int) else 0
    if ymax == 0:
        return np.zeros(len(y_int))
    k = np.arange(ymax, dtype=float)
    terms = (k / (1 + alpha * k)) ** power
    cum = np.concatenate([[0.0], np.cumsum(terms)])
    return cum[y_int]


def nb_loglik(y, mu, alpha) -> float:
    y = np.asarray(y, dtype=float)
    if alpha == 0:
        return float(np.sum(y * np.log(np.where(mu > 0, mu, 1.0)) - mu - gammaln(y + 1)))
    yi = y.astype(np.int64)
    ymax = int(yi.max()) if len(yi) else 0
    cum = np.concatenate([[0.0], np.cumsum(np.log1p(alpha * np.arange(ymax, dtype=float)))])
    return float(np.sum(cum[yi] + y * np.log(mu) - (y + 1 / alpha) * np.log1p(alpha * mu) - gammaln(y + 1)))


def _alpha_grad(y, yi, mu, alpha):
    if alpha == 0:
        return 0.5 * float(np.sum((y - mu) ** 2 - y))
    x = alpha * mu
    f, _ = _f_terms(x)
    return float(np.sum(_count_sums(yi, alpha, 1) + f / alpha**2 - y * mu / (1 + x)))


def _alpha_hess(y, yi, mu, alpha):
    x = alpha * mu
    _, h = _f_terms(x)
    return float(np.sum(-_count_sums(yi, alpha, 2) + h / alpha**3 + y * mu**2 / (1 + x) ** 2))


def _alpha_newton(y, yi, mu, start: float, tol: float = 1e-12) -> float:
    """Maximize the NB2 log-likelihood in alpha for fixed means (safeguarded Newton)."""
    if _alpha_grad(y, yi, mu, 0.0) <= 0:
        return 0.0
    lo, hi = 0.0, max(start, 1e-3)
    while _alpha_grad(y, yi, mu, hi) > 0:
        lo, hi = hi, hi * 4
        if hi > 1e8:
            raise ConvergenceError("dispersion diverges", None)
    a = min(max(start, lo), hi) if lo < start < hi else (lo + hi) / 2 if lo > 0 else hi / 2
    for _ in range(200):
        g = _alpha_grad(y, yi, mu, a)
        if g > 0:
            lo = a
        else:
            hi = a
        h = _alpha_hess(y, yi, mu, a)
        step = -g / h if h < 0 else None
        nxt = a + step if step is not None else None
        if nxt is None or not (lo < nxt < hi):
            nxt = (lo + hi) / 2
        if abs(nxt - a) <= tol * max(1.0, a):
            return nxt
        a = nxt
    return a


def _irls(X, y, beta, alpha, max_iter=100, tol=1e-12):
    ll_old = -np.inf
    for it in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        w = mu / (1 + alpha * mu)
        z = eta + (y - mu) / mu
        xw = X * w[:, None]
        new = np.linalg.solve(X.T @ xw, xw.T @ z)
        # halve the step while the likelihood drops
        step = new - beta
        ll_new = nb_loglik(y, np.exp(X @ new), alpha)
        shrink = 0
        while ll_new < ll_old - 1e-9 * abs(ll_old) and shrink < 30:
            step /= 2
            new = beta + step
            ll_new = nb_loglik(y, np.exp(X @ new), alpha)
            shrink += 1
        beta, ll_old = new, ll_new
        if np.max(np.abs(step)) < tol:
            return beta, it + 1
    return beta, max_iter


def nb_deviance(y, mu, alpha) -> float:
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
        if alpha == 0:
            return float(2 * np.sum(t1 - (y - mu)))
        t2 = (y + 1 / alpha) * np.log((1 + alpha * y) / (1 + alpha * mu))
    return float(2 * np.sum(t1 - t2))


def fit_negbin(
    X,
    y,
    names=None,
    clusters=None,
    dispersion: float | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> ModelFit:
    """NB2 maximum likelihood with a log link.

    Alternates IRLS for the coefficients at fixed dispersion with a Newton solve
    for the dispersion at fixed means, until the largest coefficient change
    between outer iterations is below ``tol``. ``dispersion`` fixes alpha
    (0 gives Poisson). The covariance is the CR0 sandwich grouped by
    ``clusters`` or, without clusters, the inverse expected information.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) != X.shape[0]:
        raise DataError("design and outcome dimensions disagree")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DataError("negative-binomial outcomes must be nonnegative integers")
    if not np.any(y > 0):
        raise DataError("all outcomes are zero")
    _check_rank(X)
    yi = y.astype(np.int64)
    n, k = X.shape
    beta = np.linalg.lstsq(X, np.log(y + 0.5), rcond=None)[0]
    alpha = 0.0 if dispersion is None else float(dispersion)
    if alpha < 0:
        raise ValueError("dispersion must be nonnegative")
    converged = False
    dev = np.nan
    total_it = 0
    for outer in range(max_iter):
        new, it = _irls(X, y, beta, alpha)
        total_it += it
        if not np.all(np.isfinite(new)):
            raise ConvergenceError("coefficients diverged", dev)
        mu = np.exp(X @ new)
        dev = nb_deviance(y, mu, alpha)
        delta = np.max(np.abs(new - beta))
        beta = new
        if dispersion is None:
            a_new = _alpha_newton(y, yi, mu, alpha if alpha > 0 else 0.1)
            d_alpha = abs(a_new - alpha)
            alpha = a_new
        else:
            d_alpha = 0.0
        if outer > 0 and delta < tol and d_alpha < tol:
            converged = True
            break
        if dispersion is not None and delta < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"NB2 fit did not converge in {max_iter} iterations (deviance {dev:.6g})", dev)
    # polish the coefficients at the final dispersion so the scores vanish
    beta, it = _irls(X, y, beta, alpha)
    mu = np.exp(X @ beta)
    w = mu / (1 + alpha * mu)
    info = X.T @ (X * w[:, None])
    try:
        bread = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("information matrix is singular") from exc
    scores = ((y - mu) / (1 + alpha * mu))[:, None] * X
    if clusters is not None:
        cov = bread @ cluster_meat(scores, clusters) @ bread
        cov_type = "cluster"
    else:
        cov = bread
        cov_type = "model"
    return ModelFit(
        family="negbin",
        names=tuple(names) if names is not None else tuple(f"x{j}" for j in range(k)),
        coefficients=beta,
        covariance=_sym(cov),
        residuals=y - mu,
        fitted=mu,
        score_matrix=scores,
        loglik=nb_loglik(y, mu, alpha),
        n_obs=n,
        dispersion=alpha,
        cov_type=cov_type,
        iterations=total_it + it,
    )


# Wald tests -----------------------------------------------------------------


def wald_test(estimate: float, stderr: float, null_value: float = 0.0) -> TestResult:
    """Two-sided z test of ``estimate == null_value`` against the normal reference."""
    if not stderr > 0:
        raise DataError(f"standard error must be positive, got {stderr}")
    z = (estimate - null_value) / stderr
    return TestResult(statistic=float(z), p_value=float(min(1.0, 2 * stats.norm.sf(abs(z)))), estimate=float(estimate), stderr=float(stderr))


def difference_test(a: tuple[float, float], b: tuple[float, float]) -> TestResult:
    """z test of ``a_est - b_est == 0`` for independent samples (pooled se = sqrt(se_a^2 + se_b^2))."""
    (ea, sa), (eb, sb) = a, b
    if not (sa > 0 and sb > 0):
        raise DataError("standard errors must be positive")
    return wald_test(ea - eb, float(np.hypot(sa, sb)))
