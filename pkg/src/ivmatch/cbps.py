"""Covariate balancing propensity score weights (just-identified, ATT form).

With a logistic propensity score the control weight ``pi/(1-pi)`` equals
``exp(x'beta)``, and the exact balance conditions

    sum_i (T_i - pi_i) / (1 - pi_i) * x_i = 0

say that the odds-weighted control totals of every covariate equal the
treated totals. They are the first-order conditions of the concave
function ``beta'xbar_T - (1/N_T) sum_controls exp(x'beta)``, which damped
Newton maximizes from the logistic MLE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EmptyGroup, NoConvergence, PerfectSeparation, RankDeficient
from .stats import RANK_TOL, DesignMatrix

MAX_ITER = 200
# standardized coefficients beyond this mean odds ratios over e^40 per sd
MAX_COEF = 40.0


@dataclass(frozen=True)
class CBPSFit:
    weights: np.ndarray
    beta: np.ndarray  # on the scale of the supplied covariates
    iterations: int
    max_moment: float


def _split(covariates):
    if isinstance(covariates, DesignMatrix):
        return covariates.values, list(covariates.columns)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, [f"x{j}" for j in range(X.shape[1])]


class _Standardizer:
    """Map covariates to mean-0/sd-1 columns plus one intercept.

    Working in these coordinates makes the solve (and so the weights)
    invariant to affine rescaling of any covariate.
    """

    def __init__(self, X: np.ndarray, freq: np.ndarray):
        w = freq / freq.sum()
        self.mu = w @ X
        sd = np.sqrt(w @ (X - self.mu) ** 2)
        self.const = sd <= 1e-12 * np.maximum(np.abs(self.mu), 1.0)
        if np.count_nonzero(self.const) > 1:
            raise RankDeficient([f"x{j}" for j in np.flatnonzero(self.const)[1:]])
        self.sd = np.where(self.const, 1.0, sd)
        self.has_intercept = bool(self.const.any())

    def transform(self, X):
        Z = (X[:, ~self.const] - self.mu[~self.const]) / self.sd[~self.const]
        return np.column_stack([np.ones(X.shape[0]), Z])

    def to_original(self, b):
        slopes = b[1:] / self.sd[~self.const]
        icpt = b[0] - slopes @ self.mu[~self.const]
        if not self.has_intercept:
            return np.concatenate([[icpt], slopes])
        out = np.empty(self.const.size)
        out[~self.const] = slopes
        out[self.const] = icpt / self.mu[self.const]
        return out

    def from_original(self, beta):
        beta = np.asarray(beta, dtype=float)
        if not self.has_intercept:
            icpt, slopes = beta[0], beta[1:]
        else:
            icpt = float(beta[self.const][0] * self.mu[self.const][0])
            slopes = beta[~self.const]
        return np.concatenate([[icpt + slopes @ self.mu[~self.const]], slopes * self.sd[~self.const]])


def _logit_mle(X, t, f, max_iter=100, tol=1e-10):
    """Frequency-weighted logistic regression by damped Newton."""
    b = np.zeros(X.shape[1])
    p1 = (f * t).sum() / f.sum()
    b[0] = np.log(p1 / (1 - p1))

    def loglik(b):
        eta = X @ b
        return float(f @ (t * eta - np.logaddexp(0.0, eta)))

    ll = loglik(b)
    for _ in range(max_iter):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ b)))
        grad = X.T @ (f * (t - p))
        if np.max(np.abs(grad)) / f.sum() < tol:
            return b
        H = (X * (f * p * (1 - p))[:, None]).T @ X
        try:
            step = scipy.linalg.solve(H, grad, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            raise PerfectSeparation("logistic information matrix is singular") from None
        s = 1.0
        while s > 1e-10:
            new = b + s * step
            ll_new = loglik(new)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            s *= 0.5
        b, ll = new, ll_new
        if np.max(np.abs(b[1:])) > MAX_COEF:
            raise PerfectSeparation("logistic coefficients diverge; treated and controls are separable")
    return b


def _balance_newton(Xt_mean, Xc, fc, n_treated, b, tol, max_iter):
    def evaluate(b):
        odds = np.exp(np.minimum(Xc @ b, 700.0))
        return float(b @ Xt_mean - (fc @ odds) / n_treated), odds

    obj, odds = evaluate(b)
    target = min(tol, 1e-10)
    g_max = np.inf
    for it in range(1, max_iter + 1):
        wc = fc * odds / n_treated
        g = Xt_mean - wc @ Xc
        g_max = float(np.max(np.abs(g)))
        if g_max <= target:
            return b, it, g_max
        H = (Xc * wc[:, None]).T @ Xc
        try:
            step = scipy.linalg.solve(H, g, assume_a="pos", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            break
        # rounding makes tiny gains look like losses near the optimum
        slack = 1e-12 * max(1.0, abs(obj))
        s = 1.0
        while True:
            new = b + s * step
            obj_new, odds_new = evaluate(new)
            if obj_new >= obj - slack or s < 1e-12:
                break
            s *= 0.5
        if s < 1e-12 or not np.isfinite(obj_new):
            break
        b, obj, odds = new, obj_new, odds_new
        if np.max(np.abs(b[1:])) > MAX_COEF:
            break
    if g_max <= tol:
        return b, it, g_max
    raise NoConvergence(it, g_max)


def _check_rank(Xs, f, names, std):
    live = f > 0
    _, R, piv = scipy.linalg.qr(Xs[live] * np.sqrt(f[live])[:, None], mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < Xs.shape[1]:
        labels = ["Intercept"] + [n for n, c in zip(names, std.const) if not c]
        raise RankDeficient([labels[j] for j in piv[rank:]])


def cbps_fit(treatment, covariates, freq=None, start=None, tol: float = 1e-6, max_iter: int = MAX_ITER,
             check_rank: bool = True) -> CBPSFit:
    """Solve the exact balance conditions and return weights and coefficients.

    Treated rows get weight 1; control weights are the fitted odds scaled so
    that (with ``freq``) they sum to the treated count. An intercept is
    added when no covariate column is constant. ``start`` is a coefficient
    vector on the covariates' own scale (defaults to the logistic MLE).
    Convergence is declared when the standardized balance moments are below
    ``tol`` in max norm.
    """
    t = np.asarray(treatment, dtype=float).ravel()
    X, names = _split(covariates)
    if X.shape[0] != t.size:
        raise ValueError("treatment and covariates disagree on the number of rows")
    f = np.ones(t.size) if freq is None else np.asarray(freq, dtype=float).ravel()
    treated = (t == 1) & (f > 0)
    control = (t == 0) & (f > 0)
    if not treated.any() or not control.any():
        raise EmptyGroup("CBPS needs both treated and control units")

    std = _Standardizer(X[f > 0], f[f > 0])
    Xs = std.transform(X)
    if check_rank:
        _check_rank(Xs, f, names, std)

    if start is None:
        keep = f > 0
        b0 = _logit_mle(Xs[keep], t[keep], f[keep])
    else:
        expected = X.shape[1] + (0 if std.has_intercept else 1)
        if np.size(start) != expected:
            raise ValueError(f"start has {np.size(start)} coefficients, expected {expected}")
        b0 = std.from_original(start)

    n_treated = f[treated].sum()
    xt_mean = (f[treated] @ Xs[treated]) / n_treated
    b, iters, g_max = _balance_newton(xt_mean, Xs[control], f[control], n_treated, b0, tol, max_iter)

    w = np.zeros(t.size)
    w[treated] = 1.0
    odds = np.exp(np.minimum(Xs[control] @ b, 700.0))
    w[control] = odds * n_treated / (f[control] @ odds)
    return CBPSFit(w, std.to_original(b), iters, g_max)


def cbps_weights(treatment, covariates, freq=None, start=None, tol: float = 1e-6, max_iter: int = MAX_ITER) -> np.ndarray:
    """CBPS weights: 1 for treated units, normalized odds for controls."""
    return cbps_fit(treatment, covariates, freq, start, tol, max_iter).weights


@dataclass(frozen=True)
class BalanceReport:
    covariates: tuple[str, ...]
    std_diff_before: np.ndarray
    std_diff_after: np.ndarray
    ess_treated: float
    ess_control: float
    zero_variance: tuple[str, ...] = ()

    @property
    def max_abs_after(self) -> float:
        return float(np.max(np.abs(self.std_diff_after))) if self.std_diff_after.size else 0.0

    @property
    def max_abs_before(self) -> float:
        return float(np.max(np.abs(self.std_diff_before))) if self.std_diff_before.size else 0.0


def _ess(w):
    s2 = float(w @ w)
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def balance_report(treatment, covariates, weights, freq=None) -> BalanceReport:
    """Standardized mean differences before and after weighting.

    Differences are scaled by the pooled unweighted sd
    ``sqrt((s_T^2 + s_C^2)/2)``; a covariate with zero pooled sd is listed
    in ``zero_variance`` and its difference is left unstandardized. The
    all-ones intercept column, if present, is skipped.
    """
    t = np.asarray(treatment, dtype=float).ravel()
    X, names = _split(covariates)
    w = np.asarray(weights, dtype=float).ravel()
    if not (X.shape[0] == t.size == w.size):
        raise ValueError("treatment, covariates and weights must have equal length")
    f = np.ones(t.size) if freq is None else np.asarray(freq, dtype=float).ravel()
    tr, co = t == 1, t == 0
    keep = [j for j in range(X.shape[1]) if not np.all(X[:, j] == 1.0)]
    before, after, zero = [], [], []

    def wmean(x, m, wt):
        return float((wt[m] * f[m]) @ x[m] / (wt[m] * f[m]).sum())

    def var(x, m):
        if f[m].sum() < 2:
            return 0.0
        mu = f[m] @ x[m] / f[m].sum()
        return float(f[m] @ (x[m] - mu) ** 2 / (f[m].sum() - 1))

    ones = np.ones(t.size)
    for j in keep:
        x = X[:, j]
        sd = np.sqrt(0.5 * (var(x, tr) + var(x, co)))
        raw = wmean(x, tr, ones) - wmean(x, co, ones)
        adj = wmean(x, tr, w) - wmean(x, co, w)
        if sd > 0:
            raw, adj = raw / sd, adj / sd
        else:
            zero.append(names[j])
        before.append(raw)
        after.append(adj)
    wt = np.repeat(w[tr], f[tr].astype(int)) if freq is not None else w[tr]
    wc = np.repeat(w[co], f[co].astype(int)) if freq is not None else w[co]
    return BalanceReport(tuple(names[j] for j in keep), np.array(before), np.array(after),
                         _ess(wt), _ess(wc), tuple(zero))
