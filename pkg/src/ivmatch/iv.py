"""Instrumental-variable estimators.

Wald ratios with complier decomposition, 2SLS with a robust diagnostic
battery (first-stage F, Anderson-Rubin set, control-function Wu-Hausman,
Sargan), and subsample LATE runs.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from . import stats as cs
from .design import Dataset, ModelSpec, encode, listwise_delete, subsample
from .errors import (
    ComplianceWarning,
    DataError,
    DegenerateInstrument,
    NonBinary,
    NumericalError,
    RankDeficient,
    SubsampleTooSmall,
)
from .stats import DesignMatrix, WaldTest

log = logging.getLogger(__name__)

ZERO_FIRST_STAGE = 1e-12


# --------------------------------------------------------------------------
# Wald / LATE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WaldResult:
    tau_hat: float
    se_bootstrap: float
    first_stage: float
    reduced_form: float
    p_d: float
    p_z: float
    compliers_given_treated: float
    compliers_given_untreated: float
    n_obs: int
    zero_first_stage: bool = False


def complier_shares(p_d: float, p_z: float, first_stage: float) -> tuple[float, float]:
    """Complier shares among the treated and the untreated under monotonicity.

    ``P(complier | D=1) = pi_c P(Z=1) / P(D=1)`` and
    ``P(complier | D=0) = pi_c P(Z=0) / P(D=0)``. Values outside [0, 1]
    mean the data are incompatible with no defiers; they are returned as is
    with a :class:`ComplianceWarning`.
    """
    treated = first_stage * p_z / p_d if p_d > 0 else math.nan
    untreated = first_stage * (1.0 - p_z) / (1.0 - p_d) if p_d < 1 else math.nan
    for label, share in (("first stage", first_stage), ("D=1", treated), ("D=0", untreated)):
        if not math.isnan(share) and not -1e-9 <= share <= 1.0 + 1e-9:
            warnings.warn(f"complier share ({label}) = {share:.4f} is outside [0, 1]; defiers present?",
                          ComplianceWarning, stacklevel=2)
    return treated, untreated


def _binary(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if np.isnan(a).any():
        raise DataError(f"{name} has missing values")
    if not np.all((a == 0) | (a == 1)):
        raise NonBinary(f"{name} must be 0/1")
    return a


def _wald_parts(y, d, z):
    on = z == 1
    n1 = on.sum()
    if n1 == 0 or n1 == z.size:
        raise DegenerateInstrument("instrument takes a single value")
    first = d[on].mean() - d[~on].mean()
    reduced = y[on].mean() - y[~on].mean()
    return first, reduced


def _wald_ratio(sample) -> float:
    y, d, z = sample
    first, reduced = _wald_parts(y, d, z)
    if abs(first) < ZERO_FIRST_STAGE:
        raise NumericalError("zero first stage")
    return reduced / first


def wald_estimate(y, d, z, B: int = 500, seed: int = 0) -> WaldResult:
    """Wald estimate ``(E[Y|Z=1]-E[Y|Z=0]) / (E[D|Z=1]-E[D|Z=0])`` with bootstrap SE.

    ``B = 0`` skips the bootstrap. A first stage below 1e-12 in absolute
    value leaves the ratio undefined: ``tau_hat`` is NaN and
    ``zero_first_stage`` is set.
    """
    y = np.asarray(y, dtype=float).ravel()
    d = _binary(d, "treatment")
    z = _binary(z, "instrument")
    if not y.size == d.size == z.size:
        raise ValueError("y, d and z must have equal length")
    if np.isnan(y).any():
        raise DataError("outcome has missing values")
    first, reduced = _wald_parts(y, d, z)
    p_d, p_z = float(d.mean()), float(z.mean())
    c1, c0 = complier_shares(p_d, p_z, first)
    if abs(first) < ZERO_FIRST_STAGE:
        warnings.warn("first stage is zero; Wald ratio undefined", RuntimeWarning, stacklevel=2)
        return WaldResult(math.nan, math.nan, first, reduced, p_d, p_z, c1, c0, y.size, True)
    se = math.nan
    if B:
        boot = cs.bootstrap((y, d, z), _wald_ratio, B=B, seed=seed, mode="iid_rows")
        se = boot.se
    return WaldResult(reduced / first, se, first, reduced, p_d, p_z, c1, c0, y.size)


# --------------------------------------------------------------------------
# 2SLS
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: tuple


@dataclass(frozen=True)
class ARInterval:
    """Anderson-Rubin confidence set summary.

    ``kind`` is ``"bounded"``, ``"unbounded"`` (an infinite endpoint) or
    ``"empty"``. ``segments`` lists the accepted intervals when the set is
    not connected; ``lo``/``hi`` span all of them.
    """

    lo: float
    hi: float
    kind: str
    level: float
    segments: tuple = ()

    def contains(self, tau: float) -> bool:
        if self.kind == "empty":
            return False
        segs = self.segments or ((self.lo, self.hi),)
        return any(lo <= tau <= hi for lo, hi in segs)


@dataclass(frozen=True)
class TwoSLSResult:
    tau_hat: float
    coefficients: pd.Series
    se_hc1: pd.Series
    covariance: np.ndarray
    weak_F: WaldTest
    ar_ci: ARInterval | None
    wu_hausman: TestResult | None
    sargan: TestResult | None
    n_obs: int
    n_instruments: int
    dof_residual: int
    first_stage: pd.Series = field(repr=False, default=None)
    n_dropped: int = 0

    @property
    def se_tau(self) -> float:
        return float(self.se_hc1.iloc[0])

    @property
    def just_identified(self) -> bool:
        return self.n_instruments == 1

    def conf_int(self, level: float = 0.95) -> tuple[float, float]:
        q = stats.norm.ppf(0.5 + level / 2)
        return self.tau_hat - q * self.se_tau, self.tau_hat + q * self.se_tau


@dataclass(frozen=True)
class OLSResult:
    tau_hat: float
    coefficients: pd.Series
    se_hc1: pd.Series
    n_obs: int
    dof_residual: int

    @property
    def se_tau(self) -> float:
        return float(self.se_hc1.iloc[0])


def _prepare(ds: Dataset, spec: ModelSpec):
    clean, dropped = listwise_delete(ds, spec.columns)
    enc = encode(clean, spec)
    k = enc.Z.k + enc.X.k
    if enc.n - k - enc.absorbed_dof <= 0:
        raise SubsampleTooSmall(f"{enc.n} rows for {k} regressors and {enc.absorbed_dof} absorbed parameters")
    return enc, dropped


def ols_effect(ds: Dataset, spec: ModelSpec) -> OLSResult:
    """OLS of the outcome on treatment and controls, HC1 standard errors."""
    enc, _ = _prepare(ds, spec.replace(instruments=()))
    fit = cs.ols_fit(enc.second_stage_X, enc.y)
    names = list(fit.columns)
    return OLSResult(float(fit.coefficients[0]), pd.Series(fit.coefficients, index=names),
                     pd.Series(fit.se, index=names), enc.n, fit.dof_residual)


class ARStatistic:
    """HC1 Anderson-Rubin statistic as a function of the hypothesised effect.

    Regressing ``y - t d`` on ``W = [Z, X]`` gives coefficients and
    residuals that are affine in ``t``, so the robust covariance of the
    instrument block is a quadratic matrix polynomial in ``t``. After one
    pass over the data each evaluation costs O(m^3).
    """

    def __init__(self, W: DesignMatrix, y: np.ndarray, d: np.ndarray, m: int):
        Q, R, piv = cs._pivoted_qr(W)
        bread = cs._bread(R, piv)
        by = bread @ (W.values.T @ y)
        bd = bread @ (W.values.T @ d)
        ey = y - W.values @ by
        ed = d - W.values @ bd
        self.dof = W.n - W.k - W.absorbed_dof
        c = W.n / self.dof
        G = bread[:m, :]
        Wy = W.values * ey[:, None]
        Wd = W.values * ed[:, None]
        self.Qyy = c * G @ (Wy.T @ Wy) @ G.T
        cross = G @ (Wy.T @ Wd) @ G.T
        self.Qyd = c * 0.5 * (cross + cross.T)
        self.Qdd = c * G @ (Wd.T @ Wd) @ G.T
        self.by = by[:m]
        self.bd = bd[:m]
        self.m = m

    def __call__(self, tau):
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        b = self.by[None, :] - t[:, None] * self.bd[None, :]
        V = self.Qyy[None] - 2.0 * t[:, None, None] * self.Qyd[None] + (t**2)[:, None, None] * self.Qdd[None]
        with np.errstate(all="ignore"):
            if self.m == 1:
                out = b[:, 0] ** 2 / V[:, 0, 0]
            else:
                out = np.einsum("ti,ti->t", b, np.linalg.solve(V, b[..., None])[..., 0]) / self.m
        out = np.where(np.isfinite(out), out, np.inf)
        return out if np.ndim(tau) else float(out[0])

    def p_value(self, tau) -> float:
        return float(stats.f.sf(self(tau), self.m, self.dof))

    def critical_value(self, level: float) -> float:
        return float(stats.f.ppf(level, self.m, self.dof))


def _bisect(f, lo, hi, tol):
    """Boundary between ``f(lo)`` and ``f(hi)`` (booleans that differ)."""
    flo = f(lo)
    while abs(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) == flo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def invert_ar(stat: ARStatistic, center: float, scale: float, level: float = 0.95,
              width: float = 20.0, step: float = 1 / 50, expand: float = 5.0) -> ARInterval:
    """Grid-and-bisection inversion of the AR test around ``center``.

    The grid spans ``center +/- width*scale`` at ``step*scale``; endpoints are
    refined to ``1e-6*scale``. If the accepted region touches the grid edge
    or is empty, the grid is widened ``expand`` times before declaring the
    set unbounded or empty.
    """
    crit = stat.critical_value(level)
    if not (np.isfinite(scale) and scale > 0):
        scale = max(1.0, abs(center))

    def accepted(t):
        return bool(stat(t) <= crit)

    for w in (width, width * expand):
        n_half = int(round(w / step))
        grid = center + scale * step * np.arange(-n_half, n_half + 1)
        acc = stat(grid) <= crit
        if acc.any() and not acc[0] and not acc[-1]:
            break
    else:
        if not acc.any():
            return ARInterval(math.nan, math.nan, "empty", level)

    tol = 1e-6 * scale
    segments = []
    start = -math.inf if acc[0] else None
    for i in range(1, acc.size):
        if acc[i] and not acc[i - 1]:
            start = _bisect(accepted, grid[i - 1], grid[i], tol)
        elif acc[i - 1] and not acc[i]:
            segments.append((start, _bisect(accepted, grid[i - 1], grid[i], tol)))
            start = None
    if start is not None:
        segments.append((start, math.inf))
    lo, hi = segments[0][0], segments[-1][1]
    kind = "bounded" if math.isfinite(lo) and math.isfinite(hi) else "unbounded"
    return ARInterval(lo, hi, kind, level, tuple(segments))


def tsls_fit(ds: Dataset, spec: ModelSpec, ar: bool | None = None, ar_level: float = 0.95,
             ar_width: float = 20.0, ar_step: float = 1 / 50, ar_expand: float = 5.0) -> TwoSLSResult:
    """Two-stage least squares with HC1 inference and diagnostics.

    Second-stage residuals use the observed treatment, not its first-stage
    prediction. The Anderson-Rubin set is computed when ``ar`` is true;
    ``None`` (the default) computes it for single-instrument models only.
    """
    if not spec.instruments:
        raise ValueError("tsls_fit needs at least one instrument")
    enc, dropped = _prepare(ds, spec)
    m = enc.Z.k
    W = enc.first_stage_X
    first = cs.ols_fit(W, enc.d)
    weak = cs.wald_joint_test(range(m), first.coefficients, first.covariance, first.dof_residual)

    v_hat = first.residuals
    d_hat = enc.d - v_hat
    X_hat = enc.treatment_column(d_hat).hstack(enc.X)
    X_obs = enc.second_stage_X
    second = cs.ols_fit(X_hat, enc.y, cov="classical")
    beta = second.coefficients
    resid = enc.y - X_obs.values @ beta
    V = cs.hc1_covariance(X_hat, resid)
    names = list(X_obs.columns)

    wu = None
    try:
        cf_X = X_obs.hstack(DesignMatrix(v_hat[:, None], ("_first_stage_residual",), {}, enc.absorbed_dof))
        cf = cs.ols_fit(cf_X, enc.y)
        t = cf.coefficients[-1] / math.sqrt(cf.covariance[-1, -1])
        wu = TestResult(t * t, float(stats.f.sf(t * t, 1, cf.dof_residual)), (1, cf.dof_residual))
    except RankDeficient:
        log.info("Wu-Hausman unavailable: first-stage residual is collinear with the regressors")

    sargan = None
    if m > 1:
        aux = cs.ols_fit(W, resid, cov="classical")
        centered = resid - resid.mean()
        r2 = 1.0 - (aux.residuals @ aux.residuals) / (centered @ centered)
        s = enc.n * r2
        sargan = TestResult(s, float(stats.chi2.sf(s, m - 1)), (m - 1,))

    tau = float(beta[0])
    se_tau = math.sqrt(V[0, 0])
    ar_ci = None
    if ar or (ar is None and m == 1):
        ar_ci = invert_ar(ARStatistic(W, enc.y, enc.d, m), tau, se_tau, ar_level, ar_width, ar_step, ar_expand)

    return TwoSLSResult(
        tau_hat=tau,
        coefficients=pd.Series(beta, index=names),
        se_hc1=pd.Series(np.sqrt(np.diag(V)), index=names),
        covariance=V,
        weak_F=weak,
        ar_ci=ar_ci,
        wu_hausman=wu,
        sargan=sargan,
        n_obs=enc.n,
        n_instruments=m,
        dof_residual=second.dof_residual,
        first_stage=pd.Series(first.coefficients, index=list(W.columns)),
        n_dropped=dropped,
    )


def anderson_rubin_ci(ds: Dataset, spec: ModelSpec, level: float = 0.95, width: float = 20.0,
                      step: float = 1 / 50, expand: float = 5.0) -> ARInterval:
    """Anderson-Rubin confidence set for the treatment effect."""
    fit = tsls_fit(ds, spec, ar=True, ar_level=level, ar_width=width, ar_step=step, ar_expand=expand)
    return fit.ar_ci


def late_by_group(ds: Dataset, spec: ModelSpec, by: str, levels=None, **tsls_options) -> list[tuple[object, TwoSLSResult]]:
    """Separate 2SLS fits for each level of ``by``.

    Levels whose subsample cannot be fitted (too few rows, collinear
    design, constant instrument) are skipped with a warning naming the
    level.
    """
    out = []
    for level, part in subsample(ds, by, levels):
        try:
            out.append((level, tsls_fit(part, spec, **tsls_options)))
        except (NumericalError, DataError, ValueError) as exc:
            msg = f"subsample {by}={level!r} skipped: {exc}"
            log.warning(msg)
            warnings.warn(str(SubsampleTooSmall(msg)), RuntimeWarning, stacklevel=2)
    return out


def balance_table(ds: Dataset, instrument: str, variables) -> pd.DataFrame:
    """Means and standard deviations by instrument value, with Welch t statistics."""
    z = pd.to_numeric(ds[instrument]).to_numpy(dtype=float)
    rows = []
    for var in variables:
        v = pd.to_numeric(ds[var]).to_numpy(dtype=float)
        ok = ~np.isnan(v) & ~np.isnan(z)
        ts = cs.two_sample_diff(v[ok], z[ok])
        rows.append({
            "instrument": instrument,
            "variable": var,
            "mean": float(v[ok].mean()),
            "sd": float(v[ok].std(ddof=1)),
            "mean_z1": ts.mean1,
            "sd_z1": ts.sd1,
            "mean_z0": ts.mean0,
            "sd_z0": ts.sd0,
            "diff": ts.diff,
            "t_stat": ts.t_stat,
        })
    return pd.DataFrame(rows)
