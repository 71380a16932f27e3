"""Numerical kernel: least squares, sandwich covariance, joint tests,
two-sample diagnostics and a resampling engine.

Every solve goes through a pivoted QR decomposition so that collinear
designs are reported instead of silently regularized.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats

from .errors import EmptyGroup, RankDeficient, SingularSubmatrix, StatisticFailed

ROLES = frozenset({"outcome", "treatment", "instrument", "exogenous", "intercept"})

# relative pivot threshold for declaring numerical rank
RANK_TOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Dense regressor matrix with named columns.

    ``absorbed_dof`` counts parameters that were partialled out before the
    matrix was built (fixed effects); it lowers the residual degrees of
    freedom of any fit on this matrix.
    """

    values: np.ndarray
    columns: tuple[str, ...]
    roles: Mapping[str, str] = field(default_factory=dict)
    absorbed_dof: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"design values must be 2-D, got shape {values.shape}")
        columns = tuple(self.columns)
        if len(columns) != values.shape[1]:
            raise ValueError(f"{len(columns)} column names for {values.shape[1]} columns")
        if len(set(columns)) != len(columns):
            raise ValueError(f"duplicate column names: {columns}")
        roles = dict(self.roles)
        bad = {r for r in roles.values() if r not in ROLES}
        if bad:
            raise ValueError(f"unknown column roles: {sorted(bad)}")
        if sum(r == "intercept" for r in roles.values()) > 1:
            raise ValueError("more than one intercept column")
        if values.shape[0] and values.shape[1]:
            zero = ~np.any(values != 0.0, axis=0)
            if zero.any():
                raise RankDeficient([c for c, z in zip(columns, zero) if z])
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "roles", roles)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def index(self, name: str) -> int:
        return self.columns.index(name)

    def hstack(self, other: "DesignMatrix") -> "DesignMatrix":
        return DesignMatrix(
            np.hstack([self.values, other.values]),
            self.columns + other.columns,
            {**self.roles, **other.roles},
            max(self.absorbed_dof, other.absorbed_dof),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.columns))


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    covariance: np.ndarray
    dof_model: int
    dof_residual: int
    columns: tuple[str, ...] = ()
    cov_type: str = "hc1"

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])

    def params(self) -> pd.Series:
        return pd.Series(self.coefficients, index=list(self.columns))


@dataclass(frozen=True)
class WaldTest:
    statistic: float
    df1: int
    df2: float
    p_value: float


def _as_design(X) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return DesignMatrix(arr, tuple(f"x{j}" for j in range(arr.shape[1])))


def _pivoted_qr(X: DesignMatrix):
    """Economic pivoted QR with rank check; raises RankDeficient."""
    Q, R, piv = scipy.linalg.qr(X.values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        raise ValueError("design matrix has no columns")
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.k:
        raise RankDeficient([X.columns[j] for j in piv[rank:]])
    return Q, R, piv


def _bread(R: np.ndarray, piv: np.ndarray) -> np.ndarray:
    """(X'X)^-1 from a pivoted QR factor, in the original column order."""
    k = R.shape[0]
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    inv_p = Rinv @ Rinv.T
    out = np.empty_like(inv_p)
    out[np.ix_(piv, piv)] = inv_p
    return out


def _sandwich(X: np.ndarray, residuals: np.ndarray, bread: np.ndarray, dof_residual: float) -> np.ndarray:
    n = X.shape[0]
    Xe = X * residuals[:, None]
    meat = Xe.T @ Xe
    cov = (n / dof_residual) * (bread @ meat @ bread)
    return 0.5 * (cov + cov.T)


def ols_fit(X, y, cov: str = "hc1") -> FitResult:
    """Least squares of ``y`` on ``X`` via pivoted QR.

    ``cov`` selects the reported covariance: ``"hc1"`` (default) or
    ``"classical"``. Raises :class:`RankDeficient` naming the columns that
    fall outside the numerical rank.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.n:
        raise ValueError(f"y has {y.shape[0]} rows, X has {X.n}")
    dof_residual = X.n - X.k - X.absorbed_dof
    if dof_residual <= 0:
        raise ValueError(f"not enough rows ({X.n}) for {X.k} columns and {X.absorbed_dof} absorbed parameters")
    Q, R, piv = _pivoted_qr(X)
    beta = np.empty(X.k)
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    resid = y - X.values @ beta
    bread = _bread(R, piv)
    if cov == "hc1":
        V = _sandwich(X.values, resid, bread, dof_residual)
    elif cov == "classical":
        V = bread * (resid @ resid / dof_residual)
    else:
        raise ValueError(f"unknown covariance type {cov!r}")
    return FitResult(beta, resid, V, X.k, dof_residual, X.columns, cov)


def hc1_covariance(X, residuals, dof_residual: float | None = None) -> np.ndarray:
    """HC1 sandwich ``n/(n-k) (X'X)^-1 X' diag(e^2) X (X'X)^-1``.

    ``dof_residual`` defaults to ``n - k - absorbed_dof``.
    """
    X = _as_design(X)
    e = np.asarray(residuals, dtype=float).ravel()
    if e.shape[0] != X.n:
        raise ValueError("residuals and X disagree on the number of rows")
    if dof_residual is None:
        dof_residual = X.n - X.k - X.absorbed_dof
    _, R, piv = _pivoted_qr(X)
    return _sandwich(X.values, e, _bread(R, piv), dof_residual)


def classical_covariance(X, residuals, dof_residual: float | None = None) -> np.ndarray:
    X = _as_design(X)
    e = np.asarray(residuals, dtype=float).ravel()
    if dof_residual is None:
        dof_residual = X.n - X.k - X.absorbed_dof
    _, R, piv = _pivoted_qr(X)
    return _bread(R, piv) * (e @ e / dof_residual)


def wald_joint_test(coef_subset: Sequence[int], coefficients, covariance, dof_residual: float = math.inf) -> WaldTest:
    """Joint test that the selected coefficients are all zero.

    The statistic ``b' V^-1 b / q`` is referred to F(q, dof_residual); an
    infinite ``dof_residual`` gives the chi-square(q)/q limit.
    """
    idx = np.atleast_1d(np.asarray(coef_subset, dtype=int))
    b = np.asarray(coefficients, dtype=float)[idx]
    V = np.asarray(covariance, dtype=float)[np.ix_(idx, idx)]
    q = idx.size
    if q == 0:
        raise ValueError("empty coefficient subset")
    eig = np.linalg.eigvalsh(V)
    if not np.all(np.isfinite(eig)) or eig[-1] <= 0 or eig[0] <= 1e-13 * eig[-1]:
        raise SingularSubmatrix(f"covariance submatrix for {idx.tolist()} is singular")
    stat = float(b @ scipy.linalg.solve(V, b, assume_a="pos")) / q
    if math.isinf(dof_residual):
        p = float(stats.chi2.sf(stat * q, q))
    else:
        p = float(stats.f.sf(stat, q, dof_residual))
    return WaldTest(stat, q, dof_residual, p)


@dataclass(frozen=True)
class TwoSample:
    mean1: float
    mean0: float
    sd1: float
    sd0: float
    diff: float
    t_stat: float
    n1: int
    n0: int


def two_sample_diff(values, group) -> TwoSample:
    """Difference in means between ``group == 1`` and ``group == 0``.

    The t statistic uses the unequal-variance (Welch) standard error. When
    both groups have zero variance the statistic is 0 for equal means and
    signed infinity otherwise.
    """
    v = np.asarray(values, dtype=float)
    g = np.asarray(group)
    if v.shape != g.shape:
        raise ValueError("values and group must have the same length")
    ok = ~np.isnan(v)
    v1, v0 = v[ok & (g == 1)], v[ok & (g == 0)]
    if v1.size == 0 or v0.size == 0:
        raise EmptyGroup(f"group sizes are {v1.size} and {v0.size}")
    sd1 = float(v1.std(ddof=1)) if v1.size > 1 else 0.0
    sd0 = float(v0.std(ddof=1)) if v0.size > 1 else 0.0
    diff = float(v1.mean() - v0.mean())
    se = math.sqrt(sd1**2 / v1.size + sd0**2 / v0.size)
    if se > 0:
        t = diff / se
    else:
        t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return TwoSample(float(v1.mean()), float(v0.mean()), sd1, sd0, diff, t, int(v1.size), int(v0.size))


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    replicates: np.ndarray  # successful replicates only, shape (B_ok, p)
    n_failed: int
    level: float
    scalar: bool

    def _unwrap(self, x):
        return float(x[0]) if self.scalar else x

    @property
    def se(self):
        with np.errstate(invalid="ignore"):
            return self._unwrap(_nan_sd(self.replicates))

    def percentile_ci(self, level: float | None = None):
        level = self.level if level is None else level
        a = (1.0 - level) / 2.0
        lo, hi = _nan_quantile(self.replicates, [a, 1.0 - a])
        return self._unwrap(lo), self._unwrap(hi)

    @property
    def ci(self):
        return self.percentile_ci()


def _nan_sd(a: np.ndarray) -> np.ndarray:
    out = np.full(a.shape[1], np.nan)
    for j in range(a.shape[1]):
        col = a[:, j][np.isfinite(a[:, j])]
        if col.size > 1:
            out[j] = col.std(ddof=1)
    return out


def _nan_quantile(a: np.ndarray, qs) -> np.ndarray:
    out = np.full((len(qs), a.shape[1]), np.nan)
    for j in range(a.shape[1]):
        col = a[:, j][np.isfinite(a[:, j])]
        if col.size:
            out[:, j] = np.quantile(col, qs)
    return out


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Generator for replicate ``b``; independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _take_rows(data, idx):
    if hasattr(data, "take_rows"):
        return data.take_rows(idx)
    if isinstance(data, pd.DataFrame):
        return data.iloc[idx].reset_index(drop=True)
    if isinstance(data, tuple):
        return tuple(np.asarray(a)[idx] for a in data)
    return np.asarray(data)[idx]


def _n_rows(data) -> int:
    if isinstance(data, tuple):
        return len(data[0])
    return len(data)


class _BlockIndex:
    """Row positions of each block, for generic block resampling."""

    def __init__(self, ids):
        codes, uniques = pd.factorize(np.asarray(ids), sort=True)
        order = np.argsort(codes, kind="stable")
        counts = np.bincount(codes, minlength=len(uniques))
        self.n_blocks = len(uniques)
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        self.order = order

    def rows(self, draws):
        parts = [self.order[self.starts[b]:self.starts[b + 1]] for b in draws]
        sizes = np.array([len(p) for p in parts])
        rows = np.concatenate(parts) if parts else np.empty(0, dtype=int)
        return rows, np.repeat(np.arange(len(draws)), sizes)


def bootstrap(
    data: Any,
    statistic: Callable[[Any], Any],
    B: int,
    seed: int,
    mode: str = "iid_rows",
    ids: Any = None,
    level: float = 0.95,
    max_fail: float = 0.10,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap of ``statistic(data)``.

    ``mode="iid_rows"`` resamples rows; ``mode="blocks_by_id"`` resamples
    whole blocks identified by ``ids`` (a column name for data frames, or an
    array). In block mode every drawn block is relabelled with its draw
    position, so a person drawn twice enters the replicate as two distinct
    persons. Data handles may implement ``take_rows(idx)`` or
    ``n_blocks`` / ``take_blocks(draws)`` to supply their own resampling.

    Replicate ``b`` uses a generator derived from ``(seed, b)`` only, so the
    result does not depend on evaluation order or ``n_jobs``. Replicates
    that raise or return no finite value are skipped; more than ``max_fail``
    of them failing raises :class:`StatisticFailed`.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if mode not in ("iid_rows", "blocks_by_id"):
        raise ValueError(f"unknown bootstrap mode {mode!r}")

    if mode == "iid_rows":
        n = _n_rows(data)

        def draw(b):
            return _take_rows(data, replicate_rng(seed, b).integers(0, n, n))

    elif hasattr(data, "take_blocks"):
        n_blocks = data.n_blocks

        def draw(b):
            return data.take_blocks(replicate_rng(seed, b).integers(0, n_blocks, n_blocks))

    else:
        if ids is None:
            raise ValueError("blocks_by_id mode needs an id column")
        id_col = ids if isinstance(ids, str) else None
        id_values = data[ids] if id_col is not None else ids
        index = _BlockIndex(id_values)

        def draw(b):
            draws = replicate_rng(seed, b).integers(0, index.n_blocks, index.n_blocks)
            rows, new_ids = index.rows(draws)
            sample = _take_rows(data, rows)
            if id_col is not None and isinstance(sample, pd.DataFrame):
                sample[id_col] = new_ids
            return sample

    def run(b):
        try:
            value = np.atleast_1d(np.asarray(statistic(draw(b)), dtype=float)).ravel()
        except Exception as exc:  # noqa: BLE001 - any failure skips the replicate
            return b, None, exc
        if not np.any(np.isfinite(value)):
            return b, None, ValueError("statistic returned no finite value")
        return b, value, None

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(B)))
    else:
        results = [run(b) for b in range(B)]
    results.sort(key=lambda r: r[0])

    good = [r[1] for r in results if r[1] is not None]
    failures = [r[2] for r in results if r[1] is None]
    if len(failures) > max_fail * B:
        raise StatisticFailed(len(failures), B, failures[0] if failures else None)
    widths = {v.size for v in good}
    if len(widths) != 1:
        raise ValueError(f"statistic returned values of varying length: {sorted(widths)}")
    reps = np.vstack(good)
    return BootstrapResult(reps, len(failures), level, scalar=reps.shape[1] == 1)
