"""Data model and design-matrix construction.

Turns raw tables into the numeric pieces an estimator needs: instruments
built from the sexes of the first two children, one-hot encoded
categoricals, fixed effects absorbed by within-group demeaning, and
subsample partitions.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from pandas.api import types as ptypes

from .errors import DataError, LevelExplosion, MissingColumn, NonBinary, UnknownLevel
from .stats import DesignMatrix

log = logging.getLogger(__name__)

MAX_FE_GROUPS = 10_000


@dataclass(frozen=True)
class Dataset:
    """Column table with optional person-id and time (age) axes.

    Missing values are NaN/NA in any column; categorical columns use the
    pandas ``category`` dtype so their level set is closed.
    """

    frame: pd.DataFrame
    person_id: str | None = None
    time: str | None = None

    def __post_init__(self):
        for col in (self.person_id, self.time):
            if col is not None and col not in self.frame.columns:
                raise MissingColumn(col)
        if self.person_id is not None and self.time is not None:
            if self.frame.duplicated([self.person_id, self.time]).any():
                raise DataError(f"({self.person_id}, {self.time}) pairs are not unique")

    def __len__(self) -> int:
        return len(self.frame)

    def __getitem__(self, col: str) -> pd.Series:
        if col not in self.frame.columns:
            raise MissingColumn(col)
        return self.frame[col]

    def __contains__(self, col: str) -> bool:
        return col in self.frame.columns

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    def with_frame(self, frame: pd.DataFrame) -> "Dataset":
        return dataclasses.replace(self, frame=frame)

    def with_columns(self, **columns) -> "Dataset":
        return self.with_frame(self.frame.assign(**columns))

    def take_rows(self, idx) -> "Dataset":
        # resampled rows may repeat (person, time) pairs, so drop the axes
        return Dataset(self.frame.iloc[idx].reset_index(drop=True))

    def require(self, columns: Iterable[str]) -> None:
        missing = [c for c in columns if c not in self.frame.columns]
        if missing:
            raise MissingColumn(missing)


def read_csv(
    path,
    categoricals: Mapping[str, Sequence[str] | None] | None = None,
    person_id: str | None = None,
    time: str | None = None,
) -> Dataset:
    """Load a UTF-8, comma-separated file with a header row.

    Empty fields and ``NA`` are missing. Columns named in ``categoricals``
    become categoricals; a declared level list is enforced.
    """
    categoricals = dict(categoricals or {})
    frame = pd.read_csv(
        path,
        sep=",",
        encoding="utf-8",
        keep_default_na=False,
        na_values=["", "NA"],
        dtype={c: str for c in categoricals},
    )
    for col, levels in categoricals.items():
        if col not in frame.columns:
            raise MissingColumn(col)
        frame[col] = as_categorical(frame[col], levels, name=col)
    return Dataset(frame, person_id=person_id, time=time)


def as_categorical(values, levels: Sequence | None = None, name: str = "") -> pd.Series:
    s = pd.Series(values)
    if levels is None:
        levels = sorted(s.dropna().astype(str).unique())
    levels = [str(v) for v in levels]
    s = s.where(s.isna(), s.astype(str))
    unknown = sorted(set(s.dropna()) - set(levels))
    if unknown:
        raise UnknownLevel(f"column {name!r} has values outside its declared levels: {unknown}")
    return pd.Series(pd.Categorical(s, categories=levels), index=s.index, name=s.name)


def age_bands(ages, width: int = 5, first: int = 25, last: int = 45) -> pd.Categorical:
    """Five-year bands ``"<25", "25-29", ..., "40-44", "45+"``."""
    edges = list(range(first, last + 1, width))
    labels = [f"<{first}"] + [f"{a}-{a + width - 1}" for a in edges[:-1]] + [f"{last}+"]
    bins = [-np.inf] + edges + [np.inf]
    return pd.cut(np.asarray(ages, dtype=float), bins=bins, labels=labels, right=False)


def _check_binary(values: pd.Series, name: str) -> np.ndarray:
    arr = pd.to_numeric(values, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isnan(arr) & (arr != 0) & (arr != 1)
    if values.notna().to_numpy().sum() != (~np.isnan(arr)).sum() or bad.any():
        raise NonBinary(f"column {name!r} must be 0/1")
    return arr


def build_instruments(ds: Dataset) -> Dataset:
    """Add ``z_samesex``, ``z_boys`` and ``z_girls`` from the first two children's sexes (1 = boy)."""
    ds.require(["sex_child1", "sex_child2"])
    s1 = _check_binary(ds["sex_child1"], "sex_child1")
    s2 = _check_binary(ds["sex_child2"], "sex_child2")
    boys = s1 * s2
    girls = (1.0 - s1) * (1.0 - s2)
    return ds.with_columns(z_samesex=boys + girls, z_boys=boys, z_girls=girls)


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    treatment: str
    instruments: tuple[str, ...] = ()
    exogenous: tuple[str, ...] = ()
    fixed_effects: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        for name in ("instruments", "exogenous", "fixed_effects"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        if self.treatment in self.instruments or self.treatment in self.exogenous:
            raise ValueError(f"treatment {self.treatment!r} listed as instrument or control")
        if self.outcome in (self.treatment, *self.instruments, *self.exogenous):
            raise ValueError(f"outcome {self.outcome!r} used as a regressor")
        overlap = set(self.instruments) & set(self.exogenous)
        if overlap:
            raise ValueError(f"columns both instrument and control: {sorted(overlap)}")

    @property
    def columns(self) -> list[str]:
        cols = [self.outcome, self.treatment, *self.instruments, *self.exogenous, *self.fixed_effects]
        return list(dict.fromkeys(cols))

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


CENSUS_MODELS = ("ols", "samesex", "boys_girls", "multibirth")


def census_specs(
    outcome: str = "employed",
    treatment: str = "more_than_2",
    controls: Sequence[str] = (),
    fixed_effects: Sequence[str] = (),
    overidentified: bool = False,
) -> dict[str, ModelSpec]:
    """The OLS / same-sex / both-boys-both-girls / multiple-births model set.

    The sexes of both children are controls except in the both-boys /
    both-girls model, where the first child's sex is a linear combination
    of the instruments, the intercept and the second child's sex.
    """
    both = ("sex_child1", "sex_child2", *controls)
    only2 = ("sex_child2", *controls)
    fe = tuple(fixed_effects)
    specs = {
        "ols": ModelSpec(outcome, treatment, (), both, fe),
        "samesex": ModelSpec(outcome, treatment, ("z_samesex",), both, fe),
        "boys_girls": ModelSpec(outcome, treatment, ("z_boys", "z_girls"), only2, fe),
        "multibirth": ModelSpec(outcome, treatment, ("multibirth",), both, fe),
    }
    if overidentified:
        specs["samesex_multibirth"] = ModelSpec(outcome, treatment, ("z_samesex", "multibirth"), both, fe)
    return specs


def listwise_delete(ds: Dataset, columns: Iterable[str]) -> tuple[Dataset, int]:
    """Drop rows missing any of ``columns``; returns the dataset and the number removed."""
    columns = list(columns)
    ds.require(columns)
    keep = ds.frame[columns].notna().all(axis=1)
    removed = int((~keep).sum())
    if removed:
        log.info("listwise deletion removed %d of %d rows", removed, len(ds))
    if len(ds) and removed == len(ds):
        log.warning("listwise deletion removed every row")
    return ds.with_frame(ds.frame.loc[keep].reset_index(drop=True)), removed


def subsample(ds: Dataset, by: str, levels: Sequence | None = None) -> list[tuple[object, Dataset]]:
    """Partition ``ds`` by the values of ``by``; rows missing ``by`` are excluded."""
    col = ds[by]
    if isinstance(col.dtype, pd.CategoricalDtype):
        known = list(col.cat.categories)
        keys = col.astype(object)
    else:
        known = sorted(col.dropna().unique().tolist())
        keys = col
    if levels is None:
        levels = known
    else:
        unknown = [lv for lv in levels if lv not in known]
        if unknown:
            raise UnknownLevel(f"levels {unknown} not present in column {by!r}")
    return [(lv, ds.with_frame(ds.frame.loc[(keys == lv).to_numpy()].reset_index(drop=True))) for lv in levels]


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------


def _is_categorical(s: pd.Series) -> bool:
    return isinstance(s.dtype, pd.CategoricalDtype) or ptypes.is_object_dtype(s) or ptypes.is_string_dtype(s)


def one_hot(s: pd.Series, name: str) -> tuple[np.ndarray, list[str]]:
    """Dummies for every observed level except the alphabetically first."""
    values = s.astype(str).to_numpy()
    levels = sorted(set(values))
    cols = levels[1:]
    out = np.column_stack([(values == lv).astype(float) for lv in cols]) if cols else np.empty((len(s), 0))
    return out, [f"{name}[{lv}]" for lv in cols]


def group_codes(values) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(values).astype(str), sort=True)
    return codes, len(uniques)


def demean(M: np.ndarray, groups: Sequence[np.ndarray], tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Residualize the columns of ``M`` on one or more sets of group dummies.

    One factor is a single group-mean subtraction; several factors use
    alternating projections until the largest update is below ``tol``
    relative to the column scale.
    """
    M = np.array(M, dtype=float, copy=True)
    if M.ndim == 1:
        M = M[:, None]
    if not groups:
        return M

    def sweep(A):
        for codes in groups:
            counts = np.bincount(codes)
            for j in range(A.shape[1]):
                means = np.bincount(codes, weights=A[:, j], minlength=counts.size) / counts
                A[:, j] -= means[codes]
        return A

    if len(groups) == 1:
        return sweep(M)
    scale = np.maximum(np.abs(M).max(axis=0), 1.0)
    for _ in range(max_iter):
        before = M.copy()
        sweep(M)
        if np.max(np.abs(M - before) / scale) < tol:
            return M
    log.warning("fixed-effect demeaning stopped after %d sweeps without converging", max_iter)
    return M


@dataclass(frozen=True)
class Encoded:
    """Numeric pieces of a model: outcome, treatment, instruments and controls."""

    y: np.ndarray
    d: np.ndarray
    Z: DesignMatrix
    X: DesignMatrix
    outcome: str
    treatment: str

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def absorbed_dof(self) -> int:
        return self.X.absorbed_dof

    @property
    def first_stage_X(self) -> DesignMatrix:
        return self.Z.hstack(self.X)

    @property
    def second_stage_X(self) -> DesignMatrix:
        return self.treatment_column(self.d).hstack(self.X)

    def treatment_column(self, values) -> DesignMatrix:
        return DesignMatrix(np.asarray(values, dtype=float)[:, None], (self.treatment,), {self.treatment: "treatment"},
                            self.X.absorbed_dof)


def encode(ds: Dataset, spec: ModelSpec, max_fe_groups: int = MAX_FE_GROUPS) -> Encoded:
    """Encode ``ds`` for ``spec``.

    Categorical controls are one-hot encoded (first level alphabetically
    dropped). Fixed effects are absorbed by demeaning every column, which
    replaces the intercept; the number of absorbed parameters is carried on
    the returned matrices so residual degrees of freedom stay correct.
    Missing values must be removed beforehand with :func:`listwise_delete`.
    """
    ds.require(spec.columns)
    frame = ds.frame
    if frame[spec.columns].isna().any().any():
        bad = [c for c in spec.columns if frame[c].isna().any()]
        raise DataError(f"missing values in {bad}; apply listwise_delete first")

    y = pd.to_numeric(frame[spec.outcome]).to_numpy(dtype=float)
    d = _check_binary(frame[spec.treatment], spec.treatment)

    z_cols, z_names = [], []
    for col in spec.instruments:
        if _is_categorical(frame[col]):
            raise DataError(f"instrument {col!r} must be numeric")
        z_cols.append(pd.to_numeric(frame[col]).to_numpy(dtype=float))
        z_names.append(col)

    x_cols, x_names = [], []
    use_intercept = spec.intercept and not spec.fixed_effects
    if use_intercept:
        x_cols.append(np.ones(len(frame)))
        x_names.append("Intercept")
    for col in spec.exogenous:
        s = frame[col]
        if ptypes.is_bool_dtype(s):
            x_cols.append(s.to_numpy(dtype=float))
            x_names.append(col)
        elif _is_categorical(s):
            block, names = one_hot(s, col)
            x_cols.extend(block.T)
            x_names.extend(names)
        else:
            x_cols.append(pd.to_numeric(s).to_numpy(dtype=float))
            x_names.append(col)

    n = len(frame)
    Zv = np.column_stack(z_cols) if z_cols else np.empty((n, 0))
    Xv = np.column_stack(x_cols) if x_cols else np.empty((n, 0))

    absorbed = 0
    if spec.fixed_effects:
        groups = []
        for col in spec.fixed_effects:
            codes, n_groups = group_codes(frame[col])
            if n_groups > max_fe_groups:
                raise LevelExplosion(f"fixed effect {col!r} has {n_groups} groups (limit {max_fe_groups})")
            groups.append(codes)
            absorbed += n_groups
        absorbed -= len(groups) - 1
        block = demean(np.column_stack([y, d, Zv, Xv]), groups)
        y, d = block[:, 0], block[:, 1]
        Zv = block[:, 2:2 + Zv.shape[1]]
        Xv = block[:, 2 + Zv.shape[1]:]

    roles = {name: "instrument" for name in z_names}
    x_roles = {name: ("intercept" if name == "Intercept" else "exogenous") for name in x_names}
    Z = DesignMatrix(Zv, tuple(z_names), roles, absorbed)
    X = DesignMatrix(Xv, tuple(x_names), x_roles, absorbed)
    return Encoded(y, d, Z, X, spec.outcome, spec.treatment)
