"""Treatment-history panel matching with CBPS refinement and dynamic ATT.

Persons are observed over consecutive integer ages. A matched set pairs a
person who becomes treated at age ``t*`` with every person who is untreated
at ``t*`` and shares the treated person's treatment history over the ``L``
preceding ages. Control weights inside a set come from CBPS on covariate
and outcome histories, and the effect at lead ``f`` is a weighted
difference-in-differences relative to ``t* - 1``.

Internally, sets that share the same age, history and control pool are
grouped into a :class:`Pool` and refined together; for a single treated
person this is the per-set fit. Panels carry per-person frequency weights so
a block-bootstrap replicate is a reweighting, not a copy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .cbps import _ess, cbps_fit
from .errors import DataError, EmptyGroup, LeadUnavailable, MissingColumn, NumericalError
from .stats import RANK_TOL, bootstrap

log = logging.getLogger(__name__)

HOURS_CAP = 112.0


def cap_hours(hours, employed=None) -> np.ndarray:
    """Weekly hours capped at 112, and set to 0 for people not employed."""
    h = np.minimum(np.asarray(hours, dtype=float), HOURS_CAP)
    if employed is not None:
        e = np.asarray(employed, dtype=float)
        h = np.where(e == 0, 0.0, h)
    return h


def log_income(income) -> np.ndarray:
    """Natural log of income; zero or negative income becomes missing."""
    x = np.asarray(income, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), np.nan)


# --------------------------------------------------------------------------
# data container
# --------------------------------------------------------------------------


class PanelDataset:
    """Dense person x age arrays with missing cells stored as NaN.

    ``treatment`` holds the absorbing indicator for the transition under
    study; ``at_risk`` marks person-ages eligible to make that transition
    (all observed cells when no parity information is given). ``freq``
    counts how many copies of each person the panel represents.
    """

    def __init__(self, person_ids, times, treatment, outcomes: Mapping[str, np.ndarray],
                 covariates: Mapping[str, np.ndarray], parity=None, freq=None, at_risk=None,
                 transition: int | None = None):
        self.person_ids = np.asarray(person_ids)
        self.times = np.asarray(times, dtype=int)
        self.treatment = np.asarray(treatment, dtype=float)
        P, T = self.treatment.shape
        if self.person_ids.shape != (P,) or self.times.shape != (T,):
            raise ValueError("person_ids/times do not match the treatment array")
        self.outcomes = {k: np.asarray(v, dtype=float) for k, v in outcomes.items()}
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in covariates.items()}
        for name, arr in {**self.outcomes, **self.covariates}.items():
            if arr.shape != (P, T):
                raise ValueError(f"column {name!r} has shape {arr.shape}, expected {(P, T)}")
        self.parity = None if parity is None else np.asarray(parity, dtype=float)
        self.freq = np.ones(P) if freq is None else np.asarray(freq, dtype=float)
        self.at_risk = ~np.isnan(self.treatment) if at_risk is None else np.asarray(at_risk, dtype=bool)
        self.transition = transition

    @property
    def n_persons(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_times(self) -> int:
        return self.treatment.shape[1]

    def column(self, name: str) -> np.ndarray:
        if name in self.outcomes:
            return self.outcomes[name]
        if name in self.covariates:
            return self.covariates[name]
        raise MissingColumn(name)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, person_id: str = "person_id", time: str = "age",
                   treatment: str | None = "treated", outcomes: Sequence[str] = (),
                   covariates: Sequence[str] = (), parity: str | None = None) -> "PanelDataset":
        """Build from a long frame with one row per person and age.

        With ``parity`` given, the treatment array is derived per transition
        by :meth:`for_transition` and ``treatment`` may be None.
        """
        needed = [person_id, time, *outcomes, *covariates]
        needed += [c for c in (treatment, parity) if c is not None]
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise MissingColumn(missing)
        if treatment is None and parity is None:
            raise ValueError("need a treatment or a parity column")
        if frame[[person_id, time]].isna().any().any():
            raise DataError("person id and time must not be missing")
        t_raw = pd.to_numeric(frame[time])
        if not np.all(np.asarray(t_raw) == np.round(np.asarray(t_raw))):
            raise DataError(f"time column {time!r} must hold integers")
        if frame.duplicated([person_id, time]).any():
            raise DataError("(person id, time) pairs must be unique")

        pid_codes, pids = pd.factorize(frame[person_id], sort=True)
        t_int = np.asarray(t_raw, dtype=int)
        t0 = int(t_int.min())
        times = np.arange(t0, int(t_int.max()) + 1)
        P, T = len(pids), len(times)
        col = t_int - t0

        def grid(values):
            out = np.full((P, T), np.nan)
            out[pid_codes, col] = pd.to_numeric(values, errors="raise").to_numpy(dtype=float)
            return out

        par = grid(frame[parity]) if parity is not None else None
        if treatment is not None:
            D = grid(frame[treatment])
            obs = D[~np.isnan(D)]
            if not np.all((obs == 0) | (obs == 1)):
                raise DataError(f"treatment column {treatment!r} must be 0/1")
            _check_absorbing(D, pids, treatment)
        else:
            D = np.where(np.isnan(par), np.nan, (par >= 1).astype(float))
        if par is not None:
            _check_absorbing(par, pids, parity)
        return cls(np.asarray(pids), times, D, {o: grid(frame[o]) for o in outcomes},
                   {c: grid(frame[c]) for c in covariates}, parity=par)

    def for_transition(self, k: int) -> "PanelDataset":
        """Treatment = having reached parity ``k``; at risk = parity ``k-1``."""
        if self.parity is None:
            raise DataError("panel has no parity column")
        if k < 1:
            raise ValueError("parity transition must be >= 1")
        par = self.parity
        D = np.where(np.isnan(par), np.nan, (par >= k).astype(float))
        return PanelDataset(self.person_ids, self.times, D, self.outcomes, self.covariates,
                            parity=par, freq=self.freq, at_risk=par == k - 1, transition=k)

    # bootstrap protocol
    @property
    def n_blocks(self) -> int:
        return self.n_persons

    def take_blocks(self, draws) -> "PanelDataset":
        """Replicate in which person ``p`` appears as many times as drawn.

        Returned as frequency weights on the same arrays; this is equivalent
        to stacking relabelled copies (see :meth:`expand`).
        """
        mult = np.bincount(np.asarray(draws, dtype=int), minlength=self.n_persons)
        return self._with_freq(self.freq * mult)

    def _with_freq(self, freq) -> "PanelDataset":
        return PanelDataset(self.person_ids, self.times, self.treatment, self.outcomes, self.covariates,
                            parity=self.parity, freq=freq, at_risk=self.at_risk, transition=self.transition)

    def expand(self) -> "PanelDataset":
        """Physically repeat persons according to ``freq``, with fresh ids."""
        f = self.freq.astype(int)
        if np.any(f != self.freq):
            raise ValueError("expand needs integer frequencies")
        rows = np.repeat(np.arange(self.n_persons), f)
        return PanelDataset(np.arange(rows.size), self.times, self.treatment[rows],
                            {k: v[rows] for k, v in self.outcomes.items()},
                            {k: v[rows] for k, v in self.covariates.items()},
                            parity=None if self.parity is None else self.parity[rows],
                            at_risk=self.at_risk[rows], transition=self.transition)


def _check_absorbing(A, pids, name):
    """Values must never decrease over observed ages."""
    for i in range(A.shape[0]):
        row = A[i][~np.isnan(A[i])]
        if row.size > 1 and np.any(np.diff(row) < 0):
            raise DataError(f"column {name!r} decreases over time for person {pids[i]!r}; "
                            "treatment must be absorbing")


# --------------------------------------------------------------------------
# matched sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchedSet:
    treated: tuple  # (person_id, age at transition)
    controls: np.ndarray  # person ids
    weights: np.ndarray  # sums to 1 over controls


@dataclass
class Pool:
    """Matched sets sharing one transition age, history and control group."""

    t: int  # column index of t*
    history: tuple
    treated: np.ndarray  # person row indices
    controls: np.ndarray
    weights: np.ndarray | None = None  # per control row; sum(freq * w) == 1
    columns: tuple = ()
    beta: np.ndarray | None = None
    fallback: bool = False

    def control_weights(self, freq) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        return np.full(self.controls.size, 1.0 / freq[self.controls].sum())


@dataclass(frozen=True)
class RefineSpec:
    covariates: tuple[str, ...]
    lags: tuple[int, ...]
    outcome: str | None = None
    outcome_lags: tuple[int, ...] = (1,)

    def __post_init__(self):
        for lag in (*self.lags, *self.outcome_lags):
            if int(lag) != lag or lag < 1:
                raise ValueError(f"refinement lag {lag} is not strictly before the transition; "
                                 "only pretreatment history (lags >= 1) may be used")


@dataclass
class MatchedSets:
    pools: list[Pool]
    L: int
    person_ids: np.ndarray
    times: np.ndarray
    freq: np.ndarray
    n_dropped: float = 0.0
    refine_spec: RefineSpec | None = None

    @property
    def n_sets(self) -> float:
        return float(sum(self.freq[p.treated].sum() for p in self.pools))

    def __len__(self) -> int:
        return int(round(self.n_sets))

    def __iter__(self) -> Iterator[MatchedSet]:
        for pool in self.pools:
            w = pool.control_weights(self.freq)
            ids = self.person_ids[pool.controls]
            for i in pool.treated:
                for _ in range(int(self.freq[i])):
                    yield MatchedSet((self.person_ids[i], int(self.times[pool.t])), ids, w)

    def warm_starts(self) -> dict:
        return {(p.t, p.history): (p.columns, p.beta) for p in self.pools if p.beta is not None}


def find_matched_sets(panel: PanelDataset, L: int = 3) -> MatchedSets:
    """Match each transition to persons sharing its treatment history.

    A transition at column ``t`` (``t >= L``) needs D = 0 at ``t-1``, D = 1
    at ``t`` and an at-risk state at ``t-1``. Controls are at risk and
    untreated at ``t`` with the same observed D over ``t-L..t-1``.
    Transitions without controls are dropped and counted.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    D, f = panel.treatment, panel.freq
    live = f > 0
    pools, dropped = [], 0.0
    for t in range(L, panel.n_times):
        hist = D[:, t - L:t]
        ok = live & ~np.isnan(hist).any(axis=1)
        treated = ok & (D[:, t - 1] == 0) & (D[:, t] == 1) & panel.at_risk[:, t - 1]
        if not treated.any():
            continue
        controls = ok & (D[:, t] == 0) & panel.at_risk[:, t]
        t_idx = np.flatnonzero(treated)
        c_idx = np.flatnonzero(controls)
        powers = 2 ** np.arange(L)
        t_code = hist[t_idx] @ powers
        c_code = hist[c_idx] @ powers
        for code in np.unique(t_code):
            members = t_idx[t_code == code]
            key = hist[members[0]]
            ctl = c_idx[c_code == code]
            if ctl.size == 0:
                dropped += f[members].sum()
                continue
            pools.append(Pool(t, tuple(key.astype(int)), members, ctl))
    if dropped:
        log.info("dropped %g transitions without eligible controls", dropped)
    return MatchedSets(pools, L, panel.person_ids, panel.times, f.copy(), dropped)


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------


def _history_matrix(panel: PanelDataset, spec: RefineSpec, rows, t):
    cols, names = [], []
    for c in spec.covariates:
        arr = panel.column(c)
        prev = None
        for lag in spec.lags:
            if t - lag >= 0:
                col = arr[rows, t - lag]
                # time-invariant covariates repeat across lags
                if prev is not None and np.array_equal(col, prev, equal_nan=True):
                    continue
                cols.append(col)
                names.append(f"{c}[-{lag}]")
                prev = col
    if spec.outcome is not None:
        arr = panel.column(spec.outcome)
        for lag in spec.outcome_lags:
            if t - lag >= 0:
                cols.append(arr[rows, t - lag])
                names.append(f"{spec.outcome}[-{lag}]")
    if not cols:
        return np.empty((len(rows), 0)), names
    return np.column_stack(cols), names


def _independent_columns(X, f):
    """Indices of non-constant columns that are linearly independent."""
    if X.shape[1] == 0:
        return []
    w = f / f.sum()
    mu = w @ X
    sd = np.sqrt(w @ (X - mu) ** 2)
    varying = np.flatnonzero(sd > 1e-12 * np.maximum(np.abs(mu), 1.0))
    if varying.size == 0:
        return []
    Z = np.column_stack([np.ones(X.shape[0]), (X[:, varying] - mu[varying]) / sd[varying]])
    # unpivoted QR keeps the earliest of any dependent group, so the choice
    # is stable across bootstrap replicates
    R = np.linalg.qr(Z * np.sqrt(f)[:, None], mode="r")
    diag = np.abs(np.diag(R))
    norms = np.sqrt(f @ Z**2)
    keep = [j - 1 for j in range(1, Z.shape[1]) if diag[j] > 1e-8 * norms[j]]
    return [int(varying[j]) for j in keep]


def _refine_pool(pool: Pool, panel: PanelDataset, spec: RefineSpec, start, history=None) -> Pool:
    f_all = panel.freq
    rows = np.concatenate([pool.treated, pool.controls])
    t_vec = np.concatenate([np.ones(pool.treated.size), np.zeros(pool.controls.size)])
    X, names = _history_matrix(panel, spec, rows, pool.t) if history is None else history
    usable = ~np.isnan(X).any(axis=1) if X.shape[1] else np.ones(rows.size, bool)
    f = f_all[rows] * usable
    n_c = pool.controls.size

    def uniform(reason=None):
        ok = usable[-n_c:] & (f_all[pool.controls] > 0)
        if not ok.any():
            ok = f_all[pool.controls] > 0
        if reason is not None:
            log.warning("matched sets at age %s: uniform control weights (%s)", panel.times[pool.t], reason)
        w = np.where(ok, 1.0 / f_all[pool.controls][ok].sum(), 0.0)
        return replace(pool, weights=w, columns=(), beta=None, fallback=reason is not None)

    n_treated = f[:pool.treated.size].sum()
    n_controls = f[pool.treated.size:].sum()
    if n_treated == 0 or n_controls == 0:
        return uniform("no complete covariate history")
    prev = start.get((pool.t, pool.history)) if start is not None else None
    if prev is not None and n_controls > len(prev[0]) and set(prev[0]) <= set(names):
        # reuse the previous column choice; any degeneracy makes the solve
        # fail and sends us through the full rank check below
        idx = [names.index(c) for c in prev[0]]
        try:
            fit = cbps_fit(t_vec[usable], X[usable][:, idx], freq=f[usable], start=prev[1], check_rank=False)
        except (NumericalError, EmptyGroup, ValueError):
            pass
        else:
            return _with_fit(pool, fit, usable, n_c, n_treated, prev[0])
    keep = _independent_columns(X[usable], f[usable])
    if not keep:
        return uniform()
    if n_controls <= len(keep):
        return uniform(f"{n_controls:g} controls for {len(keep)} covariates")
    cols = tuple(names[j] for j in keep)
    Xk = X[:, keep]
    warm = None
    if start is not None:
        prev = start.get((pool.t, pool.history))
        if prev is not None and prev[0] == cols:
            warm = prev[1]
    try:
        fit = cbps_fit(t_vec[usable], Xk[usable], freq=f[usable], start=warm, check_rank=False)
    except (NumericalError, EmptyGroup) as exc:
        if warm is None:
            return uniform(f"CBPS failed: {exc}")
        try:
            fit = cbps_fit(t_vec[usable], Xk[usable], freq=f[usable])
        except (NumericalError, EmptyGroup) as exc2:
            return uniform(f"CBPS failed: {exc2}")
    return _with_fit(pool, fit, usable, n_c, n_treated, cols)


def _with_fit(pool, fit, usable, n_c, n_treated, cols):
    w = np.zeros(n_c)
    w[usable[-n_c:]] = fit.weights[-np.count_nonzero(usable[-n_c:]):]
    return replace(pool, weights=w / n_treated, columns=cols, beta=fit.beta, fallback=False)


def refine(sets: MatchedSets, panel: PanelDataset, covariates: Sequence[str] | None = None,
           lags: Sequence[int] | None = None, outcome: str | None = None,
           outcome_lags: Sequence[int] = (1,), start: dict | None = None) -> MatchedSets:
    """CBPS control weights within each matched set.

    Balance targets are ``covariates`` at ``lags`` (default: every panel
    covariate at lags 1..L) and ``outcome`` at ``outcome_lags``. Only the
    last pretreatment outcome is balanced by default: balancing all outcome
    lags would force every placebo estimate to zero. Columns that are
    constant or collinear within a set are dropped; sets with no more
    controls than covariates, or where CBPS fails, fall back to uniform
    weights with a logged warning.
    """
    if not sets.pools:
        raise EmptyGroup("no matched sets to refine")
    covariates = tuple(panel.covariates) if covariates is None else tuple(covariates)
    lags = tuple(range(1, sets.L + 1)) if lags is None else tuple(lags)
    spec = RefineSpec(covariates, lags, outcome, tuple(outcome_lags))
    for name in (*covariates, *([outcome] if outcome else [])):
        panel.column(name)
    pools = [_refine_pool(p, panel, spec, start) for p in sets.pools]
    return replace(sets, pools=pools, refine_spec=spec)


# --------------------------------------------------------------------------
# effects
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicATT:
    """Placebo (offsets -L..-2) and effect (leads 0..F) estimates.

    ``table`` has columns kind, lead, estimate, se, ci_lo, ci_hi, n_sets,
    n_eff_controls. The reference offset -1 is zero by construction and
    has no row.
    """

    outcome: str
    table: pd.DataFrame
    level: float = 0.95
    n_dropped: float = 0.0
    n_failed: int = 0

    def _row(self, kind, lead):
        row = self.table[(self.table["kind"] == kind) & (self.table["lead"] == lead)]
        if row.empty:
            raise KeyError(f"no {kind} row for offset {lead}")
        return row.iloc[0]

    def effect(self, f: int) -> float:
        return float(self._row("effect", f)["estimate"])

    def placebo(self, p: int) -> float:
        return float(self._row("placebo", p)["estimate"])

    @property
    def effects(self) -> pd.DataFrame:
        return self.table[self.table["kind"] == "effect"].reset_index(drop=True)

    @property
    def placebos(self) -> pd.DataFrame:
        return self.table[self.table["kind"] == "placebo"].reset_index(drop=True)


def _offsets(L, F):
    return [("placebo", p) for p in range(-L, -1)] + [("effect", f) for f in range(F + 1)]


def _pool_changes(pool: Pool, Y, D, ks, is_effect):
    """Outcome changes from ``t*-1`` for a pool's treated and control rows.

    Returns the usable offset indices and, for treated and controls, the
    changes (0 where unusable) and usability masks. At effect leads a
    control that is treated by then is unusable.
    """
    t = pool.t
    j = np.flatnonzero(t + ks < Y.shape[1])
    cols = t + ks[j]
    Yc = Y[pool.controls]
    dc = Yc[:, cols] - Yc[:, t - 1][:, None]
    okc = ~np.isnan(dc) & (~is_effect[j] | (D[pool.controls][:, cols] == 0))
    Yt = Y[pool.treated]
    dt = Yt[:, cols] - Yt[:, t - 1][:, None]
    okt = ~np.isnan(dt)
    return j, np.where(okt, dt, 0.0), okt, np.where(okc, dc, 0.0), okc


def _accumulate(acc, changes, ft, w_c, fc):
    j, dt, okt, dc, okc = changes
    num, den, ess = acc
    wm = (w_c * fc)[:, None] * okc
    wsum = wm.sum(axis=0)
    n_t = ft @ okt
    use = (wsum > 0) & (n_t > 0)
    if not use.any():
        return
    with np.errstate(invalid="ignore", divide="ignore"):
        contrast = (wm * dc).sum(axis=0) / wsum
        ess_pool = wsum**2 / ((wm**2 / np.where(fc > 0, fc, 1.0)[:, None]).sum(axis=0))
    jj = j[use]
    num[jj] += (ft @ dt)[use] - n_t[use] * contrast[use]
    den[jj] += n_t[use]
    ess[jj] += n_t[use] * ess_pool[use]


def _finish(acc):
    num, den, ess = acc
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den, den, ess / den


def _offset_arrays(L, F):
    offs = _offsets(L, F)
    ks = np.array([k for _, k in offs])
    is_effect = np.array([kind == "effect" for kind, _ in offs])
    return offs, ks, is_effect


def _att_arrays(sets: MatchedSets, panel: PanelDataset, outcome: str, F: int):
    Y = panel.column(outcome)
    offs, ks, is_effect = _offset_arrays(sets.L, F)
    acc = tuple(np.zeros(len(offs)) for _ in range(3))
    freq = sets.freq
    for pool in sets.pools:
        changes = _pool_changes(pool, Y, panel.treatment, ks, is_effect)
        _accumulate(acc, changes, freq[pool.treated], pool.control_weights(freq), freq[pool.controls])
    return (offs, *_finish(acc))


def att(sets: MatchedSets, panel: PanelDataset, outcome: str, F: int = 5) -> DynamicATT:
    """Point estimates of the dynamic ATT and placebo contrasts.

    For a set with transition at ``t*`` and offset ``k``, the contrast is
    the treated change ``Y(t*+k) - Y(t*-1)`` minus the weighted control
    change; sets count equally. At effect leads, controls that are treated
    by ``t*+k`` or lack the outcome are dropped and the rest reweighted.
    """
    offs, est, n, n_eff = _att_arrays(sets, panel, outcome, F)
    for (kind, k), nk in zip(offs, n):
        if nk == 0:
            raise LeadUnavailable(k)
    table = pd.DataFrame({
        "kind": [o[0] for o in offs],
        "lead": [o[1] for o in offs],
        "estimate": est,
        "se": np.nan,
        "ci_lo": np.nan,
        "ci_hi": np.nan,
        "n_sets": n,
        "n_eff_controls": n_eff,
    })
    return DynamicATT(outcome, table, n_dropped=sets.n_dropped)


def att_with_ci(sets: MatchedSets, panel: PanelDataset, outcome: str, F: int = 5, B: int = 1000,
                seed: int = 0, level: float = 0.95, n_jobs: int = 1) -> DynamicATT:
    """Dynamic ATT with person-block bootstrap percentile intervals.

    Each replicate resamples persons with replacement, rebuilds the matched
    sets, reruns the refinement used for ``sets`` (warm-started from its
    coefficients) and recomputes every contrast.
    """
    point = att(sets, panel, outcome, F)
    spec = sets.refine_spec
    starts = sets.warm_starts() if spec is not None else None
    # a replicate only reweights persons, so its matched sets are the
    # full-sample pools restricted to persons drawn at least once
    offs, ks, is_effect = _offset_arrays(sets.L, F)
    Y = panel.column(outcome)
    base = []
    for pool in sets.pools:
        hist = None
        if spec is not None:
            X, names = _history_matrix(panel, spec, np.concatenate([pool.treated, pool.controls]), pool.t)
            hist = (X[:pool.treated.size], X[pool.treated.size:], names)
        base.append((pool, hist, _pool_changes(pool, Y, panel.treatment, ks, is_effect)))

    def statistic(sample: PanelDataset):
        f = sample.freq
        acc = tuple(np.zeros(len(offs)) for _ in range(3))
        for pool, hist, (j, dt, okt, dc, okc) in base:
            tm = f[pool.treated] > 0
            cm = f[pool.controls] > 0
            if not tm.any() or not cm.any():
                continue
            sub = Pool(pool.t, pool.history, pool.treated[tm], pool.controls[cm])
            if spec is not None:
                history = (np.concatenate([hist[0][tm], hist[1][cm]]), hist[2])
                sub = _refine_pool(sub, sample, spec, starts, history)
            _accumulate(acc, (j, dt[tm], okt[tm], dc[cm], okc[cm]), f[sub.treated],
                        sub.control_weights(f), f[sub.controls])
        return _finish(acc)[0]

    boot = bootstrap(panel, statistic, B=B, seed=seed, mode="blocks_by_id", level=level, n_jobs=n_jobs)
    lo, hi = boot.percentile_ci(level)
    table = point.table.copy()
    table["se"] = np.atleast_1d(boot.se)
    table["ci_lo"] = np.atleast_1d(lo)
    table["ci_hi"] = np.atleast_1d(hi)
    return DynamicATT(outcome, table, level, sets.n_dropped, boot.n_failed)


def set_diagnostics(sets: MatchedSets, panel: PanelDataset) -> pd.DataFrame:
    """One row per pool of matched sets: size, weighting and balance."""
    from .cbps import balance_report

    rows = []
    for pool in sets.pools:
        w = pool.control_weights(sets.freq)
        fc = sets.freq[pool.controls]
        max_before = max_after = np.nan
        if sets.refine_spec is not None and pool.columns:
            idx = np.concatenate([pool.treated, pool.controls])
            X, names = _history_matrix(panel, sets.refine_spec, idx, pool.t)
            X = X[:, [names.index(c) for c in pool.columns]]
            t_vec = np.r_[np.ones(pool.treated.size), np.zeros(pool.controls.size)]
            weights = np.r_[np.ones(pool.treated.size), w]
            ok = ~np.isnan(X).any(axis=1) & (np.r_[sets.freq[pool.treated], fc] > 0)
            rep = balance_report(t_vec[ok], X[ok], weights[ok], freq=np.r_[sets.freq[pool.treated], fc][ok])
            max_before, max_after = rep.max_abs_before, rep.max_abs_after
        rows.append({
            "age": int(sets.times[pool.t]),
            "n_treated": float(sets.freq[pool.treated].sum()),
            "n_controls": float(fc.sum()),
            "ess_controls": _ess(np.repeat(w, fc.astype(int))) if np.all(fc == fc.astype(int)) else np.nan,
            "n_covariates": len(pool.columns),
            "uniform_fallback": bool(pool.fallback or sets.refine_spec is None),
            "max_abs_std_diff_before": max_before,
            "max_abs_std_diff_after": max_after,
        })
    return pd.DataFrame(rows, columns=["age", "n_treated", "n_controls", "ess_controls", "n_covariates",
                                       "uniform_fallback", "max_abs_std_diff_before", "max_abs_std_diff_after"])
