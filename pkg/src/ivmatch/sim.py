"""Synthetic data with stored potential outcomes.

Two generators: a cross-section of mothers with at least two children
(same-sex and multiple-birth instruments for a third child), and a
person-by-age panel with staggered first births. Both keep every unit's
potential outcomes so that ATE, LATE and ATT can be read off directly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .design import Dataset, age_bands
from .errors import CalibrationFailed, UnknownInstrument

EDUCATION_LEVELS = ("lower", "secondary", "tertiary")
REGIONS = tuple(f"R{j:02d}" for j in range(1, 9))
INSTRUMENTS = ("z_samesex", "z_boys", "z_girls", "multibirth")
COMPLIANCE = ("always-taker", "never-taker", "complier")


@dataclass(frozen=True)
class PanelConfig:
    """Knobs of the panel generator (logit hazard and outcome trends)."""

    first_age: int = 20
    base_hazard: float = -3.6
    hazard_partnered: float = 1.0
    hazard_graduated: float = -0.3
    hazard_urban: float = -0.2
    hazard_birth_year: float = 0.02
    hazard_outcome: float = 0.5
    hazard_omitted: float = 0.0
    trend_graduated: float = 0.01
    trend_urban: float = -0.005
    partnered_level: float = 0.08
    omitted_trend: float = 0.0
    noise_sd: float = 0.15
    p_missing: float = 0.0


@dataclass(frozen=True)
class DGPConfig:
    """Parameters of both generators.

    ``confounder_strength`` c loads the unobserved U ~ N(0, 1) with c on the
    third-child index and with -0.1 c on the outcome. Effects: every unit
    gets ``tau`` unless ``tau_groups`` maps its ``tau_by`` level to another
    value; ``tau_complier`` overrides the effect for compliers of
    ``complier_instrument``. ``direct_effects`` adds instrument terms to the
    outcome (an exclusion violation, zero by default).
    """

    n: int = 10_000
    seed: int = 0
    p_boy: float = 0.51
    p_multibirth: float = 0.01
    p_treated: float = 0.16
    confounder_strength: float = 1.0
    instrument_strength: float = 0.03
    tau: float = -0.05
    tau_by: str | None = None
    tau_groups: Mapping[str, float] = field(default_factory=dict)
    tau_complier: float | None = None
    complier_instrument: str = "z_samesex"
    reverse_causality: float = 0.0
    sex_effects: tuple[float, float] = (0.0, -0.01)
    direct_effects: Mapping[str, float] = field(default_factory=dict)
    outcome: str = "linear"
    noise_sd: float = 0.4
    panel: PanelConfig = field(default_factory=PanelConfig)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        for name in ("p_boy", "p_multibirth", "p_treated"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.outcome not in ("linear", "binary"):
            raise ValueError("outcome must be 'linear' or 'binary'")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.complier_instrument not in INSTRUMENTS:
            raise UnknownInstrument(self.complier_instrument)
        for z in self.direct_effects:
            if z not in INSTRUMENTS:
                raise UnknownInstrument(z)

    def replace(self, **changes) -> "DGPConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SimOutput:
    """Observed data plus the hidden per-unit truth.

    ``hidden`` holds y0, y1 and u (census: one row per mother, aligned with
    the dataset; panel: one row per person-age), and for census data a
    compliance-type column per instrument.
    """

    kind: str
    dataset: Dataset
    hidden: pd.DataFrame
    config: DGPConfig
    att_profile: tuple[float, ...] = ()

    @property
    def frame(self) -> pd.DataFrame:
        return self.dataset.frame


# --------------------------------------------------------------------------
# census cross-section
# --------------------------------------------------------------------------


def _bisect(f, lo, hi, target, tol, max_iter=50, strict=True):
    """Find x with |f(x) - target| <= tol for f non-decreasing on [lo, hi].

    Without ``strict`` the last midpoint is returned instead of raising.
    """
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        v = f(mid)
        if abs(v - target) <= tol:
            return mid
        if v < target:
            lo = mid
        else:
            hi = mid
    if not strict:
        return mid
    raise CalibrationFailed(f"could not reach {target:.4g} within {max_iter} bisection steps")


def simulate_census(cfg: DGPConfig) -> SimOutput:
    """Mothers with two or more children and the third-child decision.

    D = 1 when a multiple second birth occurs or when the latent index
    ``a + x'b + c U - r (p0 - mean p0) + s z_samesex + eta`` is positive.
    The intercept ``a`` is set so P(D) is near ``p_treated`` and the shift
    ``s`` so the realized same-sex complier share is within 0.005 of
    ``instrument_strength``, both by bisection. Instruments enter the
    outcome only through ``direct_effects``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(cfg.n)
    age = rng.integers(22, 56, n).astype(float)
    child2_age = np.floor(rng.uniform(0, np.minimum(17.0, age - 20.0)))
    child1_age = child2_age + rng.integers(1, 6, n)
    married = (rng.random(n) < 0.8).astype(float)
    rural = (rng.random(n) < 0.27).astype(float)
    region = rng.integers(0, len(REGIONS), n)
    edu = rng.choice(3, size=n, p=[0.35, 0.4, 0.25])
    u = rng.standard_normal(n)
    s1 = (rng.random(n) < cfg.p_boy).astype(float)
    s2 = (rng.random(n) < cfg.p_boy).astype(float)
    mb = (rng.random(n) < cfg.p_multibirth).astype(float)
    eta = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    v = rng.random(n)

    z_ss = (s1 == s2).astype(float)
    z = {"z_samesex": z_ss, "z_boys": s1 * s2, "z_girls": (1 - s1) * (1 - s2), "multibirth": mb}
    c = cfg.confounder_strength
    a35 = age - 35.0
    region_effect = np.linspace(-0.04, 0.04, len(REGIONS))[region]
    p0 = (0.72 + 0.004 * a35 - 0.0004 * a35**2 + np.array([0.0, 0.05, 0.12])[edu]
          - 0.03 * rural + 0.02 * married + 0.01 * np.minimum(child2_age, 10.0) + region_effect)
    index = 0.03 * a35 + 0.3 * married + 0.25 * rural - 0.3 * (edu == 2) + c * u
    index = index - cfg.reverse_causality * (p0 - p0.mean())
    y_shift = -0.1 * c * u + cfg.sex_effects[0] * s1 + cfg.sex_effects[1] * s2
    y_shift = y_shift + sum(cfg.direct_effects.get(k, 0.0) * z[k] for k in INSTRUMENTS)

    nat = index + eta  # D_samesex(z) = 1[nat + a + s z > 0]

    def share_compliers(a, s):
        return np.mean((mb == 0) & (nat + a + s > 0) & (nat + a <= 0))

    def p_treated(a, s):
        return np.mean(np.maximum(mb, (nat + a + s * z_ss > 0)))

    a, s = 0.0, 0.0
    for _ in range(3):
        a = _bisect(lambda x: p_treated(x, s), -15.0, 15.0, cfg.p_treated, 0.002, strict=False)
        if cfg.instrument_strength <= 0:
            s = 0.0
        else:
            s = _bisect(lambda x: share_compliers(a, x), 0.0, 10.0, cfg.instrument_strength, 0.001, strict=False)
    if abs(share_compliers(a, s) - cfg.instrument_strength) > 0.005:
        raise CalibrationFailed("same-sex complier share missed its target")

    d_ss0 = (nat + a > 0).astype(float)
    d_ss1 = (nat + a + s > 0).astype(float)
    d_ss = np.where(z_ss == 1, d_ss1, d_ss0)
    d = np.maximum(d_ss, mb)

    types = {}
    ss_type = np.where(mb == 1, 0, np.where(d_ss0 == 1, 0, np.where(d_ss1 == 1, 2, 1)))
    for k in ("z_samesex", "z_boys", "z_girls"):
        types[k] = ss_type
    types["multibirth"] = np.where(d_ss == 1, 0, 2)

    tau_i = np.full(n, float(cfg.tau))
    if cfg.tau_by is not None:
        levels = {"education": np.array(EDUCATION_LEVELS)[edu], "region": np.array(REGIONS)[region],
                  "rural": rural.astype(int).astype(str), "married": married.astype(int).astype(str),
                  "age_band": np.asarray(age_bands(age), dtype=object).astype(str)}
        if cfg.tau_by not in levels:
            raise ValueError(f"tau_by must be one of {sorted(levels)}")
        lv = levels[cfg.tau_by]
        for level, value in cfg.tau_groups.items():
            tau_i[lv == str(level)] = float(value)
    if cfg.tau_complier is not None:
        tau_i[types[cfg.complier_instrument] == 2] = float(cfg.tau_complier)

    base = p0 + y_shift
    if cfg.outcome == "linear":
        y0 = base + cfg.noise_sd * eps
        y1 = y0 + tau_i
    else:
        y0 = (v < base).astype(float)
        y1 = (v < base + tau_i).astype(float)
    y = np.where(d == 1, y1, y0)

    frame = pd.DataFrame({
        "person_id": np.arange(1, n + 1),
        "employed": y,
        "more_than_2": d,
        "sex_child1": s1,
        "sex_child2": s2,
        "multibirth": mb,
        "mother_age": age,
        "age_band": age_bands(age),
        "child1_age": child1_age,
        "child2_age": child2_age,
        "married": married,
        "rural": rural,
        "region": pd.Categorical(np.array(REGIONS)[region], categories=REGIONS),
        "education": pd.Categorical(np.array(EDUCATION_LEVELS)[edu], categories=EDUCATION_LEVELS),
    })
    hidden = pd.DataFrame({"y0": y0, "y1": y1, "u": u, "tau": tau_i})
    for k in INSTRUMENTS:
        hidden[f"type_{k}"] = pd.Categorical(np.array(COMPLIANCE)[types[k]], categories=COMPLIANCE)
    return SimOutput("census", Dataset(frame, person_id="person_id"), hidden, cfg)


# --------------------------------------------------------------------------
# person x age panel
# --------------------------------------------------------------------------


def simulate_panel(cfg: DGPConfig, T: int = 14, att_profile: Sequence[float] = (-0.8, -0.8, -0.6, -0.2, 0.0, 0.0),
                   L: int = 3) -> SimOutput:
    """Persons followed over ``T`` ages with staggered, absorbing first births.

    The untreated outcome is a person level plus covariate-specific age
    trends plus a partnership shift plus noise. The yearly birth hazard is
    logistic in the covariates, age and last year's outcome; with
    ``hazard_omitted`` and ``omitted_trend`` non-zero a hidden trait also
    drives both, which breaks parallel trends given the observables. After
    a birth at age ``t*`` the outcome at ``t* + f`` shifts by
    ``att_profile[f]`` (the last entry for later ages).
    """
    pc = cfg.panel
    profile = np.asarray(att_profile, dtype=float)
    if profile.size == 0:
        raise ValueError("att_profile must not be empty")
    F = profile.size - 1
    if T < L + F + 2:
        raise ValueError(f"T = {T} is too short for L = {L} and {F} leads (need >= {L + F + 2})")
    rng = np.random.default_rng(cfg.seed)
    n = int(cfg.n)
    ages = pc.first_age + np.arange(T)
    elapsed = np.arange(T, dtype=float)

    birth_year = rng.integers(1975, 1996, n).astype(float)
    graduated = (rng.random(n) < 0.35).astype(float)
    urban = (rng.random(n) < 0.7).astype(float)
    u = rng.standard_normal(n)
    level = 0.4 + 0.15 * graduated + 0.05 * urban + 0.1 * rng.standard_normal(n)
    slope = 0.01 + pc.trend_graduated * graduated + pc.trend_urban * urban + pc.omitted_trend * u

    partnered = np.zeros((n, T))
    partnered[:, 0] = rng.random(n) < 0.3
    draws = rng.random((n, T))
    for t in range(1, T):
        stay = partnered[:, t - 1] == 1
        partnered[:, t] = np.where(stay, draws[:, t] >= 0.03, draws[:, t] < 0.12)

    y0 = (level[:, None] + slope[:, None] * elapsed + pc.partnered_level * partnered
          + pc.noise_sd * rng.standard_normal((n, T)))

    hazard_u = rng.random((n, T))
    birth_col = np.full(n, -1)
    for t in range(1, T):
        eta = (pc.base_hazard + pc.hazard_partnered * partnered[:, t - 1] + pc.hazard_graduated * graduated
               + pc.hazard_urban * urban + pc.hazard_birth_year * (birth_year - 1985)
               + pc.hazard_outcome * (y0[:, t - 1] - 0.5) + pc.hazard_omitted * u
               - 0.01 * (ages[t] - 27) ** 2)
        new = (birth_col < 0) & (hazard_u[:, t] < 1.0 / (1.0 + np.exp(-eta)))
        birth_col[new] = t

    lead = elapsed[None, :] - birth_col[:, None]
    treated = (birth_col[:, None] >= 0) & (lead >= 0)
    effect = np.where(treated, profile[np.clip(lead, 0, F).astype(int)], 0.0)
    y1 = np.where(birth_col[:, None] >= 0, y0 + profile[np.clip(lead, 0, F).astype(int)] * (lead >= 0), np.nan)
    y = y0 + effect

    keep = rng.random((n, T)) >= pc.p_missing
    pid = np.repeat(np.arange(1, n + 1), T)
    frame = pd.DataFrame({
        "person_id": pid,
        "age": np.tile(ages, n),
        "parity": treated.ravel().astype(float),
        "treated": treated.ravel().astype(float),
        "employed": y.ravel(),
        "birth_year": np.repeat(birth_year, T),
        "graduated": np.repeat(graduated, T),
        "partnered": partnered.ravel(),
        "urban": np.repeat(urban, T),
    })
    hidden = pd.DataFrame({
        "person_id": pid,
        "age": np.tile(ages, n),
        "y0": y0.ravel(),
        "y1": y1.ravel(),
        "u": np.repeat(u, T),
        "birth_age": np.repeat(np.where(birth_col >= 0, ages[np.maximum(birth_col, 0)], -1), T),
    })
    mask = keep.ravel()
    frame = frame[mask].reset_index(drop=True)
    hidden = hidden[mask].reset_index(drop=True)
    return SimOutput("panel", Dataset(frame, person_id="person_id", time="age"), hidden, cfg,
                     tuple(float(x) for x in profile))


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------


def _parse_estimand(estimand):
    if isinstance(estimand, tuple):
        return estimand[0].upper(), estimand[1] if len(estimand) > 1 else None
    text = str(estimand).strip()
    if "(" in text and text.endswith(")"):
        head, arg = text[:-1].split("(", 1)
        return head.strip().upper(), arg.strip()
    return text.upper(), None


def oracle(sim: SimOutput, estimand) -> float:
    """True value of ``"ATE"``, ``"LATE(<instrument>)"`` or ``"ATT(<lead>)"``.

    Tuples such as ``("LATE", "multibirth")`` or ``("ATT", 2)`` also work.
    Values are plain averages of stored ``y1 - y0``: over everyone, over
    the instrument's compliers, or over treated persons observed ``lead``
    years after their birth.
    """
    kind, arg = _parse_estimand(estimand)
    h = sim.hidden
    if kind == "ATE":
        if sim.kind != "census":
            raise ValueError("ATE is defined for census simulations")
        return float(np.mean(h["y1"] - h["y0"]))
    if kind == "LATE":
        if sim.kind != "census":
            raise ValueError("LATE is defined for census simulations")
        if arg not in INSTRUMENTS:
            raise UnknownInstrument(arg)
        m = (h[f"type_{arg}"] == "complier").to_numpy()
        if not m.any():
            return float("nan")
        return float(np.mean((h["y1"] - h["y0"]).to_numpy()[m]))
    if kind == "ATT":
        if sim.kind != "panel":
            raise ValueError("ATT(lead) is defined for panel simulations")
        f = int(arg)
        m = (h["birth_age"] >= 0) & (h["age"] - h["birth_age"] == f)
        if not m.any():
            return float("nan")
        return float(np.mean((h["y1"] - h["y0"])[m]))
    raise ValueError(f"unknown estimand {estimand!r}")
