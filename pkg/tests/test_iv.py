import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ivmatch.design import Dataset, ModelSpec, build_instruments, census_specs
from ivmatch.errors import ComplianceWarning, DegenerateInstrument, NonBinary
from ivmatch.iv import (
    ARStatistic,
    anderson_rubin_ci,
    balance_table,
    complier_shares,
    late_by_group,
    ols_effect,
    tsls_fit,
    wald_estimate,
)
from ivmatch.sim import DGPConfig, oracle, simulate_census
from ivmatch.stats import hc1_covariance, ols_fit, wald_joint_test


def iv_data(n=2000, seed=0, strength=0.5, endog=0.5, tau=-0.3, controls=True, p_z=0.5):
    rng = np.random.default_rng(seed)
    z = (rng.random(n) < p_z).astype(float)
    x = rng.normal(size=n)
    u = rng.normal(size=n)
    d = ((strength * z + 0.3 * x + endog * u + rng.normal(size=n)) > 0.5).astype(float)
    y = tau * d + 0.4 * x + u + rng.normal(size=n) * (1 + 0.5 * np.abs(x))
    frame = pd.DataFrame({"y": y, "d": d, "z": z, "x": x})
    return Dataset(frame), ModelSpec("y", "d", ("z",), ("x",) if controls else ())


def textbook_tsls(y, d, Z, X):
    """2SLS through the projection matrix, with HC1 on the second stage."""
    W = np.column_stack([Z, X])
    P = W @ np.linalg.solve(W.T @ W, W.T)
    Xs = np.column_stack([d, X])
    Xh = P @ Xs
    beta = np.linalg.solve(Xh.T @ Xs, Xh.T @ y)
    e = y - Xs @ beta
    n, k = Xs.shape
    bread = np.linalg.inv(Xh.T @ Xh)
    meat = (Xh * e[:, None] ** 2).T @ Xh
    return beta, n / (n - k) * bread @ meat @ bread


# ---------------------------------------------------------------- Wald


def test_wald_hand_enumerated_table():
    z = np.array([1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    d = np.array([1, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0])
    y = np.array([0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0, 1])
    res = wald_estimate(y, d, z, B=0)
    # reduced form 4/6 - 5/6, first stage 3/6 - 1/6
    assert res.reduced_form == pytest.approx(-1 / 6)
    assert res.first_stage == pytest.approx(2 / 6)
    assert res.tau_hat == pytest.approx(-0.5, abs=1e-15)
    assert (res.p_d, res.p_z) == (pytest.approx(4 / 12), pytest.approx(0.5))


def test_wald_equal_reduced_form_gives_zero():
    z = np.array([1, 1, 0, 0])
    d = np.array([1, 0, 0, 0])
    y = np.array([2.0, 4.0, 3.0, 3.0])
    assert wald_estimate(y, d, z, B=0).tau_hat == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(50, 500), st.integers(0, 2**31 - 1))
def test_wald_equals_tsls_without_covariates(n, seed):
    rng = np.random.default_rng(seed)
    z = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(float)
    d = (rng.random(n) < 0.2 + 0.5 * z).astype(float)
    y = rng.normal(size=n) + d
    if z.min() == z.max() or abs(d[z == 1].mean() - d[z == 0].mean()) < 1e-3:
        return
    w = wald_estimate(y, d, z, B=0)
    t = tsls_fit(Dataset(pd.DataFrame({"y": y, "d": d, "z": z})), ModelSpec("y", "d", ("z",)), ar=False)
    assert abs(w.tau_hat - t.tau_hat) <= 1e-10 * max(1.0, abs(w.tau_hat))


def test_wald_bootstrap_se_is_reproducible():
    ds, _ = iv_data(n=800, controls=False, strength=1.5)
    f = ds.frame
    a = wald_estimate(f.y, f.d, f.z, B=200, seed=4)
    b = wald_estimate(f.y, f.d, f.z, B=200, seed=4)
    assert a.se_bootstrap == b.se_bootstrap and a.se_bootstrap > 0
    t = tsls_fit(ds, ModelSpec("y", "d", ("z",)), ar=False)
    assert a.se_bootstrap == pytest.approx(t.se_tau, rel=0.25)


def test_wald_errors_and_zero_first_stage():
    with pytest.raises(DegenerateInstrument):
        wald_estimate([1.0, 2.0], [0, 1], [1, 1], B=0)
    with pytest.raises(NonBinary):
        wald_estimate([1.0, 2.0], [0, 2], [0, 1], B=0)
    z = np.array([1, 1, 0, 0])
    d = np.array([1, 0, 1, 0])
    with pytest.warns(RuntimeWarning):
        res = wald_estimate(np.arange(4.0), d, z, B=0)
    assert res.zero_first_stage and math.isnan(res.tau_hat)


# Table 2 moment rows: (P(D), P(Z), first stage, compliers|D=1, compliers|D=0)
CENSUS_TABLE = {
    ("2002", "same sex"): (0.16, 0.51, 0.03, 0.08, 0.02),
    ("2002", "both boys"): (0.16, 0.26, 0.01, 0.02, 0.01),
    ("2002", "both girls"): (0.16, 0.24, 0.02, 0.04, 0.02),
    ("2002", "multiple births"): (0.16, 0.01, 0.85, 0.05, 1.00),
    ("2010", "same sex"): (0.17, 0.50, 0.03, 0.08, 0.02),
    ("2010", "both boys"): (0.17, 0.27, 0.01, 0.01, 0.01),
    ("2010", "both girls"): (0.17, 0.24, 0.03, 0.04, 0.03),
    ("2010", "multiple births"): (0.16, 0.01, 0.84, 0.04, 1.00),
}


@pytest.mark.parametrize("row", sorted(CENSUS_TABLE))
def test_complier_shares_reproduce_census_table(row):
    p_d, p_z, first, c1, c0 = CENSUS_TABLE[row]
    with warnings.catch_warnings():
        # rounded table inputs can push the multiple-births share just past 1
        warnings.simplefilter("ignore", ComplianceWarning)
        got1, got0 = complier_shares(p_d, p_z, first)
    assert got1 == pytest.approx(c1, abs=0.02)
    assert got0 == pytest.approx(c0, abs=0.02)


def test_complier_shares_warn_without_clamping():
    with pytest.warns(ComplianceWarning):
        c1, c0 = complier_shares(0.05, 0.9, 0.5)
    assert c1 > 1


def test_complier_shares_silent_for_valid_inputs():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        complier_shares(0.16, 0.01, 0.84)


# ---------------------------------------------------------------- 2SLS


def test_tsls_matches_projection_formula():
    ds, spec = iv_data(seed=2)
    res = tsls_fit(ds, spec)
    f = ds.frame
    beta, V = textbook_tsls(f.y.to_numpy(), f.d.to_numpy(), f[["z"]].to_numpy(),
                            np.column_stack([np.ones(len(f)), f.x]))
    assert res.tau_hat == pytest.approx(beta[0], abs=1e-10)
    np.testing.assert_allclose(res.covariance, V, rtol=1e-9)


def test_tsls_overidentified_matches_projection_formula():
    rng = np.random.default_rng(3)
    n = 3000
    Z = (rng.random((n, 2)) < 0.5).astype(float)
    u = rng.normal(size=n)
    d = ((Z @ [0.6, 0.9] + u + rng.normal(size=n)) > 0.8).astype(float)
    y = 0.2 * d + u + rng.normal(size=n)
    ds = Dataset(pd.DataFrame({"y": y, "d": d, "z1": Z[:, 0], "z2": Z[:, 1]}))
    res = tsls_fit(ds, ModelSpec("y", "d", ("z1", "z2")))
    beta, V = textbook_tsls(y, d, Z, np.ones((n, 1)))
    assert res.tau_hat == pytest.approx(beta[0], abs=1e-10)
    np.testing.assert_allclose(res.covariance, V, rtol=1e-9)
    assert res.ar_ci is None


def test_treatment_as_its_own_instrument_is_ols():
    ds, spec = iv_data(seed=6)
    ds = ds.with_columns(d_copy=ds.frame.d)
    res = tsls_fit(ds, spec.replace(instruments=("d_copy",)))
    ols = ols_effect(ds, spec.replace(instruments=()))
    assert res.tau_hat == pytest.approx(ols.tau_hat, abs=1e-10)


def test_weak_f_is_robust_first_stage_test():
    ds, spec = iv_data(seed=7)
    res = tsls_fit(ds, spec)
    f = ds.frame
    W = np.column_stack([f.z, np.ones(len(f)), f.x])
    fit = ols_fit(W, f.d.to_numpy())
    expected = wald_joint_test([0], fit.coefficients, fit.covariance, fit.dof_residual)
    assert res.weak_F.statistic == pytest.approx(expected.statistic, rel=1e-10)
    assert res.weak_F.statistic > 0


def test_sargan_oracle_and_just_identified_flag():
    rng = np.random.default_rng(11)
    n = 2000
    Z = (rng.random((n, 2)) < 0.5).astype(float)
    d = ((Z @ [1.0, 1.0] + rng.normal(size=n)) > 1).astype(float)
    y = -0.2 * d + rng.normal(size=n)
    ds = Dataset(pd.DataFrame({"y": y, "d": d, "z1": Z[:, 0], "z2": Z[:, 1]}))
    res = tsls_fit(ds, ModelSpec("y", "d", ("z1", "z2")))
    beta, _ = textbook_tsls(y, d, Z, np.ones((n, 1)))
    e = y - np.column_stack([d, np.ones(n)]) @ beta
    W = np.column_stack([Z, np.ones(n)])
    fitted = W @ np.linalg.lstsq(W, e, rcond=None)[0]
    r2 = 1 - np.sum((e - fitted) ** 2) / np.sum((e - e.mean()) ** 2)
    assert res.sargan.statistic == pytest.approx(n * r2, rel=1e-8)
    assert res.sargan.p_value == pytest.approx(stats.chi2.sf(n * r2, 1), rel=1e-8)
    just = tsls_fit(ds, ModelSpec("y", "d", ("z1",)))
    assert just.sargan is None and just.just_identified


def test_wu_hausman_control_function_oracle():
    ds, spec = iv_data(n=5000, seed=12, strength=1.5, endog=1.5)
    res = tsls_fit(ds, spec)
    f = ds.frame
    W = np.column_stack([f.z, np.ones(len(f)), f.x])
    v = f.d.to_numpy() - W @ np.linalg.lstsq(W, f.d.to_numpy(), rcond=None)[0]
    X = np.column_stack([f.d, np.ones(len(f)), f.x, v])
    b = np.linalg.lstsq(X, f.y.to_numpy(), rcond=None)[0]
    V = hc1_covariance(X, f.y.to_numpy() - X @ b)
    t2 = b[-1] ** 2 / V[-1, -1]
    assert res.wu_hausman.statistic == pytest.approx(t2, rel=1e-8)
    assert res.wu_hausman.p_value < 0.01


def test_listwise_deletion_counts_rows():
    ds, spec = iv_data(n=300, seed=1)
    f = ds.frame.copy()
    f.loc[:9, "x"] = np.nan
    res = tsls_fit(Dataset(f), spec)
    assert res.n_obs == 290 and res.n_dropped == 10


# ---------------------------------------------------------------- Anderson-Rubin


def explicit_ar(ds, spec, tau0):
    """AR statistic by brute force: regress y - tau0 d on [Z, X] and test Z."""
    f = ds.frame
    W = np.column_stack([f[list(spec.instruments)].to_numpy(), np.ones(len(f)), f[list(spec.exogenous)].to_numpy()])
    fit = ols_fit(W, f.y.to_numpy() - tau0 * f.d.to_numpy())
    m = len(spec.instruments)
    return wald_joint_test(range(m), fit.coefficients, fit.covariance, fit.dof_residual)


def test_ar_statistic_matches_explicit_regressions():
    ds, spec = iv_data(seed=5)
    res = tsls_fit(ds, spec)
    f = ds.frame
    W = np.column_stack([f.z, np.ones(len(f)), f.x])
    from ivmatch.stats import DesignMatrix

    stat = ARStatistic(DesignMatrix(W, ("z", "c", "x")), f.y.to_numpy(), f.d.to_numpy(), 1)
    for tau0 in (res.tau_hat, -2.0, 0.0, 1.3):
        assert stat(tau0) == pytest.approx(explicit_ar(ds, spec, tau0).statistic, rel=1e-9)


def test_ar_endpoints_are_test_boundaries():
    ds, spec = iv_data(seed=8, strength=0.4)
    res = tsls_fit(ds, spec)
    ci = res.ar_ci
    assert ci.kind == "bounded"
    crit = stats.f.ppf(0.95, 1, len(ds) - 3)
    for end in (ci.lo, ci.hi):
        assert explicit_ar(ds, spec, end).statistic == pytest.approx(crit, rel=1e-4)
    width = ci.hi - ci.lo
    assert explicit_ar(ds, spec, ci.lo - 0.01 * width).statistic > crit
    assert explicit_ar(ds, spec, ci.hi + 0.01 * width).statistic > crit


def test_ar_matches_quadratic_solution():
    # single instrument, no controls: AR(t) <= c is a quadratic inequality in t
    ds, spec = iv_data(seed=9, controls=False)
    res = tsls_fit(ds, spec)
    f = ds.frame
    W = np.column_stack([f.z, np.ones(len(f))])
    crit = stats.f.ppf(0.95, 1, len(f) - 2)
    t = np.array([-1.0, 0.0, 1.0])
    vals = [explicit_ar(ds, spec, x) for x in t]
    b = [ols_fit(W, f.y.to_numpy() - x * f.d.to_numpy()).coefficients[0] for x in t]
    v = [b_ ** 2 / r.statistic for b_, r in zip(b, vals)]
    # b is affine and v quadratic in t; recover both exactly from three points
    bcoef = np.polyfit(t[:2], b[:2], 1)
    vcoef = np.polyfit(t, v, 2)
    roots = np.sort(np.roots(np.polysub(np.polymul(bcoef, bcoef), crit * vcoef)).real)
    assert res.ar_ci.lo == pytest.approx(roots[0], abs=1e-5 * res.se_tau)
    assert res.ar_ci.hi == pytest.approx(roots[1], abs=1e-5 * res.se_tau)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_ar_always_contains_point_estimate(seed, strength):
    ds, spec = iv_data(n=400, seed=seed, strength=strength)
    res = tsls_fit(ds, spec)
    assert res.ar_ci.contains(res.tau_hat)


def test_ar_close_to_wald_interval_with_very_strong_instrument():
    rng = np.random.default_rng(21)
    n = 50_000
    z = (rng.random(n) < 0.5).astype(float)
    u = rng.normal(size=n)
    d = ((4 * z + 0.3 * u + 0.3 * rng.normal(size=n)) > 2).astype(float)
    y = 0.5 * d + u
    ds = Dataset(pd.DataFrame({"y": y, "d": d, "z": z}))
    res = tsls_fit(ds, ModelSpec("y", "d", ("z",)))
    W = np.column_stack([z, np.ones(n)])
    fitted = W @ np.linalg.lstsq(W, d, rcond=None)[0]
    assert 1 - np.sum((d - fitted) ** 2) / np.sum((d - d.mean()) ** 2) > 0.5
    half = 1.96 * res.se_tau
    assert abs(res.ar_ci.lo - (res.tau_hat - half)) <= 0.1 * half
    assert abs(res.ar_ci.hi - (res.tau_hat + half)) <= 0.1 * half


def test_ar_unbounded_for_irrelevant_instrument():
    rng = np.random.default_rng(2)
    n = 500
    z = (rng.random(n) < 0.5).astype(float)
    d = (rng.random(n) < 0.3).astype(float)
    y = rng.normal(size=n)
    ds = Dataset(pd.DataFrame({"y": y, "d": d, "z": z}))
    ci = anderson_rubin_ci(ds, ModelSpec("y", "d", ("z",)))
    assert ci.kind in ("unbounded", "empty") or ci.hi - ci.lo > 50


def test_same_sex_interval_covers_zero_in_census_simulation():
    sim = simulate_census(DGPConfig(n=60_000, seed=3))
    ds = build_instruments(sim.dataset)
    spec = census_specs(controls=("age_band", "education", "rural", "married"))["samesex"]
    ci = tsls_fit(ds, spec).ar_ci
    assert ci.lo < 0 < ci.hi


# ---------------------------------------------------------------- subsamples and balance


def test_one_level_grouping_equals_plain_fit():
    ds, spec = iv_data(seed=4)
    ds = ds.with_columns(g="all")
    [(level, res)] = late_by_group(ds, spec, "g")
    assert level == "all"
    assert res.tau_hat == pytest.approx(tsls_fit(ds, spec).tau_hat, abs=1e-14)


def test_heterogeneous_effects_separate_by_education():
    cfg = DGPConfig(n=200_000, seed=5, tau=-0.10, tau_by="education", tau_groups={"tertiary": 0.0})
    sim = simulate_census(cfg)
    ds = build_instruments(sim.dataset)
    spec = ModelSpec("employed", "more_than_2", ("z_samesex", "multibirth"),
                     ("sex_child1", "sex_child2", "age_band", "rural", "married"))
    fits = dict(late_by_group(ds, spec, "education"))
    assert min(len(p) for p in (ds.frame.education == lv for lv in fits)) > 0
    ter = fits["tertiary"]
    for level in ("lower", "secondary"):
        other = fits[level]
        joint = math.hypot(other.se_tau, ter.se_tau)
        assert ter.tau_hat - other.tau_hat > 2 * joint


def test_homogeneous_groups_agree():
    sim = simulate_census(DGPConfig(n=60_000, seed=6, instrument_strength=0.1))
    ds = build_instruments(sim.dataset)
    spec = ModelSpec("employed", "more_than_2", ("z_samesex", "multibirth"), ("sex_child1", "sex_child2"))
    fits = late_by_group(ds, spec, "education")
    for (_, a), (_, b) in zip(fits, fits[1:]):
        assert abs(a.tau_hat - b.tau_hat) < 2 * math.hypot(a.se_tau, b.se_tau)


def test_tiny_subsample_is_skipped_with_warning():
    ds, spec = iv_data(n=200, seed=1)
    g = np.where(np.arange(200) < 2, "tiny", "big")
    with pytest.warns(RuntimeWarning):
        fits = late_by_group(ds.with_columns(g=g), spec, "g")
    assert [lv for lv, _ in fits] == ["big"]


def test_balance_table_columns():
    ds, _ = iv_data(n=500)
    table = balance_table(ds, "z", ["x", "d"])
    assert list(table.columns) == ["instrument", "variable", "mean", "sd", "mean_z1", "sd_z1", "mean_z0", "sd_z0",
                                   "diff", "t_stat"]
    row = table.set_index("variable").loc["d"]
    assert row["diff"] == pytest.approx(row["mean_z1"] - row["mean_z0"])


# ---------------------------------------------------------------- consistency


def test_estimation_error_shrinks_with_sample_size():
    medians = []
    for n in (1_000, 10_000, 100_000):
        errs = []
        for rep in range(50):
            rng = np.random.default_rng([n, rep])
            z = (rng.random(n) < 0.5).astype(float)
            u = rng.normal(size=n)
            d = ((0.5 * z + u + rng.normal(size=n)) > 0.5).astype(float)
            y = -0.1 * d + u + rng.normal(size=n)
            errs.append(abs(wald_estimate(y, d, z, B=0).tau_hat + 0.1))
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]


def test_ols_biased_iv_centered_in_census_simulation():
    sim = simulate_census(DGPConfig(n=100_000, seed=2))
    ds = build_instruments(sim.dataset)
    specs = census_specs(controls=("age_band", "education", "rural", "married", "region"))
    truth = oracle(sim, "LATE(multibirth)")
    iv = tsls_fit(ds, specs["multibirth"], ar=False)
    ols = ols_effect(ds, specs["ols"])
    assert abs(iv.tau_hat - truth) < 0.04
    assert ols.tau_hat < truth - 0.05
