"""Command-line front end: ``ivmatch {simulate,iv,did,report} --config run.toml``.

Every subcommand reads a TOML file with the sections ``input``, ``schema``,
``model``, ``estimator``, ``subsample``, ``output`` and ``simulate``,
writes CSV tables into the output directory together with a
``manifest.json``, and logs to standard error.

Exit codes: 0 success, 2 configuration or schema error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import tomli

from . import __version__
from .design import CENSUS_MODELS, ModelSpec, build_instruments, census_specs, read_csv
from .errors import ConfigError, DataError, IVMatchError, NumericalError, UnknownInstrument
from .iv import balance_table, late_by_group, ols_effect, tsls_fit, wald_estimate
from .panel import PanelDataset, att, att_with_ci, find_matched_sets, refine, set_diagnostics
from .sim import DGPConfig, PanelConfig, oracle, simulate_census, simulate_panel

log = logging.getLogger("ivmatch")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SECTIONS = ("input", "schema", "model", "estimator", "subsample", "output", "simulate")
WALD_INSTRUMENTS = ("z_samesex", "z_boys", "z_girls", "multibirth")
ESTIMATE_COLUMNS = ["model_id", "estimator", "instrument_set", "tau_hat", "se_hc1", "weak_F", "ar_lo", "ar_hi",
                    "wu_hausman", "wu_p", "sargan", "sargan_p", "n_obs"]
WALD_COLUMNS = ["iv", "p_d", "p_z", "first_stage", "compliers_d1", "compliers_d0", "tau_wald", "se_wald"]
ATT_COLUMNS = ["outcome", "parity_transition", "lead", "estimate", "ci_lo", "ci_hi", "n_sets", "kind"]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def load_config(path, seed: int | None = None, out: str | None = None) -> dict:
    """Parse the TOML file and apply command-line overrides."""
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}") from None
    unknown = sorted(set(cfg) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    for name in SECTIONS:
        cfg.setdefault(name, {})
        if not isinstance(cfg[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    base = Path(path).resolve().parent
    cfg["_base"] = str(base)
    if seed is not None:
        cfg["estimator"]["seed"] = seed
        cfg["simulate"]["seed"] = seed
    if out is not None:
        cfg["output"]["dir"] = out
    return cfg


def effective(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def config_hash(cfg: dict) -> str:
    text = json.dumps(effective(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _resolve(cfg: dict, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else Path(cfg["_base"]) / path


def _out_dir(cfg: dict) -> Path:
    d = cfg["output"].get("dir")
    if not d:
        raise ConfigError("[output] dir is required (or pass --out)")
    path = _resolve(cfg, d) if not Path(d).is_absolute() and "_cli_out" not in cfg else Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(section: dict, what: str) -> int:
    if "seed" not in section:
        raise ConfigError(f"{what} is stochastic; a seed is required (config or --seed)")
    seed = section["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return seed


def _strings(value, name) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{name} must be a string or a list of strings")
    return list(value)


def _input_paths(cfg: dict) -> list[Path]:
    inp = cfg["input"]
    paths = _strings(inp.get("paths", inp.get("path")), "[input] path")
    if not paths:
        raise ConfigError("[input] path is required")
    return [_resolve(cfg, p) for p in paths]


def _read_input(cfg: dict, person_id=None, time=None):
    schema = cfg["schema"]
    cats = schema.get("categoricals", {})
    if isinstance(cats, list):
        cats = {c: None for c in cats}
    levels = schema.get("levels", {})
    cats = {c: levels.get(c, lv) for c, lv in cats.items()} | {c: lv for c, lv in levels.items() if c not in cats}
    frames = []
    for path in _input_paths(cfg):
        if not path.exists():
            raise ConfigError(f"input file not found: {path}")
        frames.append(read_csv(path, cats).frame)
    frame = pd.concat(frames, ignore_index=True) if len(frames) > 1 else frames[0]
    return frame


def _check_columns(frame: pd.DataFrame, columns, what: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{what}: columns missing from the input: {missing}; available: {list(frame.columns)}")


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if math.isnan(x):
            return "NA"
        if math.isinf(x):
            return "Inf" if x > 0 else "-Inf"
        if x == int(x) and abs(x) < 1e15:
            return str(int(x))
        return f"{float(x):.6g}"
    if pd.isna(x):
        return "NA"
    s = str(x)
    if any(ch in s for ch in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_csv(frame: pd.DataFrame, path: Path, columns=None) -> None:
    """Locale-independent CSV: '.' decimals, 6 significant digits, NA, LF."""
    columns = list(frame.columns) if columns is None else list(columns)
    lines = [",".join(columns)]
    for row in frame[columns].itertuples(index=False, name=None) if len(frame) else []:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def write_manifest(cfg: dict, out: Path, command: str, seed: int | None, files) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config_sha256": config_hash(cfg),
        "config": effective(cfg),
        "outputs": sorted(files),
    }
    text = json.dumps(manifest, sort_keys=True, indent=2, default=str)
    (out / "manifest.json").write_bytes((text + "\n").encode("utf-8"))


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def _dgp_config(sim: dict, seed: int) -> DGPConfig:
    fields = {f.name for f in dataclasses.fields(DGPConfig)} - {"panel", "seed"}
    pfields = {f.name for f in dataclasses.fields(PanelConfig)}
    skip = {"kind", "T", "att_profile", "seed", "panel", "L"}
    unknown = sorted(set(sim) - fields - skip)
    if unknown:
        raise ConfigError(f"unknown [simulate] keys: {unknown}")
    panel = sim.get("panel", {})
    bad = sorted(set(panel) - pfields)
    if bad:
        raise ConfigError(f"unknown [simulate.panel] keys: {bad}")
    kwargs = {k: v for k, v in sim.items() if k in fields}
    if "sex_effects" in kwargs:
        kwargs["sex_effects"] = tuple(kwargs["sex_effects"])
    n = kwargs.get("n", DGPConfig.n)
    if not isinstance(n, int) or n < 1:
        raise ConfigError("[simulate] n must be a positive integer")
    try:
        return DGPConfig(seed=seed, panel=PanelConfig(**panel), **kwargs)
    except (TypeError, ValueError, UnknownInstrument) as exc:
        raise ConfigError(f"invalid [simulate] section: {exc}") from None


def cmd_simulate(cfg: dict) -> list[str]:
    sim = cfg["simulate"]
    if not sim:
        raise ConfigError("[simulate] section is required")
    kind = sim.get("kind", "census")
    if kind not in ("census", "panel"):
        raise ConfigError("[simulate] kind must be 'census' or 'panel'")
    seed = _seed(sim, "simulate")
    dgp = _dgp_config(sim, seed)
    out = _out_dir(cfg)
    if kind == "census":
        result = simulate_census(dgp)
        data_name = "census.csv"
        truths = [("ATE", oracle(result, "ATE"))]
        truths += [(f"LATE({z})", oracle(result, ("LATE", z))) for z in ("z_samesex", "multibirth")]
        hidden = pd.concat([result.frame[["person_id"]], result.hidden], axis=1)
    else:
        profile = sim.get("att_profile", [-0.8, -0.8, -0.6, -0.2, 0.0, 0.0])
        try:
            result = simulate_panel(dgp, T=int(sim.get("T", 14)), att_profile=profile, L=int(sim.get("L", 3)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        data_name = "panel.csv"
        truths = [(f"ATT({f})", oracle(result, ("ATT", f))) for f in range(len(profile))]
        hidden = result.hidden
    write_csv(result.frame, out / data_name)
    write_csv(pd.DataFrame(truths, columns=["estimand", "value"]), out / "oracle.csv")
    write_csv(hidden, out / "hidden.csv")
    files = [data_name, "oracle.csv", "hidden.csv"]
    write_manifest(cfg, out, "simulate", seed, files)
    log.info("simulated %s data (n=%d) into %s", kind, dgp.n, out)
    return files


# --------------------------------------------------------------------------
# iv
# --------------------------------------------------------------------------


def _iv_models(cfg: dict, frame: pd.DataFrame) -> dict[str, ModelSpec]:
    model = cfg["model"]
    outcome = model.get("outcome", "employed")
    treatment = model.get("treatment", "more_than_2")
    controls = _strings(model.get("controls"), "[model] controls")
    fe = _strings(model.get("fixed_effects"), "[model] fixed_effects")
    try:
        if "instruments" in model:
            instruments = _strings(model["instruments"], "[model] instruments")
            if not instruments:
                raise ConfigError("estimator tsls needs at least one instrument")
            return {
                "ols": ModelSpec(outcome, treatment, (), controls, fe),
                "tsls": ModelSpec(outcome, treatment, instruments, controls, fe),
            }
        wanted = _strings(model.get("models", list(CENSUS_MODELS)), "[model] models")
        specs = census_specs(outcome, treatment, controls, fe, overidentified="samesex_multibirth" in wanted)
    except ValueError as exc:
        raise ConfigError(f"invalid [model] section: {exc}") from None
    bad = [m for m in wanted if m not in specs]
    if bad:
        raise ConfigError(f"unknown models {bad}; choose from {sorted(specs)}")
    return {m: specs[m] for m in wanted}


def _estimate_row(model_id, spec: ModelSpec, res, estimator) -> dict:
    row = dict.fromkeys(ESTIMATE_COLUMNS, None)
    row.update(model_id=model_id, estimator=estimator, instrument_set="+".join(spec.instruments),
               tau_hat=res.tau_hat, se_hc1=res.se_tau, n_obs=res.n_obs)
    if estimator == "2sls":
        row["weak_F"] = res.weak_F.statistic
        if res.ar_ci is not None:
            row["ar_lo"], row["ar_hi"] = res.ar_ci.lo, res.ar_ci.hi
        if res.wu_hausman is not None:
            row["wu_hausman"], row["wu_p"] = res.wu_hausman.statistic, res.wu_hausman.p_value
        if res.sargan is not None:
            row["sargan"], row["sargan_p"] = res.sargan.statistic, res.sargan.p_value
    return row


def _ar_options(est: dict) -> dict:
    opts = {}
    for key, name in (("ar_width", "ar_width"), ("ar_step", "ar_step"), ("ar_expand", "ar_expand"),
                      ("ar_level", "ar_level")):
        if key in est:
            opts[name] = est[key]
    return opts


def cmd_iv(cfg: dict) -> list[str]:
    est = cfg["estimator"]
    kind = est.get("kind", "tsls")
    if kind not in ("tsls", "wald"):
        raise ConfigError("the iv command runs estimator kind 'tsls' or 'wald'")
    seed = _seed(est, "the Wald bootstrap")
    B = int(est.get("B", 500))
    out = _out_dir(cfg)
    frame = _read_input(cfg)
    _check_columns(frame, ["sex_child1", "sex_child2"], "census schema")
    ds = build_instruments(read_csv_frame(frame, cfg))
    models = _iv_models(cfg, ds.frame)
    for mid, spec in models.items():
        _check_columns(ds.frame, spec.columns, f"model {mid}")
    files = []

    if kind == "tsls":
        rows = []
        opts = _ar_options(est)
        for mid, spec in models.items():
            if spec.instruments:
                res = tsls_fit(ds, spec, **opts)
                rows.append(_estimate_row(mid, spec, res, "2sls"))
            else:
                rows.append(_estimate_row(mid, spec, ols_effect(ds, spec), "ols"))
        write_csv(pd.DataFrame(rows, columns=ESTIMATE_COLUMNS), out / "estimates.csv", ESTIMATE_COLUMNS)
        files.append("estimates.csv")

    first = next(iter(models.values()))
    y_col, d_col = first.outcome, first.treatment
    wald_rows = []
    instruments = [z for z in WALD_INSTRUMENTS if z in ds.frame.columns]
    for z in instruments:
        sub = ds.frame[[y_col, d_col, z]].dropna()
        w = wald_estimate(sub[y_col], sub[d_col], sub[z], B=B, seed=seed)
        wald_rows.append({"iv": z, "p_d": w.p_d, "p_z": w.p_z, "first_stage": w.first_stage,
                          "compliers_d1": w.compliers_given_treated, "compliers_d0": w.compliers_given_untreated,
                          "tau_wald": w.tau_hat, "se_wald": w.se_bootstrap})
    write_csv(pd.DataFrame(wald_rows, columns=WALD_COLUMNS), out / "wald.csv", WALD_COLUMNS)
    files.append("wald.csv")

    variables = _strings(est.get("balance_variables"), "[estimator] balance_variables")
    if not variables:
        skip = {y_col, d_col, *WALD_INSTRUMENTS, "sex_child1", "sex_child2", "person_id"}
        variables = [c for c in ds.frame.columns
                     if c not in skip and pd.api.types.is_numeric_dtype(ds.frame[c])]
    _check_columns(ds.frame, variables, "balance variables")
    tables = [balance_table(ds, z, [d_col, y_col, *variables]) for z in instruments]
    balance = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame()
    write_csv(balance, out / "balance.csv")
    files.append("balance.csv")

    sub_cfg = cfg["subsample"]
    if sub_cfg and kind == "tsls":
        by = sub_cfg.get("by")
        if not by:
            raise ConfigError("[subsample] needs 'by'")
        _check_columns(ds.frame, [by], "subsample")
        levels = sub_cfg.get("levels")
        rows = []
        for mid, spec in models.items():
            if not spec.instruments:
                continue
            for level, res in late_by_group(ds, spec, by, levels, **_ar_options(est)):
                row = _estimate_row(mid, spec, res, "2sls")
                rows.append({"by": by, "level": str(level), **row})
        cols = ["by", "level", *ESTIMATE_COLUMNS]
        write_csv(pd.DataFrame(rows, columns=cols), out / "subsample.csv", cols)
        files.append("subsample.csv")

    write_manifest(cfg, out, "iv", seed, files)
    return files


def read_csv_frame(frame: pd.DataFrame, cfg: dict):
    from .design import Dataset

    schema = cfg["schema"]
    pid = schema.get("person_id")
    return Dataset(frame, person_id=pid if pid in frame.columns else None)


# --------------------------------------------------------------------------
# did
# --------------------------------------------------------------------------


def cmd_did(cfg: dict) -> list[str]:
    est, model, schema = cfg["estimator"], cfg["model"], cfg["schema"]
    B = int(est.get("B", 1000))
    seed = _seed(est, "the block bootstrap") if B > 0 else est.get("seed")
    L, F = int(est.get("L", 3)), int(est.get("F", 5))
    if L < 1 or F < 0:
        raise ConfigError("need L >= 1 and F >= 0")
    out = _out_dir(cfg)
    frame = _read_input(cfg)
    pid, time = schema.get("person_id", "person_id"), schema.get("time", "age")
    parity = schema.get("parity", "parity" if "parity" in frame.columns else None)
    treatment = schema.get("treatment", None if parity else "treated")
    outcomes = _strings(model.get("outcomes", model.get("outcome", "employed")), "[model] outcomes")
    covariates = _strings(model.get("covariates", model.get("controls")), "[model] covariates")
    _check_columns(frame, [c for c in (pid, time, parity, treatment) if c] + outcomes + covariates, "panel schema")
    transitions = est.get("parity_transitions", [1])
    if parity is None and transitions != [1]:
        raise ConfigError("parity transitions beyond 1 need a parity column")
    refine_cov = _strings(est.get("refine_covariates", covariates), "[estimator] refine_covariates")
    outcome_lags = [int(x) for x in est.get("outcome_lags", [1])]
    refine_on = bool(est.get("refine", True))

    base = PanelDataset.from_frame(frame, pid, time, treatment=treatment, outcomes=outcomes,
                                   covariates=covariates, parity=parity)
    att_rows, diag_rows = [], []
    for k in transitions:
        panel = base.for_transition(int(k)) if parity else base
        sets0 = find_matched_sets(panel, L)
        if not sets0.pools:
            msg = f"parity transition {k}: no matched sets; no estimates written"
            log.warning(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            continue
        for outcome in outcomes:
            sets = sets0
            if refine_on:
                try:
                    sets = refine(sets0, panel, refine_cov, outcome=outcome, outcome_lags=outcome_lags)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
            if B > 0:
                res = att_with_ci(sets, panel, outcome, F, B=B, seed=seed, n_jobs=cfg.get("_threads", 1))
            else:
                res = att(sets, panel, outcome, F)
            for r in res.table.itertuples(index=False):
                att_rows.append({"outcome": outcome, "parity_transition": int(k), "lead": int(r.lead),
                                 "estimate": r.estimate, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
                                 "n_sets": r.n_sets, "kind": r.kind})
            diag = set_diagnostics(sets, panel)
            diag.insert(0, "parity_transition", int(k))
            diag.insert(0, "outcome", outcome)
            diag_rows.append(diag)
    write_csv(pd.DataFrame(att_rows, columns=ATT_COLUMNS), out / "att.csv", ATT_COLUMNS)
    diag = pd.concat(diag_rows, ignore_index=True) if diag_rows else pd.DataFrame(
        columns=["outcome", "parity_transition", "age", "n_treated", "n_controls"])
    write_csv(diag, out / "set_diagnostics.csv")
    files = ["att.csv", "set_diagnostics.csv"]
    write_manifest(cfg, out, "did", seed, files)
    return files


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _table_text(frame: pd.DataFrame) -> str:
    cells = [[str(c) for c in frame.columns]] + [[_fmt(v) for v in row] for row in
                                                  frame.itertuples(index=False, name=None)]
    widths = [max(len(r[j]) for r in cells) for j in range(len(cells[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def render_report(out: Path) -> str:
    """Plain-text summary of whatever result tables exist in ``out``."""
    sections = [("Effect estimates (OLS and 2SLS)", "estimates.csv"), ("Wald estimates", "wald.csv"),
                ("Subsample estimates", "subsample.csv"), ("Balance by instrument value", "balance.csv"),
                ("Dynamic effects (placebo and post-birth)", "att.csv"),
                ("Matched-set diagnostics", "set_diagnostics.csv"), ("Simulation truths", "oracle.csv")]
    parts = []
    for title, name in sections:
        path = out / name
        if not path.exists():
            continue
        frame = pd.read_csv(path, keep_default_na=False, na_values=["NA"], dtype=str).fillna("NA")
        body = _table_text(frame) if len(frame) else "(no rows)"
        parts.append(f"{title}\n{'=' * len(title)}\n{body}\n")
    if not parts:
        raise ConfigError(f"no result tables found in {out}")
    return "\n".join(parts)


def cmd_report(cfg: dict) -> list[str]:
    out = _out_dir(cfg)
    text = render_report(out)
    (out / "report.txt").write_bytes(text.encode("utf-8"))
    return ["report.txt"]


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

COMMANDS = {"simulate": cmd_simulate, "iv": cmd_iv, "did": cmd_did, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="bootstrap worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.config, args.seed, args.out)
        if args.out is not None:
            cfg["_cli_out"] = True
        cfg["_threads"] = max(1, args.threads)
        files = COMMANDS[args.command](cfg)
    except (ConfigError, DataError, UnknownInstrument) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NumericalError, IVMatchError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    log.info("%s wrote %s", args.command, ", ".join(files))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
