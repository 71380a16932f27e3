import json

import pandas as pd
import pytest

from ivmatch.cli import config_hash, load_config, main

# small simulated samples give noisy first stages for the boys/girls splits
pytestmark = pytest.mark.filterwarnings("ignore::ivmatch.errors.ComplianceWarning")

SIM = """
[simulate]
kind = "census"
n = {n}
seed = 5
[output]
dir = "{out}"
"""

IV = """
[input]
path = "{data}"
[schema]
categoricals = ["age_band", "education", "region"]
[model]
controls = ["age_band", "education", "rural", "married"]
{extra}
[estimator]
kind = "tsls"
B = 30
seed = 1
[output]
dir = "{out}"
"""

PSIM = """
[simulate]
kind = "panel"
n = 600
seed = 2
T = 12
[output]
dir = "{out}"
"""

DID = """
[input]
path = "{data}"
[model]
outcomes = ["employed"]
covariates = ["birth_year", "graduated", "partnered", "urban"]
[estimator]
B = 10
seed = 1
[output]
dir = "{out}"
"""


def write(tmp_path, name, text, **kw):
    path = tmp_path / name
    path.write_text(text.format(**kw), encoding="utf-8")
    return str(path)


def run(*args):
    return main(list(args))


def pipeline(root, n=4000):
    root.mkdir()
    assert run("simulate", "--config", write(root, "sim.toml", SIM, n=n, out="c")) == 0
    assert run("iv", "--config", write(root, "iv.toml", IV, data="c/census.csv", out="iv", extra="")) == 0
    assert run("simulate", "--config", write(root, "psim.toml", PSIM, out="p")) == 0
    assert run("did", "--config", write(root, "did.toml", DID, data="p/panel.csv", out="did")) == 0
    assert run("report", "--config", write(root, "rep.toml", '[output]\ndir = "iv"\n')) == 0
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.suffix in (".csv", ".txt")}


def test_pipeline_is_byte_identical_on_rerun(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    assert set(a) == set(b) and "did/att.csv" in a and "iv/report.txt" in a
    for name in a:
        assert a[name] == b[name], name


def test_iv_outputs(tmp_path):
    pipeline(tmp_path / "r")
    est = pd.read_csv(tmp_path / "r/iv/estimates.csv")
    assert list(est.model_id) == ["ols", "samesex", "boys_girls", "multibirth"]
    assert est.loc[est.model_id == "ols", "weak_F"].isna().all()
    assert est.loc[est.model_id == "boys_girls", "sargan"].notna().all()
    assert est.loc[est.model_id == "samesex", "sargan"].isna().all()
    wald = pd.read_csv(tmp_path / "r/iv/wald.csv")
    assert set(wald.iv) == {"z_samesex", "z_boys", "z_girls", "multibirth"}
    att = pd.read_csv(tmp_path / "r/did/att.csv")
    assert list(att.columns) == ["outcome", "parity_transition", "lead", "estimate", "ci_lo", "ci_hi", "n_sets", "kind"]
    assert set(att.kind) == {"placebo", "effect"}
    manifest = json.loads((tmp_path / "r/did/manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["outputs"] == ["att.csv", "set_diagnostics.csv"]
    text = (tmp_path / "r/iv/report.txt").read_text()
    assert "Effect estimates" in text and "\r" not in text


def test_csv_conventions(tmp_path):
    pipeline(tmp_path / "r")
    raw = (tmp_path / "r/iv/estimates.csv").read_bytes()
    assert b"\r\n" not in raw and raw.endswith(b"\n")
    assert b"NA" in raw and b"nan" not in raw
    for line in raw.decode().splitlines()[1:]:
        for cell in line.split(","):
            if "." in cell and "e" not in cell:
                assert len(cell.lstrip("-").replace(".", "").lstrip("0")) <= 6


def test_sargan_only_for_overidentified_custom_model(tmp_path):
    assert run("simulate", "--config", write(tmp_path, "sim.toml", SIM, n=3000, out="c")) == 0
    extra = 'instruments = ["z_samesex", "multibirth"]\ncontrols = ["sex_child1", "sex_child2"]'
    cfg = write(tmp_path, "iv.toml", IV.replace('controls = ["age_band", "education", "rural", "married"]\n', ""),
                data="c/census.csv", out="iv", extra=extra)
    assert run("iv", "--config", cfg) == 0
    est = pd.read_csv(tmp_path / "iv/estimates.csv")
    assert list(est.model_id) == ["ols", "tsls"]
    assert est.sargan.notna().tolist() == [False, True]


def test_config_errors_exit_2(tmp_path):
    assert run("simulate", "--config", write(tmp_path, "bad.toml", SIM, n=0, out="x")) == 2
    assert run("simulate", "--config", str(tmp_path / "missing.toml")) == 2
    assert run("simulate", "--config", write(tmp_path, "junk.toml", "[simulate\n")) == 2
    assert run("simulate", "--config", write(tmp_path, "sec.toml", "[nope]\n")) == 2
    noseed = write(tmp_path, "noseed.toml", '[simulate]\nkind = "census"\nn = 2000\n[output]\ndir = "x"\n')
    assert run("simulate", "--config", noseed) == 2
    assert run("simulate", "--config", noseed, "--seed", "3") == 0
    assert run("bogus", "--config", noseed) == 2


def test_empty_instrument_list_exits_2(tmp_path):
    assert run("simulate", "--config", write(tmp_path, "sim.toml", SIM, n=2000, out="c")) == 0
    cfg = write(tmp_path, "iv.toml", IV, data="c/census.csv", out="iv", extra="instruments = []")
    assert run("iv", "--config", cfg) == 2


def test_missing_columns_exit_2(tmp_path, caplog):
    (tmp_path / "d.csv").write_text("employed,more_than_2,sex_child1,sex_child2\n1,0,1,1\n0,1,0,1\n")
    cfg = write(tmp_path, "iv.toml", IV, data="d.csv", out="iv", extra="")
    assert run("iv", "--config", cfg) == 2
    assert "age_band" in caplog.text


def test_degenerate_instrument_exits_3(tmp_path):
    rows = "employed,more_than_2,sex_child1,sex_child2,multibirth\n" + "".join(
        f"{i % 2},{(i // 2) % 2},1,1,0\n" for i in range(40))
    (tmp_path / "d.csv").write_text(rows)
    cfg = write(tmp_path, "iv.toml", IV.replace('categoricals = ["age_band", "education", "region"]', "")
                .replace('controls = ["age_band", "education", "rural", "married"]', "controls = []"),
                data="d.csv", out="iv", extra='models = ["ols", "samesex"]')
    assert run("iv", "--config", cfg) == 3


def test_no_matched_sets_gives_empty_table(tmp_path):
    frame = pd.DataFrame([{"person_id": p, "age": a, "treated": float(a >= 24), "employed": 0.5,
                           "partnered": 0.0} for p in range(4) for a in range(20, 30)])
    frame.to_csv(tmp_path / "p.csv", index=False)
    cfg = write(tmp_path, "did.toml", DID.replace('"birth_year", "graduated", "partnered", "urban"', '"partnered"'),
                data="p.csv", out="did")
    with pytest.warns(RuntimeWarning):
        assert run("did", "--config", cfg) == 0
    att = (tmp_path / "did/att.csv").read_text()
    assert att == "outcome,parity_transition,lead,estimate,ci_lo,ci_hi,n_sets,kind\n"


def test_calibration_failure_exits_3(tmp_path):
    assert run("simulate", "--config", write(tmp_path, "tiny.toml", SIM, n=10, out="x")) == 3


def test_config_hash_tracks_content(tmp_path):
    a = load_config(write(tmp_path, "a.toml", SIM, n=10, out="x"))
    b = load_config(write(tmp_path, "b.toml", SIM, n=10, out="x"))
    c = load_config(write(tmp_path, "c.toml", SIM, n=11, out="x"))
    assert config_hash(a) == config_hash(b) != config_hash(c)
    assert config_hash(load_config(tmp_path / "a.toml", seed=9)) != config_hash(a)


def test_seed_override_changes_outputs(tmp_path):
    cfg = write(tmp_path, "sim.toml", SIM, n=200, out="x")
    assert run("simulate", "--config", cfg, "--out", str(tmp_path / "s1")) == 0
    assert run("simulate", "--config", cfg, "--out", str(tmp_path / "s2"), "--seed", "6") == 0
    assert (tmp_path / "s1/census.csv").read_bytes() != (tmp_path / "s2/census.csv").read_bytes()
    assert json.loads((tmp_path / "s2/manifest.json").read_text())["seed"] == 6
