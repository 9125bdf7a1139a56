import io
import json

import numpy as np
import pytest

from conftest import model_path, simulated
from plategm.io.cli import EXIT_MODEL, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, VERBS, run_command


def _csv(path, bm):
    t = bm.data
    lines = [",".join(t.columns)]
    for row, m in zip(t.values, t.mask):
        lines.append(",".join("?" if mm else repr(float(v)) for v, mm in zip(row, m)))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run_command(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def files(tmp_path):
    made = {}
    for name, n in [("coin", 20), ("mixture", 40), ("four_var_family", 30), ("m1", 30), ("ffnet", 10)]:
        bm, _ = simulated(name, n, seed=1)
        made[name] = _csv(tmp_path / f"{name}.csv", bm)
    (tmp_path / "symp.csv").write_text("Symp\n2\n")
    made["medical"] = str(tmp_path / "symp.csv")
    return made


def M(name):
    return str(model_path(name))


@pytest.mark.parametrize("verb", ["validate", "components", "cliques", "decompose", "schema"])
def test_structural_verbs_print_json(verb, files):
    code, out, _ = run(verb, "--model", M("four_var_family"), "--data", files["four_var_family"])
    assert code == EXIT_OK
    assert isinstance(json.loads(out), dict)


def test_evidence_prints_value(files):
    code, out, _ = run("evidence", "--model", M("coin"), "--data", files["coin"])
    assert code == EXIT_OK
    assert float(out) < 0


def test_bf_between_m2_and_m1(files):
    code, out, _ = run("bf", "--model", M("m2"), "--data", files["m1"], "--against", M("m1"))
    assert code == EXIT_OK
    assert np.isfinite(float(out))


def test_gibbs_rows_and_outputs(files, tmp_path):
    out = tmp_path / "g"
    code, text, _ = run(
        "gibbs", "--model", M("medical"), "--data", files["medical"],
        "--iters", "1000", "--burnin", "100", "--thin", "3", "--out", str(out),
    )
    assert code == EXIT_OK
    assert text.strip() == "300 rows"
    assert len((out / "trace.csv").read_text().splitlines()) == 301
    rep = json.loads((out / "report.json").read_text())
    assert rep["rows"] == 300
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "gibbs" and man["config"]["burnin"] == 100
    assert len(man["model_sha256"]) == 64


def test_gibbs_without_out_prints_csv(files):
    code, out, _ = run("gibbs", "--model", M("coin"), "--data", files["coin"], "--iters", "20", "--burnin", "0")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith("theta,") and len(lines) == 21


def test_em_json(files):
    code, out, _ = run("em", "--model", M("mixture"), "--data", files["mixture"], "--restarts", "2")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["converged"] and len(rep["parameters"]["mu"]) == 2


def test_structure_reports_enumeration(files, tmp_path):
    code, _, _ = run(
        "structure", "--model", M("four_var_family"), "--data", files["four_var_family"],
        "--iters", "200", "--out", str(tmp_path / "s"),
    )
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert sum(rep["enumerated"].values()) == pytest.approx(1.0)
    assert rep["rows"] == 180


def test_gradcheck(files):
    code, out, _ = run("gradcheck", "--model", M("ffnet"), "--data", files["ffnet"])
    assert code == EXIT_OK
    assert json.loads(out)["passed"]


def test_gradcheck_failure_is_numeric(files):
    code, _, _ = run("gradcheck", "--model", M("ffnet"), "--data", files["ffnet"], "--tol", "1e-30")
    assert code == EXIT_NUMERIC


def test_predict_coin(files, tmp_path):
    data = tmp_path / "five.csv"
    data.write_text("heads\n1\n1\n1\n0\n0\n")
    q = tmp_path / "q.csv"
    q.write_text("heads\n1\n?\n")
    code, out, _ = run("predict", "--model", M("coin"), "--data", str(data), "--query", str(q))
    assert code == EXIT_OK
    rows = json.loads(out)["rows"]
    assert np.exp(rows[0]["log_density"]) == pytest.approx(4 / 7)
    assert rows[1]["log_density"] == pytest.approx(0.0, abs=1e-12)
    assert rows[1]["missing"]["heads"]["1"] == pytest.approx(4 / 7)


def test_manifest_is_deterministic(files, tmp_path):
    out = tmp_path / "d"
    argv = ["gibbs", "--model", M("coin"), "--data", files["coin"], "--iters", "50", "--seed", "3", "--out", str(out)]
    run(*argv)
    first = {p: (out / p).read_text() for p in ("report.json", "manifest.json", "trace.csv")}
    run(*argv)
    assert first == {p: (out / p).read_text() for p in first}


@pytest.mark.parametrize(
    "argv,code",
    [
        (["nonsense", "--model", "x"], EXIT_USAGE),
        (["evidence"], EXIT_USAGE),
        (["evidence", "--model", "/nonexistent.gm"], EXIT_USAGE),
        (["gibbs", "--model", "MEDICAL", "--iters", "10", "--burnin", "20"], EXIT_USAGE),
        (["bf", "--model", "COIN"], EXIT_USAGE),
        (["predict", "--model", "COIN"], EXIT_USAGE),
        (["evidence", "--model", "MIXTURE"], EXIT_MODEL),
        (["em", "--model", "FFNET"], EXIT_MODEL),
    ],
)
def test_exit_codes(argv, code, files):
    subst = {"MEDICAL": M("medical"), "COIN": M("coin"), "MIXTURE": M("mixture"), "FFNET": M("ffnet")}
    data = {"MEDICAL": files["medical"], "COIN": files["coin"], "MIXTURE": files["mixture"], "FFNET": files["ffnet"]}
    args = [subst.get(a, a) for a in argv]
    key = next((a for a in argv if a in data), None)
    if key:
        args += ["--data", data[key]]
    got, _, err = run(*args)
    assert got == code
    assert err.startswith("gm: ")


def test_missing_column_is_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("tails\n1\n")
    code, _, err = run("evidence", "--model", M("coin"), "--data", str(bad))
    assert code == EXIT_MODEL
    assert "heads" in err


def test_bad_model_text(tmp_path):
    m = tmp_path / "m.gm"
    m.write_text("theta ~ Beta(1,\n")
    assert run("validate", "--model", str(m))[0] == EXIT_MODEL


def test_every_verb_is_dispatched():
    assert len(VERBS) == 12
