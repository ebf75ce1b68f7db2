import csv
import json
import subprocess
import sys

import pytest

from quasiu.cli import main

FOUR = "sex=F,M;school=Pu,Pr"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """A small four-group cohort written by the simulate subcommand."""
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--case", "B", "--rho1", "0.2", "--rho2", "0.6", "--scheme", FOUR,
                 "--n-per-group", "30", "--years", "2", "--subjects", "4", "--seed", "9",
                 "--out", str(out)]) == 0
    return out


def run_test_cmd(cohort, out, *extra):
    return main(["test", "--students", str(cohort / "students.csv"), "--grades", str(cohort / "grades.csv"),
                 "--replicates", "99", "--chibar-draws", "20000", "--seed", "3", "--out", str(out), *extra])


# ---------------------------------------------------------------- describe

def test_describe_tables(cohort, tmp_path):
    assert main(["describe", "--students", str(cohort / "students.csv"),
                 "--grades", str(cohort / "grades.csv"), "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "describe.json").read_text())
    assert len(d["concordance"]) == 6 and d["gpa_available"]
    assert d["counts"] == {"2000": dict.fromkeys(["F-Pu", "F-Pr", "M-Pu", "M-Pr"], 30),
                           "2001": dict.fromkeys(["F-Pu", "F-Pr", "M-Pu", "M-Pr"], 30)}
    for t in d["concordance"]:
        assert t["C1"] + t["C2"] + t["D1"] + t["D2"] == pytest.approx(1.0)
    counts = read_csv(tmp_path / "counts.csv")
    assert sum(int(r["n"]) for r in counts) == 240
    assert len(read_csv(tmp_path / "concordance.csv")) == 6


def test_describe_without_gpa(cohort, tmp_path):
    rows = read_csv(cohort / "students.csv")
    path = tmp_path / "s.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({**r, "gpa": ""} for r in rows)
    assert main(["describe", "--students", str(path), "--grades", str(cohort / "grades.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    d = json.loads((tmp_path / "o" / "describe.json").read_text())
    assert not d["gpa_available"]
    assert all(t["available"] is False for t in d["concordance"])


# -------------------------------------------------------------------- test

def test_test_outputs_and_determinism(cohort, tmp_path):
    assert run_test_cmd(cohort, tmp_path / "a") == 0
    assert run_test_cmd(cohort, tmp_path / "b", "--threads", "3") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(["report.json", "cells.csv", *(f"hist_B{p}.csv" for p in
                                                          ("12", "13", "14", "23", "24", "34")),
                            "hist_L_h01.csv", "hist_L_h02.csv", "hist_L_h03.csv"])
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert [t["contrast"] for t in rep["tests"]] == ["h01", "h02", "h03"]
    assert "threads" not in rep["config"]
    for t in rep["tests"]:
        assert 0 < t["p_value"] <= 1


def test_report_config_reruns_identically(cohort, tmp_path):
    assert run_test_cmd(cohort, tmp_path / "a", "--dump-replicates") == 0
    assert main(["test", "--config", str(tmp_path / "a" / "report.json"), "--out", str(tmp_path / "b")]) == 0
    for n in ("report.json", "replicates.csv"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    lines = (tmp_path / "a" / "replicates.csv").read_text().splitlines()
    assert len(lines) == 100 and lines[0].startswith("replicate,B12")


def test_zero_one_sided_statistic_has_p_one(cohort, tmp_path):
    # orient h02 so that the observed T is <= 0; the one-sided statistic is then 0
    assert run_test_cmd(cohort, tmp_path / "a", "--contrast", "h02") == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    T = rep["tests"][0]["T"][0]
    sign = -1 if T > 0 else 1
    cfile = tmp_path / "neg.json"
    cfile.write_text(json.dumps({"name": "flip", "matrix": [[sign, 0, 0, 0, 0, sign]],
                                 "sidedness": "one-sided"}))
    assert run_test_cmd(cohort, tmp_path / "b", "--contrast", str(cfile)) == 0
    t = json.loads((tmp_path / "b" / "report.json").read_text())["tests"][0]
    assert t["statistic"] == 0 and t["p_value"] == 1.0 and t["p_chibar"] == 1.0


# ---------------------------------------------------------------- simulate

def test_simulate_byte_identical_and_null_contrast(tmp_path):
    args = ["simulate", "--case", "A", "--rho", "0.5", "--mu", "0.6", "--n-per-group", "10",
            "--subjects", "2", "--seed", "2", "--hypothesis", "H0"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for n in ("students.csv", "grades.csv", "theta.csv", "simulate.json"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    theta = {r["hypothesis"]: r for r in read_csv(tmp_path / "a" / "theta.csv")}
    assert float(theta["H0"]["contrast"]) == 0
    assert float(theta["H1"]["contrast"]) > 0


def test_simulate_grid(tmp_path):
    assert main(["simulate", "--case", "A", "--rho", "0.3", "--mu-star", "0.5", "--n-per-group", "4",
                 "--subjects", "1", "--grid", "A", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "grid.csv")
    assert len(rows) == 90 and all(float(r["contrast_H1"]) > 0 for r in rows)
    assert json.loads((tmp_path / "simulate.json").read_text())["grid"]["passed"] is True


def test_simulate_model_file(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"case": "B", "rho1": 0.1, "rho2": 0.5}))
    assert main(["simulate", "--model", str(tmp_path / "m.json"), "--n-per-group", "5", "--subjects", "1",
                 "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "simulate.json").read_text())["config"]["model"]["rho2"] == 0.5


# -------------------------------------------------------------- exit codes

def test_exit_code_data_error(cohort, tmp_path, capsys):
    bad = tmp_path / "g.csv"
    bad.write_text((cohort / "grades.csv").read_text() + "nobody,S01,5.0\n")
    assert main(["describe", "--students", str(cohort / "students.csv"), "--grades", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert "orphan" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["test", "--students", "nope.csv", "--grades", "nope.csv"],
    ["test", "--bogus-flag"],
    ["simulate", "--n-per-group", "5"],
    ["describe", "--scheme", "sex"],
])
def test_exit_code_config_error(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == 3


def test_exit_code_too_few_replicates(cohort, tmp_path):
    assert main(["test", "--students", str(cohort / "students.csv"), "--grades", str(cohort / "grades.csv"),
                 "--replicates", "0", "--out", str(tmp_path)]) == 3


def test_exit_code_degenerate(tmp_path):
    # stratifying by the group factor makes every permutation the identity, so all
    # replicates equal the nonzero observed B and the covariance has rank 0
    s = tmp_path / "s.csv"
    g = tmp_path / "g.csv"
    srows = ["student_id,entry_year,group,ees,gpa"]
    grows = ["student_id,subject_id,grade"]
    vals = {"1": [(600, 8), (500, 6), (550, 7)], "2": [(600, 5), (500, 9), (550, 6)]}
    for grp, pts in vals.items():
        for i, (e, y) in enumerate(pts):
            sid = f"{grp}-{i}"
            srows.append(f"{sid},2000,{grp},{e},")
            grows.append(f"{sid},L,{y}")
    s.write_text("\n".join(srows) + "\n")
    g.write_text("\n".join(grows) + "\n")
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"name": "b12", "matrix": [[1]], "sidedness": "two-sided"}))
    assert main(["test", "--students", str(s), "--grades", str(g), "--scheme", "group=1,2",
                 "--contrast", str(c), "--strata", "group", "--replicates", "20", "--out", str(tmp_path / "o")]) == 4


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "quasiu.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "quasiu" in r.stdout


def test_histogram_handles_ulp_wide_range():
    from quasiu.pipeline import histogram_rows
    rows = histogram_rows([2 / 3] * 5, 2 / 3 + 1e-16)
    assert len(rows) == 40 and sum(r[2] for r in rows) == 5
