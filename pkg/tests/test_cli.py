import csv
import json

import jsonschema
import numpy as np
import pytest

from fairpoll import dataset, geo
from fairpoll.cli import EXIT_INPUT, EXIT_OK, main
from fairpoll.measure import REPORT_JSON_SCHEMA


@pytest.fixture(scope="module")
def state(tmp_path_factory):
    d = tmp_path_factory.mktemp("state")
    assert main(["synth", "--n-voters", "1000", "--n-sites", "8", "--seed", "1", "--out", str(d)]) == EXIT_OK
    return d


def io(state, out):
    return ["--voters", str(state / "voters.csv"), "--sites", str(state / "sites.csv"),
            "--assignment", str(state / "assignment.csv"), "--seed", "3", "--out", str(out)]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_measure_writes_schema_valid_reports(state, tmp_path):
    assert main(["measure", *io(state, tmp_path)]) == EXIT_OK
    for name in ("report_raw.csv", "report_normalized.csv", "report_worst_decile.csv"):
        assert len(read_csv(tmp_path / name)) > 1
    doc = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(doc, REPORT_JSON_SCHEMA)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and all("sha256" in r for r in manifest["inputs"])


def test_single_group_norm_load_is_one(state, tmp_path):
    rows = read_csv(state / "voters.csv")
    head = rows[0]
    gi = head.index("group")
    for r in rows[1:]:
        r[gi] = "A"
    vpath = tmp_path / "voters.csv"
    with open(vpath, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    out = tmp_path / "out"
    args = ["measure", "--voters", str(vpath), "--sites", str(state / "sites.csv"), "--seed", "0", "--out", str(out)]
    assert main(args) == EXIT_OK
    norm = read_csv(out / "report_normalized.csv")
    col = norm[0].index("norm_load")
    assert [float(r[col]) for r in norm[1:]] == [1.0] * (len(norm) - 1)


def test_empty_voter_file_exits_2(state, tmp_path, capsys):
    empty = tmp_path / "empty_voters.csv"
    empty.write_text("")
    args = ["measure", "--voters", str(empty), "--sites", str(state / "sites.csv"), "--seed", "0",
            "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_INPUT
    assert "empty_voters.csv" in capsys.readouterr().err


def test_dangling_site_exits_2(state, tmp_path, capsys):
    rows = read_csv(state / "assignment.csv")
    rows[1][1] = "NOPE"
    apath = tmp_path / "assignment.csv"
    with open(apath, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    args = ["measure", "--voters", str(state / "voters.csv"), "--sites", str(state / "sites.csv"),
            "--assignment", str(apath), "--seed", "0", "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_INPUT
    assert "NOPE" in capsys.readouterr().err


def test_plan_all_sites_is_nearest(state, tmp_path):
    args = ["plan", *io(state, tmp_path), "--k", "8", "--facility-policy", "sites-only", "--coreset-size", "100",
            "--trials", "3"]
    assert main(args) == EXIT_OK
    sites = dataset.load_sites(state / "sites.csv")
    polling = [s for s in sites if s.kind == "polling"]
    planned = read_csv(tmp_path / "planned_sites.csv")
    assert sorted(r[0] for r in planned[1:]) == sorted(s.id for s in polling)
    voters, _ = dataset.load_voters(state / "voters.csv")
    met = geo.haversine()
    pts = geo.points_array([v.location for v in voters])
    fac = geo.points_array([s.location for s in polling])
    near, _ = geo.nearest(pts, fac, met)
    got = dict((r[0], r[1]) for r in read_csv(tmp_path / "planned_assignment.csv")[1:])
    assert all(got[v.id] == polling[near[i]].id for i, v in enumerate(voters))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["rounding"]["opened"] == 8
    assert manifest["stages"]["lp"]["converged"]


def test_plan_balanced_and_sweep(state, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["--coreset-size", "80", "--trials", "2", "--k", "5", "--eps-cap", "0.5"]
    assert main(["plan", *io(state, a), *base]) == EXIT_OK
    manifest = json.loads((a / "manifest.json").read_text())
    bal = manifest["stages"]["balance"]
    assert bal["max_load"] <= bal["L"] and bal["max_inflation_ok"]
    assert main(["sweep", *io(state, b), "--chunks", "3"]) == EXIT_OK
    table = read_csv(b / "sweep_balanced.csv")
    assert table[0] == ["metric", "eps=0.1", "eps=0.5", "eps=0.9"]
    extra = [int(v) for v in table[1][1:]]
    assert extra == sorted(extra, reverse=True)
    assert len(read_csv(b / "sweep_kcenter.csv")) == 3


def test_compare(state, tmp_path):
    assert main(["compare", *io(state, tmp_path), "--against", str(state / "assignment.csv")]) == EXIT_OK
    assert len(read_csv(tmp_path / "compare.csv")) > 1


def test_theorems_pass(capsys):
    assert main(["theorems"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_same_seed_byte_identical(state, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["plan", *io(state, out), "--coreset-size", "80", "--trials", "2", "--k", "4"]) == EXIT_OK
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_missing_seed_is_usage_error(state, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["measure", "--voters", str(state / "voters.csv"), "--sites", str(state / "sites.csv"),
              "--out", str(tmp_path)])
    assert exc.value.code == 2
