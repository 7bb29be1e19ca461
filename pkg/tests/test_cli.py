import json
import subprocess
import sys

import pytest

from fedlocal.cli import canonical_hash, expand_cells, main


def _spec(tmp_path, **over):
    spec = {
        "problem": {"kind": "quadratic", "p": 4, "d": 2, "knob": 1.0, "seed": 0},
        "run": {"algorithm": "LFSGD", "E": 2, "K": 2, "T": 40, "B": 1,
                "lr": {"kind": "constant", "eta": 0.05}},
        "seeds": [0, 1, 2],
        "output_dir": str(tmp_path / "out"),
    }
    spec.update(over)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return spec, path


def test_sweep_emits_all_cells(tmp_path, capsys):
    spec, path = _spec(tmp_path, sweep={"parameter": "E", "values": [1, 2, 4, 8]})
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out"
    assert len(list(out.glob("*.csv"))) == 12
    manifests = list(out.glob("manifest-*.json"))
    assert len(manifests) == 1
    m = json.loads(manifests[0].read_text())
    assert len(m["runs"]) == 12
    assert sorted({r["config"]["run"]["E"] for r in m["runs"]}) == [1, 2, 4, 8]
    assert all("report" in r["condition"] for r in m["runs"])
    header = (out / m["runs"][0]["trajectory"]).read_text().splitlines()[0]
    assert header == "t,f_bar,subopt,grad_norm_sq,consensus,diversity,eta"


def test_rerun_is_cache_hit(tmp_path, capsys):
    _, path = _spec(tmp_path)
    assert main(["run", str(path)]) == 0
    csvs = {p: p.stat().st_mtime_ns for p in (tmp_path / "out").glob("*.csv")}
    capsys.readouterr()
    assert main(["run", str(path)]) == 0
    assert "cache hit" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in (tmp_path / "out").glob("*.csv")} == csvs


def test_k_above_p_exits_two(tmp_path, capsys):
    spec, path = _spec(tmp_path)
    spec["run"]["K"] = 9
    path.write_text(json.dumps(spec))
    assert main(["run", str(path)]) == 2
    assert "K <= p" in capsys.readouterr().err


@pytest.mark.parametrize(
    "sweep",
    [{"parameter": "E", "values": [0]}, {"parameter": "zeta", "values": [1.0]},
     {"parameter": "eta", "values": [float("inf")]}, {"parameter": "lr", "values": [1]},
     {"parameter": "K", "values": [5]}],
)
def test_invalid_sweeps_exit_two(tmp_path, sweep):
    _, path = _spec(tmp_path, sweep=sweep)
    assert main(["run", str(path)]) == 2


def test_divergence_is_flagged_not_failed(tmp_path):
    spec, path = _spec(tmp_path)
    spec["run"] = {"algorithm": "LFGD", "E": 2, "T": 400, "lr": {"kind": "constant", "eta": 5.0}}
    spec["seeds"] = [0]
    path.write_text(json.dumps(spec))
    assert main(["run", str(path)]) == 0
    m = json.loads(next((tmp_path / "out").glob("manifest-*.json")).read_text())
    assert m["runs"][0]["diverged"]


def test_manifest_reproduces_runs(tmp_path):
    from fedlocal import run
    from fedlocal.cli import build_cell

    _, path = _spec(tmp_path)
    main(["run", str(path)])
    m = json.loads(next((tmp_path / "out").glob("manifest-*.json")).read_text())
    for entry in m["runs"]:
        assert canonical_hash(entry["config"]) == entry["hash"]
        prob, cfg = build_cell(entry["config"])
        assert run(prob, cfg).to_csv() == (tmp_path / "out" / entry["trajectory"]).read_text()


def test_parallel_matches_serial(tmp_path):
    spec, path = _spec(tmp_path)
    main(["run", str(path)])
    serial = {p.name: p.read_text() for p in (tmp_path / "out").glob("*.csv")}
    spec["output_dir"] = str(tmp_path / "par")
    path.write_text(json.dumps(spec))
    assert main(["run", str(path), "--workers", "2"]) == 0
    assert {p.name: p.read_text() for p in (tmp_path / "par").glob("*.csv")} == serial


def test_nfsgd_zeta_sweep(tmp_path):
    spec, path = _spec(tmp_path, sweep={"parameter": "zeta", "values": [0.0, 0.5]})
    spec["run"] = {"algorithm": "NFSGD", "E": 2, "T": 20, "B": 1,
                   "lr": {"kind": "constant", "eta": 0.05}, "topology": {"kind": "ring"}}
    spec["seeds"] = [0]
    path.write_text(json.dumps(spec))
    assert main(["run", str(path)]) == 0
    m = json.loads(next((tmp_path / "out").glob("manifest-*.json")).read_text())
    assert [r["condition"]["theorem"] for r in m["runs"]] == ["nfsgd", "nfsgd"]


def test_knob_and_eta_sweeps_resolve():
    spec = {"problem": {"kind": "quadratic", "p": 2}, "run": {"algorithm": "LFGD", "E": 1, "T": 5,
            "lr": {"kind": "constant", "eta": 0.1}}, "seeds": [3]}
    cells = expand_cells({**spec, "sweep": {"parameter": "knob", "values": [0.0, 2.0]}})
    assert [c["problem"]["knob"] for c in cells] == [0.0, 2.0]
    cells = expand_cells({**spec, "sweep": {"parameter": "eta", "values": [0.2]}})
    assert cells[0]["run"]["lr"] == {"kind": "constant", "eta": 0.2}


def _check(capsys, *args):
    code = main(["check", *args])
    return code, capsys.readouterr()


def test_check_lfgd_boundary(capsys):
    code, out = _check(capsys, "--theorem", "lfgd", "--eta", "0.2", "--E", "1", "--L", "1", "--mu", "1", "--lam", "1")
    assert code == 0
    rep = json.loads(out.out)
    assert rep["satisfied"] and rep["max_eta"] == pytest.approx(0.2, rel=1e-9)
    code, _ = _check(capsys, "--theorem", "lfgd", "--eta", "0.21", "--E", "1", "--L", "1", "--mu", "1", "--lam", "1")
    assert code == 1


def test_check_missing_constant(capsys):
    code, out = _check(capsys, "--theorem", "nfsgd", "--eta", "0.1", "--E", "2", "--p", "4", "--L", "1",
                       "--lam", "1", "--C1", "0")
    assert code == 2
    assert "--zeta" in out.err


def test_check_json_params(capsys):
    params = json.dumps({"alpha": 1.0, "E": 4, "K": 4, "lam": 1.0, "kappa": 2.0})
    code, out = _check(capsys, "--theorem", "lfsgd-pl", "--params", params)
    assert code == 0 and json.loads(out.out)["min_E"] == 2


def test_check_domain_error_exit_two(capsys):
    code, _ = _check(capsys, "--theorem", "lfgd", "--eta", "2", "--E", "1", "--L", "1", "--mu", "1", "--lam", "1")
    assert code == 2


def test_topology_command(tmp_path, capsys):
    assert main(["topology", "--kind", "ring", "--p", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["zeta"] == pytest.approx(0.5)
    dump = tmp_path / "w.csv"
    assert main(["topology", "--kind", "complete", "--p", "3", "--dump", str(dump)]) == 0
    assert len(dump.read_text().splitlines()) == 3
    assert main(["topology", "--kind", "ring", "--p", "4", "--self-weight", "0"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fedlocal", "check", "--theorem", "lfsgd", "--eta", "0.01",
                          "--E", "3", "--K", "2", "--L", "1", "--lam", "1", "--C1", "0"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["satisfied"]
