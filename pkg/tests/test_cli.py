import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ipclab import pipeline as pl
from ipclab.cli import main
from ipclab.config import load_config
from ipclab.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = ROOT / "configs" / "reference.json"
GOLDEN = Path(__file__).parent / "golden"


def digest(folder: Path) -> dict:
    return {p.relative_to(folder).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ref")
    assert main(["run", str(REFERENCE), "--out", str(out)]) == 0
    return out


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


def test_reference_run_completes(reference_run):
    man = json.loads((reference_run / "manifest.json").read_text())
    assert man["status"] == "ok"
    assert all(s["status"] == "ok" for s in man["stages"].values())
    assert man["config_sha256"] == load_config(REFERENCE).sha256()
    for art in man["artifacts"].values():
        p = reference_run / art["path"]
        assert hashlib.sha256(p.read_bytes()).hexdigest() == art["sha256"]
    coer = json.loads((reference_run / "coercivity.json").read_text())
    assert coer["I_infty"]["c_hat"] > 0


def test_report_matches_golden_tables(reference_run, tmp_path, capsys):
    assert main(["report", str(reference_run / "manifest.json"), "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["warnings"] == []
    for name, header in pl.TABLES.items():
        got, want = read_csv(tmp_path / name), read_csv(GOLDEN / name)
        assert got[0] == header == want[0]
        assert len(got) == len(want) > 1
        for g, w in zip(got[1:], want[1:]):
            assert g[:-1] == w[:-1]
            assert float(g[-1]) == pytest.approx(float(w[-1]), rel=1e-9)


def test_report_is_byte_identical_on_rerun(reference_run, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["report", str(reference_run / "manifest.json"), "--out", str(a)])
    main(["report", str(reference_run / "manifest.json"), "--out", str(b)])
    assert digest(a) == digest(b)


def test_report_on_empty_manifest(tmp_path, capsys):
    m = write(tmp_path, "manifest.json", {"artifacts": {}, "stages": {}})
    assert main(["report", str(m)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert len(res["warnings"]) == 3
    for name, header in pl.TABLES.items():
        assert read_csv(tmp_path / "report" / name) == [header]


def test_rerun_is_bitwise_identical(reference_run, tmp_path):
    assert main(["run", str(REFERENCE), "--out", str(tmp_path)]) == 0
    assert digest(tmp_path) == digest(reference_run)


def test_seed_override_changes_ensemble(reference_run, tmp_path):
    assert main(["run", str(REFERENCE), "--out", str(tmp_path), "--seed", "8"]) == 0
    a, b = digest(tmp_path), digest(reference_run)
    assert a["ensemble.bin"] != b["ensemble.bin"]


def test_threads_do_not_change_results(reference_run, tmp_path):
    assert main(["run", str(REFERENCE), "--out", str(tmp_path), "--threads", "3"]) == 0
    assert digest(tmp_path)["ensemble.bin"] == digest(reference_run)["ensemble.bin"]


def test_cubic_potential_halts_at_certificate(tmp_path, caplog):
    cfg = json.loads(REFERENCE.read_text())
    cfg["system"]["potential"] = {"family": "pure_power", "gamma": 3.0}
    out = tmp_path / "out"
    assert main(["run", str(write(tmp_path, "c.json", cfg)), "--out", str(out)]) == 4
    assert "certificate failed" in caplog.text
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "FAILED"
    assert man["stages"]["potentials"]["status"] == "FAILED"
    assert "gamma" in man["stages"]["potentials"]["message"]
    assert "simulate" not in man["stages"]
    assert (out / "potential.json").exists()


def test_malformed_json_exit_code(tmp_path, capsys):
    bad = write(tmp_path, "bad.json", '{"schema_version": 1,\n  "seed": }')
    assert main(["run", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


@pytest.mark.parametrize("patch", [
    {"sytem": {}},
    {"system": {"N": 3, "dtt": 0.1}},
    {"schema_version": 2},
    {"system": {"N": 2.5}},
    {"coercivity": {"space": {"kind": "wavelets"}}},
])
def test_strict_config(tmp_path, patch):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "c.json", patch))
    assert main(["run", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_pdtest_subcommand(capsys):
    k = json.dumps({"op": "exp", "arg": {"op": "inner"}})
    assert main(["pdtest", "--kernel", k, "--mode", "pd", "--d", "2", "--seed", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["verdict"] == "pd" and rep["seed"] == 1
    k = json.dumps({"op": "radial", "potential": {"family": "pure_power", "gamma": 1.5}})
    assert main(["pdtest", "--kernel", k, "--mode", "nd", "--d", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["verdict"] == "nd"


@pytest.mark.parametrize("spec", [
    {"op": "nope"}, {"op": "exp"}, {"op": "inner", "extra": 1}, [1, 2],
    {"op": "sum", "args": [{"op": "inner"}, {"op": "bogus"}]},
])
def test_kernel_spec_errors(spec):
    with pytest.raises(ConfigError):
        pl.kernel_from_dict(spec)


def test_kernel_spec_tree_evaluates():
    k = pl.kernel_from_dict({"op": "sum", "args": [
        {"op": "scale", "c": 2.0, "arg": {"op": "inner"}},
        {"op": "triangle", "x0": [0.0, 0.0], "arg": {"op": "shifted_sqdist", "a": 1.0}},
    ]})
    u, v = np.array([1.0, 2.0]), np.array([-0.5, 0.3])
    assert k(u, v) == pytest.approx(2 * u @ v + 1.0 + 2 * u @ v)


def test_subcommands_on_reference(reference_run, tmp_path, capsys):
    man = str(reference_run / "manifest.json")
    assert main(["learn", "--manifest", man, "--space", '{"kind": "hats", "n": 3}', "--config", str(REFERENCE),
                 "--out", str(tmp_path)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert len(res["coefficients"]) == 3 and res["l2_rho_error"] < 0.5
    assert main(["coercivity", "--source", "ensemble", "--manifest", man, "--T", "10",
                 "--space", '{"kind": "hats", "n": 2}', "--out", str(tmp_path)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["source"] == "ensemble" and res["c_hat"] > 0
    dens = str(reference_run / "stationary_density.json")
    assert main(["density", dens, dens]) == 0
    assert json.loads(capsys.readouterr().out)["l1_distance"] == pytest.approx(0.0, abs=1e-11)


def test_coercivity_argument_errors(tmp_path):
    assert main(["coercivity", "--space", '{"kind": "hats"}', "--source", "ensemble"]) == 2
    assert main(["coercivity", "--space", '{"kind": "hats"', "--config", str(REFERENCE)]) == 2
    m = write(tmp_path, "m.json", {"artifacts": {}})
    assert main(["coercivity", "--space", '{"kind": "hats"}', "--source", "ensemble", "--manifest", str(m),
                 "--T", "1"]) == 4


def test_simulate_subcommand(tmp_path, capsys):
    cfg = json.loads(REFERENCE.read_text())
    cfg["system"].update(n_paths=20, T=0.5)
    c = write(tmp_path, "c.json", cfg)
    assert main(["simulate", str(c), "--out", str(tmp_path), "--csv", "--layout", "full"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["shape"] == [20, 11, 3] and res["n_diverged"] == 0
    rows = read_csv(tmp_path / "ensemble.csv")
    assert rows[0] == ["path", "t", "x0", "x1", "x2"] and len(rows) == 1 + 20 * 11
    ens = pl.load_ensemble(tmp_path / "ensemble.json")
    assert ens.layout == "full" and ens.states.shape == (20, 11, 3)


def test_exit_code_mapping():
    from ipclab.errors import DomainError, NumericError, PreconditionError
    assert pl.exit_code(ConfigError("x")) == 2
    assert pl.exit_code(NumericError("x")) == 3
    assert pl.exit_code(PreconditionError("x")) == 4
    assert pl.exit_code(DomainError("x")) == 4
    with pytest.raises(KeyError):
        pl.exit_code(KeyError("x"))
