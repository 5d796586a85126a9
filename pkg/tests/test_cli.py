import csv
import json

import numpy as np
import pytest

from scfalab import artifacts, cli
from scfalab import config as cfgmod
from scfalab.errors import ConfigError

MINIMAL = {
    "model": {"kind": "logistic-regression"},
    "data": {"num_samples": 400, "feature_dim": 4},
    "partition": {"num_clients": 2},
    "training": {"rounds": 3, "batch_size": 64},
    "variants": [{"kind": "SCFA"}, {"kind": "FedAvg"}],
    "seeds": [0],
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_minimal_config(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", MINIMAL)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "rounds.csv")
    for v in ("SCFA", "FedAvg"):
        assert [r["round"] for r in table if r["variant"] == v] == ["1", "2", "3"]
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["config"]["training"]["learning_rate"] == 0.01  # defaults are resolved into the manifest
    assert [r["variant"] for r in man["runs"]] == ["SCFA", "FedAvg"]
    W = artifacts.read_model(tmp_path / "out" / "model.bin", 2)
    assert W.shape == (2, 5)


def test_manifest_replay_is_byte_identical(tmp_path):
    cfg = write(tmp_path / "c.json", {**MINIMAL, "privacy": {"enabled": True, "epsilon": 10}})
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()
    assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()


def test_missing_field_names_it(tmp_path, capsys):
    doc = {k: v for k, v in MINIMAL.items() if k != "seeds"}
    code = cli.main(["run", "--config", str(write(tmp_path / "c.json", doc)), "--out", str(tmp_path / "o")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code != 0 and err["error"] == "ConfigError" and err["path"] == "seeds"


@pytest.mark.parametrize("patch,path", [
    ({"training": {"rounds": -1}}, "training.rounds"),
    ({"variants": [{"kind": "FedAvg", "mu": 0.1}]}, "variants[0]"),
    ({"model": {"kind": "tree"}}, "model.kind"),
    ({"extra": 1}, "<root>"),
])
def test_schema_errors_carry_paths(patch, path):
    with pytest.raises(ConfigError) as exc:
        cfgmod.resolve({**MINIMAL, **patch})
    assert exc.value.path.startswith(path)


def test_seed_and_variant_overrides(tmp_path):
    cfg = write(tmp_path / "c.json", {**MINIMAL, "seeds": [0, 1, 2]})
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed-override", "7", "--variant", "FedProx"])
    table = rows(tmp_path / "o" / "rounds.csv")
    assert {(r["variant"], r["seed"]) for r in table} == {("FedProx", "7")}


def sweep_doc(**grid):
    base = {k: v for k, v in MINIMAL.items() if k not in ("seeds", "variants")}
    return {"sweep_id": "sw", "base": base, "grid": grid}


def test_sweep_cardinality_and_layout(tmp_path):
    sw = write(tmp_path / "s.json", sweep_doc(variant=["SCFA", "FedAvg"], seeds=[0, 1]))
    assert cli.main(["sweep", "--config", str(sw), "--out", str(tmp_path / "o")]) == 0
    root = tmp_path / "o" / "sw"
    cells = [p for p in root.iterdir() if p.is_dir()]
    assert len(cells) == 4
    for c in cells:
        assert sorted(p.name for p in c.iterdir()) == ["manifest.json", "model.bin", "rounds.csv"]
    summary = rows(root / "summary.csv")
    assert len(summary) == 4
    assert set(summary[0]) == set(artifacts.SUMMARY_COLUMNS)


def test_alpha_variant_seed_grid_is_30_cells():
    doc = sweep_doc(variant=["SCFA", "FedAvg"], alpha=[0.1, 1, 10], seeds=[0, 1, 2, 3, 4])
    cells = cli.expand({**doc, "base": {**doc["base"], "seeds": [0]}, "workers": 1})
    assert len(cells) == 30 and len({c["cell_id"] for c in cells}) == 30


def test_empty_axis_rejected(tmp_path):
    sw = write(tmp_path / "s.json", sweep_doc(variant=[], seeds=[0]))
    with pytest.raises(ConfigError, match="grid.variant"):
        cli.load_sweep(sw)
    assert cli.main(["sweep", "--config", str(sw), "--out", str(tmp_path / "o")]) == 2


def test_failed_cells_are_recorded_and_sweep_continues(tmp_path):
    doc = sweep_doc(target_rho=[0.0, 0.9], seeds=[0])
    doc["base"]["constraints"] = {"builder": {"per_family": 1}}
    sw = write(tmp_path / "s.json", doc)
    assert cli.main(["sweep", "--config", str(sw), "--out", str(tmp_path / "o")]) == 3
    meta = json.loads((tmp_path / "o" / "sw" / "sweep.json").read_text())
    assert len(meta["failures"]) == 1 and meta["failures"][0]["error"] == "CalibrationError"
    assert len(rows(tmp_path / "o" / "sw" / "summary.csv")) == len(meta["cells"]) - len(meta["failures"])


def test_worker_pool_matches_serial(tmp_path):
    doc = sweep_doc(variant=["SCFA", "FedAvg"], epsilon=[None, 10.0], seeds=[3])
    write(tmp_path / "s1.json", doc)
    write(tmp_path / "s2.json", {**doc, "workers": 2})
    cli.main(["sweep", "--config", str(tmp_path / "s1.json"), "--out", str(tmp_path / "serial")])
    cli.main(["sweep", "--config", str(tmp_path / "s2.json"), "--out", str(tmp_path / "pool")])
    a, b = tmp_path / "serial" / "sw", tmp_path / "pool" / "sw"
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    for cell in a.iterdir():
        if cell.is_dir():
            assert (cell / "rounds.csv").read_bytes() == (b / cell.name / "rounds.csv").read_bytes()
    private = [r for r in rows(a / "summary.csv") if r["epsilon"]]
    assert all(r["utility_loss"] != "" for r in private)


def test_fit_convergence_on_perfect_series(tmp_path):
    t = np.arange(1, 21)
    lines = ["variant,seed,round,grad_norm_sq,rho"]
    lines += [f"SCFA,0,{k},{float(2.14 / np.sqrt(k) + 0.38 * 0.05)!r},0.05" for k in t]
    (tmp_path / "rounds.csv").write_text("\n".join(lines) + "\n")
    assert cli.main(["fit", str(tmp_path), "--kind", "convergence", "--boot", "20"]) == 0
    rep = json.loads((tmp_path / "fit_convergence.json").read_text())
    fit = rep["fits"][0]["fit"]
    assert fit["r_squared"] == pytest.approx(1.0, abs=1e-9) and rep["input"].endswith("rounds.csv")


def test_fit_missing_column(tmp_path, capsys):
    (tmp_path / "rounds.csv").write_text("variant,seed,round,rho\nSCFA,0,1,0.1\n")
    assert cli.main(["fit", str(tmp_path), "--kind", "convergence"]) == 2
    assert "grad_norm_sq" in capsys.readouterr().err


def test_fit_violation_and_zones_on_sweep(tmp_path):
    doc = sweep_doc(target_rho=[0.0, 0.03, 0.06, 0.10, 0.15], seeds=[0])
    doc["base"]["constraints"] = {"builder": {"per_family": 25, "band": [0.05, 0.3]}}
    write(tmp_path / "s.json", doc)
    assert cli.main(["sweep", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 0
    root = tmp_path / "o" / "sw"
    cli.main(["fit", str(root), "--kind", "violation"])
    rep = json.loads((root / "fit_violation.json").read_text())
    assert "slope" in rep["fit"]["params"] and "r_squared" in rep["fit"]
    cell = next(p for p in root.iterdir() if p.is_dir())
    cli.main(["fit", str(cell), "--kind", "zones"])
    z = json.loads((cell / "fit_zones.json").read_text())
    assert sum(z["counts"].values()) == z["rows"] == len(rows(cell / "rounds.csv"))


def test_report_writes_figures_and_table(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {**MINIMAL, "training": {"rounds": 4, "batch_size": 64}})
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "run"), "--out", str(tmp_path / "figs")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "variant,seed,rounds_to_convergence,final_metric,mean_rho" and len(out) == 3
    names = {p.name for p in (tmp_path / "figs").iterdir()}
    assert {"metric_by_round.png", "grad_norm_sq_by_round.png", "rho_by_round.png", "report.csv"} <= names
