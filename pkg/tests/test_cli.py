import json

import pytest

import degenpop.cli as cli
from degenpop.control import ControlError

TINY = {
    "model": {
        "T": 1.0, "A": 2.0, "a_bar": 0.5, "delta": 1.25,
        "k": {"form": "power", "alpha0": 0.5, "alpha1": 0.5},
        "beta": {"form": "window", "height": 3.0, "lo": 0.5, "ramp": 0.25},
        "mu": {"form": "constant", "value": 0.2},
        "omega": [0.3, 0.7],
    },
    "grid": {"Nt": 8, "Na": 16, "Nx": 10},
    "hum": {"epsilon": 1e-4, "cg_max_iter": 200},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


class TestParsing:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            cli.main([])

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            cli.main(["transmogrify"])

    def test_config_and_preset_exclusive(self, tiny_config):
        # argparse only flags the conflict when --preset carries a
        # non-default value
        with pytest.raises(SystemExit):
            cli.main(["validate", "--config", str(tiny_config),
                      "--preset", "tirathaba_28C"])

    def test_out_required_for_simulate(self, tiny_config):
        with pytest.raises(SystemExit):
            cli.main(["simulate", "--config", str(tiny_config)])


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert cli.main(["validate", "--config",
                         str(tmp_path / "absent.json")]) == 2

    def test_bad_config(self, tmp_path):
        cfg = json.loads(json.dumps(TINY))
        del cfg["model"]["delta"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["validate", "--config", str(path)]) == 2

    def test_invalid_sweep(self, tiny_config, tmp_path):
        assert cli.main(["carleman-audit", "--config", str(tiny_config),
                         "--out", str(tmp_path / "o"),
                         "--s-sweep", "1.0,abc"]) == 2
        assert cli.main(["carleman-audit", "--config", str(tiny_config),
                         "--out", str(tmp_path / "o"),
                         "--s-sweep", "-2.0"]) == 2

    def test_numerical_failure_maps_to_3(self, tiny_config, tmp_path,
                                         monkeypatch):
        def boom(spec, config):
            raise ControlError("synthetic breakdown")
        monkeypatch.setattr(cli, "hum_control", boom)
        assert cli.main(["hum", "--config", str(tiny_config),
                         "--out", str(tmp_path / "o")]) == 3


class TestCommands:
    def test_validate_prints_report(self, tiny_config, capsys):
        assert cli.main(["validate", "--config", str(tiny_config)]) == 0
        out = capsys.readouterr().out
        assert "[ok]" in out

    def test_validate_writes_report(self, tiny_config, tmp_path):
        out = tmp_path / "v"
        assert cli.main(["validate", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        assert (out / "hypotheses.txt").exists()

    def test_simulate(self, tiny_config, tmp_path):
        out = tmp_path / "sim"
        assert cli.main(["simulate", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        assert (out / "energy.csv").exists()
        assert (out / "final_state.csv").exists()

    def test_adjoint(self, tiny_config, tmp_path):
        out = tmp_path / "adj"
        assert cli.main(["adjoint", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        assert (out / "adjoint_energy.csv").exists()
        assert (out / "adjoint_initial_state.csv").exists()

    def test_hardy_audit(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "hardy"
        assert cli.main(["hardy-audit", "--config", str(tiny_config),
                         "--out", str(out), "--count", "6"]) == 0
        assert "empirical constant" in capsys.readouterr().out
        assert list(out.glob("hardy*.csv"))

    def test_carleman_audit(self, tiny_config, tmp_path):
        out = tmp_path / "carleman"
        assert cli.main(["carleman-audit", "--config", str(tiny_config),
                         "--out", str(out), "--count", "2",
                         "--s-sweep", "0.05,0.2"]) == 0
        assert list(out.glob("carleman*.csv"))
        assert list(out.glob("carleman*.json"))

    def test_caccioppoli_audit(self, tiny_config, tmp_path):
        out = tmp_path / "cacc"
        assert cli.main(["caccioppoli-audit", "--config", str(tiny_config),
                         "--out", str(out), "--count", "2",
                         "--s-sweep", "1.0"]) == 0
        assert list(out.glob("caccioppoli*.csv"))

    def test_observability(self, tiny_config, tmp_path):
        out = tmp_path / "obs"
        assert cli.main(["observability", "--config", str(tiny_config),
                         "--out", str(out), "--count", "3"]) == 0
        assert (out / "observability.csv").exists()

    def test_hum(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "hum"
        assert cli.main(["hum", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        assert "CG iterations" in capsys.readouterr().out
        assert (out / "control_cg.csv").exists()
        assert (out / "control_summary.json").exists()

    def test_hum_epsilon_override(self, tiny_config, tmp_path):
        out = tmp_path / "hum_eps"
        assert cli.main(["hum", "--config", str(tiny_config),
                         "--out", str(out), "--epsilon", "1e-3"]) == 0
        payload = json.loads((out / "control_summary.json").read_text())
        assert payload["epsilon"] == 1e-3

    def test_glue(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "glue"
        code = cli.main(["glue", "--config", str(tiny_config),
                         "--out", str(out),
                         "--alpha-bar", "0.2", "--beta-bar", "0.8"])
        assert code == 0
        assert "glued control" in capsys.readouterr().out
        assert (out / "glue_summary.json").exists()
        assert (out / "glue_final.csv").exists()

    def test_r0(self, capsys):
        assert cli.main(["r0", "--preset", "tirathaba_20C"]) == 0
        out = capsys.readouterr().out
        assert "R0 =" in out
        assert "reference value 4.13" in out

    def test_r0_writes_json(self, tiny_config, tmp_path):
        out = tmp_path / "r0"
        assert cli.main(["r0", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        payload = json.loads((out / "r0.json").read_text())
        assert payload["growth"] in ("growing", "decaying", "steady")

    def test_run_pipeline(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(tiny_config),
                         "--out", str(out)]) == 0
        assert "artifacts" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["scenario"] == "tiny"
        for name in manifest["artifacts"]:
            assert (out / name).exists()

    def test_seed_override_changes_data(self, tiny_config, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert cli.main(["simulate", "--config", str(tiny_config),
                         "--out", str(out_a), "--seed", "1"]) == 0
        assert cli.main(["simulate", "--config", str(tiny_config),
                         "--out", str(out_b), "--seed", "2"]) == 0
        assert (out_a / "final_state.csv").read_bytes() != \
            (out_b / "final_state.csv").read_bytes()
