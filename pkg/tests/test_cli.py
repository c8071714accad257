import json
import csv

import numpy as np
import pytest

from flowsynth import cli, dataio
from flowsynth.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_THRESHOLD
from conftest import compound_symmetry


def write_csv(path, columns, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in np.atleast_2d(values):
            w.writerow([f"{v:.17g}" for v in row])
    return str(path)


@pytest.fixture
def workdir(tmp_path, rng):
    vals = compound_symmetry(300, 3, 0.5, 11)
    data = write_csv(tmp_path / "data.csv", ["a", "b", "c"], vals)
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"a": "zscore", "b": "zscore",
                                  "c": "zscore"}))
    arch = tmp_path / "arch.json"
    arch.write_text(json.dumps({"hidden_sizes": [6], "n_flows": 1}))
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"seed": 5, "max_iters": 30,
                               "learning_rate": 0.01}))
    return {"dir": tmp_path, "data": data, "schema": str(schema),
            "arch": str(arch), "config": str(cfg), "values": vals}


def run(*argv):
    return cli.main(list(argv))


def test_console_script_help():
    import shutil
    import subprocess

    exe = shutil.which("flowsynth")
    if exe is None:
        pytest.skip("console script not on PATH")
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "synthesize" in out.stdout


class TestTrain:
    def test_happy_path(self, workdir, capsys):
        out = workdir["dir"] / "model.bin"
        code = run("train", "--data", workdir["data"], "--schema",
                   workdir["schema"], "--arch", workdir["arch"],
                   "--config", workdir["config"], "--out", str(out))
        assert code == EXIT_OK
        assert out.exists()
        assert "final train NLL" in capsys.readouterr().out

    def test_missing_schema_column_names_it(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad_schema.json"
        bad.write_text(json.dumps({"a": "zscore", "b": "zscore"}))
        code = run("train", "--data", workdir["data"], "--schema", str(bad),
                   "--arch", workdir["arch"], "--config", workdir["config"],
                   "--out", str(tmp_path / "m.bin"))
        assert code == EXIT_INPUT
        assert "'c'" in capsys.readouterr().err

    def test_nan_loss_exits_3_with_step(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "explode.json"
        cfg.write_text(json.dumps({"seed": 5, "max_iters": 5,
                                   "learning_rate": 1e200}))
        code = run("train", "--data", workdir["data"], "--schema",
                   workdir["schema"], "--arch", workdir["arch"],
                   "--config", str(cfg), "--out", str(tmp_path / "m.bin"))
        assert code == EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "step" in err
        assert not (tmp_path / "m.bin").exists()  # no partial output

    def test_config_requires_seed(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "noseed.json"
        cfg.write_text(json.dumps({"max_iters": 5}))
        code = run("train", "--data", workdir["data"], "--schema",
                   workdir["schema"], "--arch", workdir["arch"],
                   "--config", str(cfg), "--out", str(tmp_path / "m.bin"))
        assert code == EXIT_INPUT
        assert "seed" in capsys.readouterr().err


@pytest.fixture
def trained(workdir):
    out = workdir["dir"] / "model.bin"
    assert run("train", "--data", workdir["data"], "--schema",
               workdir["schema"], "--arch", workdir["arch"],
               "--config", workdir["config"], "--out", str(out)) == EXIT_OK
    return str(out)


class TestSynthesize:
    def test_w1_latent_round_trips_to_input(self, workdir, trained, capsys):
        out = workdir["dir"] / "w1.csv"
        code = run("synthesize", "--model", trained, "--data",
                   workdir["data"], "--mechanism", "latent-noise",
                   "--w", "1.0", "--seed", "3", "--out", str(out))
        assert code == EXIT_OK
        back = dataio.load_csv(out, {"a": "identity", "b": "identity",
                                     "c": "identity"})
        assert np.max(np.abs(back.values - workdir["values"])) < 1e-6
        # perturbing the training data itself warns but proceeds
        assert "own training data" in capsys.readouterr().err

    def test_fresh_data_does_not_warn(self, workdir, trained, tmp_path,
                                      capsys):
        fresh = write_csv(tmp_path / "fresh.csv", ["a", "b", "c"],
                          compound_symmetry(50, 3, 0.5, 404))
        code = run("synthesize", "--model", trained, "--data", fresh,
                   "--mechanism", "latent-noise", "--w", "0.5",
                   "--seed", "3", "--out", str(tmp_path / "o.csv"))
        assert code == EXIT_OK
        assert "own training data" not in capsys.readouterr().err

    def test_flow_sample_row_count(self, workdir, trained):
        out = workdir["dir"] / "fs.csv"
        code = run("synthesize", "--model", trained, "--mechanism",
                   "flow-sample", "--m", "100", "--seed", "4",
                   "--out", str(out))
        assert code == EXIT_OK
        assert len(out.read_text().splitlines()) == 101

    def test_same_seed_identical_files(self, workdir, trained):
        a = workdir["dir"] / "a.csv"
        b = workdir["dir"] / "b.csv"
        for path in (a, b):
            assert run("synthesize", "--model", trained, "--data",
                       workdir["data"], "--mechanism", "latent-noise",
                       "--w", "0.6", "--seed", "9",
                       "--out", str(path)) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_columns_exit_2(self, workdir, trained, tmp_path, capsys):
        other = write_csv(tmp_path / "other.csv", ["x", "y", "z"],
                          np.zeros((5, 3)))
        code = run("synthesize", "--model", trained, "--data", other,
                   "--mechanism", "latent-noise", "--w", "0.5",
                   "--seed", "1", "--out", str(tmp_path / "o.csv"))
        assert code == EXIT_INPUT
        assert "schema does not cover" in capsys.readouterr().err

    def test_reordered_columns_hash_mismatch(self, workdir, trained,
                                             tmp_path, capsys):
        reordered = write_csv(tmp_path / "re.csv", ["c", "b", "a"],
                              workdir["values"][:, ::-1])
        code = run("synthesize", "--model", trained, "--data", reordered,
                   "--mechanism", "latent-noise", "--w", "0.5",
                   "--seed", "1", "--out", str(tmp_path / "o.csv"))
        assert code == EXIT_INPUT
        assert "hash" in capsys.readouterr().err

    def test_seed_flag_required(self, workdir, trained, capsys):
        with pytest.raises(SystemExit):
            run("synthesize", "--model", trained, "--data", workdir["data"],
                "--mechanism", "latent-noise", "--w", "0.5",
                "--out", "x.csv")


class TestAudit:
    def test_copy_gives_zero_metrics(self, workdir, tmp_path, capsys):
        stem = tmp_path / "rep"
        code = run("audit", "--data", workdir["data"], "--synthetic",
                   workdir["data"], "--out", str(stem))
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(f"{stem}.csv")))
        assert float(rows[0]["closer_prob"]) == 0.0
        assert float(rows[0]["median_rank"]) == 0.0

    def test_independent_synthetic_near_half(self, workdir, tmp_path):
        fresh = compound_symmetry(300, 3, 0.5, 999)
        synth_path = write_csv(tmp_path / "indep.csv", ["a", "b", "c"], fresh)
        stem = tmp_path / "rep"
        assert run("audit", "--data", workdir["data"], "--synthetic",
                   synth_path, "--out", str(stem)) == EXIT_OK
        rows = list(csv.DictReader(open(f"{stem}.csv")))
        assert abs(float(rows[0]["closer_prob"]) - 0.5) < 0.08

    def test_size_mismatch_suggests_auc_mode(self, workdir, tmp_path, capsys):
        small = write_csv(tmp_path / "small.csv", ["a", "b", "c"],
                          np.zeros((5, 3)))
        stem = tmp_path / "rep"
        code = run("audit", "--data", workdir["data"], "--synthetic", small,
                   "--out", str(stem))
        assert code == EXIT_INPUT
        assert "AUC-only" in capsys.readouterr().err
        assert not (tmp_path / "rep.csv").exists()

    def test_auc_mode_with_fresh(self, workdir, tmp_path):
        synth_rows = compound_symmetry(120, 3, 0.5, 5)
        fresh_rows = compound_symmetry(300, 3, 0.5, 6)
        synth_path = write_csv(tmp_path / "s.csv", ["a", "b", "c"], synth_rows)
        fresh_path = write_csv(tmp_path / "f.csv", ["a", "b", "c"], fresh_rows)
        stem = tmp_path / "rep"
        code = run("audit", "--data", workdir["data"], "--synthetic",
                   synth_path, "--fresh", fresh_path, "--out", str(stem))
        assert code == EXIT_OK
        doc = json.load(open(f"{stem}.json"))
        assert 0.0 <= doc[0]["auc"] <= 1.0
        assert doc[0]["closer_prob"] is None  # unmatched sizes


class TestCalibrate:
    def test_grid_zero_selected(self, workdir, tmp_path, capsys):
        stem = tmp_path / "cal"
        code = run("calibrate", "--data", workdir["data"], "--schema",
                   workdir["schema"], "--grid", "0.0", "--seed", "8",
                   "--out", str(stem))
        assert code == EXIT_OK
        assert "selected w* = 0" in capsys.readouterr().out

    def test_grid_one_threshold_unmet_report_written(self, workdir, tmp_path,
                                                     capsys):
        stem = tmp_path / "cal"
        code = run("calibrate", "--data", workdir["data"], "--schema",
                   workdir["schema"], "--grid", "1.0", "--seed", "8",
                   "--out", str(stem))
        assert code == EXIT_THRESHOLD
        assert (tmp_path / "cal.csv").exists()
        assert "threshold unmet" in capsys.readouterr().out


class TestMeta:
    def test_homogeneous_studies(self, tmp_path, capsys):
        p = tmp_path / "studies.csv"
        p.write_text("label,theta_hat,var_hat\n"
                     + "".join(f"s{i},2.0,1.0\n" for i in range(4)))
        out = tmp_path / "forest.csv"
        assert run("meta", "--studies", str(p), "--out", str(out)) == EXIT_OK
        doc = json.load(open(tmp_path / "forest.json"))
        assert doc["tau2_hat"] == 0.0
        assert doc["theta_R"] == 2.0

    def test_two_study_worked_case(self, tmp_path):
        p = tmp_path / "studies.csv"
        p.write_text("label,theta_hat,var_hat\na,0.0,1.0\nb,4.0,1.0\n")
        out = tmp_path / "forest.csv"
        assert run("meta", "--studies", str(p), "--out", str(out)) == EXIT_OK
        doc = json.load(open(tmp_path / "forest.json"))
        assert np.isclose(doc["theta_R"], 2.0)
        assert np.isclose(doc["tau2_hat"], 7.0)
        assert np.isclose(doc["var_R"], 4.0)

    def test_malformed_header_exit_2(self, tmp_path, capsys):
        p = tmp_path / "studies.csv"
        p.write_text("a,b,c\n1,2,3\n")
        code = run("meta", "--studies", str(p),
                   "--out", str(tmp_path / "f.csv"))
        assert code == EXIT_INPUT

    def test_single_study_fixed_effects_fallback(self, tmp_path, capsys):
        p = tmp_path / "studies.csv"
        p.write_text("label,theta_hat,var_hat\nonly,1.5,0.25\n")
        out = tmp_path / "forest.csv"
        assert run("meta", "--studies", str(p), "--out", str(out)) == EXIT_OK
        assert "fixed effects" in capsys.readouterr().err
        rows = list(csv.DictReader(open(out)))
        assert "fixed effects" in rows[-1]["label"]


class TestSimulate:
    def _corr_config(self, tmp_path):
        cfg = {"seed": 21, "d": 3, "rho": 0.6, "ns": [100, 150],
               "ws": [0.0, 1.0], "replications": 2,
               "mechanisms": ["direct-noise"], "workers": 2}
        p = tmp_path / "corr.json"
        p.write_text(json.dumps(cfg))
        return str(p)

    def test_correlation_tables_all_cells(self, tmp_path):
        out = tmp_path / "out"
        code = run("simulate", "--study", "correlation", "--config",
                   self._corr_config(tmp_path), "--out", str(out))
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(out / "mad.csv")))
        assert len(rows) == 4  # 1 mechanism x 2 w x 2 n

    def test_meta_paired_file_has_w_columns(self, tmp_path):
        cfg = {"seed": 3, "K": 2, "n_range": [60, 70], "ws": [0.0, 0.8, 1.0],
               "replications": 2, "hidden_sizes": [6], "n_flows": 1,
               "max_iters": 5, "validation_fraction": 0.0}
        p = tmp_path / "meta.json"
        p.write_text(json.dumps(cfg))
        out = tmp_path / "out"
        assert run("simulate", "--study", "meta", "--config", str(p),
                   "--out", str(out)) == EXIT_OK
        header = (out / "paired_estimates.csv").read_text().splitlines()[0]
        assert header.count("theta_w") == 3

    def test_rerun_byte_identical_tables(self, tmp_path):
        cfg_path = self._corr_config(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert run("simulate", "--study", "correlation", "--config",
                       cfg_path, "--out", str(out)) == EXIT_OK
        for name in ("mad.csv", "bias.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        m1 = json.load(open(out1 / "manifest.json"))
        m2 = json.load(open(out2 / "manifest.json"))
        m1.pop("wall_time_seconds"), m2.pop("wall_time_seconds")
        assert m1 == m2

    def test_missing_seed_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"replications": 1}))
        code = run("simulate", "--study", "correlation", "--config", str(p),
                   "--out", str(tmp_path / "o"))
        assert code == EXIT_INPUT
        assert "seed" in capsys.readouterr().err

    def test_invalid_json_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        code = run("simulate", "--study", "correlation", "--config", str(p),
                   "--out", str(tmp_path / "o"))
        assert code == EXIT_INPUT
