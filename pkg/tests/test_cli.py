import json
from pathlib import Path

import numpy as np
import pytest

import dpmf
from dpmf.cli import main
from dpmf.synth import sample_ratings_path


@pytest.fixture(scope="module")
def preprocessed(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre") / "sample"
    rc = main(["preprocess", str(sample_ratings_path()), str(out),
               "--tau", "100", "--kappa", "1", "--rho", "1",
               "--tiers", "20,80", "--block-users", "16", "--seed", "0"])
    assert rc == 0
    return out


class TestPreprocess:
    def test_smoke_and_b2500(self, preprocessed):
        budget = json.loads(Path(str(preprocessed) + ".budget.json").read_text())
        assert budget["B"] == 2500.0
        assert budget["tau"] == 100
        assert any(u["m"] == 100 for u in budget["users"])  # trimmed heavy user
        assert Path(str(preprocessed) + ".blocks").exists()
        assert Path(str(preprocessed) + ".blocks.idx").exists()

    def test_missing_input(self, tmp_path, capsys):
        rc = main(["preprocess", str(tmp_path / "absent.csv"), str(tmp_path / "x")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_usage_error_exit_1(self, capsys):
        rc = None
        with pytest.raises(SystemExit) as exc:
            main(["preprocess"])  # missing required positionals
        assert exc.value.code == 1

    def test_unknown_command_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1


class TestTrain:
    def test_sgd_smoke_and_log(self, preprocessed, tmp_path):
        model = tmp_path / "m.bin"
        log = tmp_path / "log.tsv"
        rc = main(["train", "--data", str(preprocessed) + ".blocks",
                   "--solver", "sgd", "--epochs", "3", "--k", "4",
                   "--out", str(model), "--log", str(log), "--seed", "1"])
        assert rc == 0
        lines = log.read_text().strip().splitlines()
        assert lines[0].split("\t") == ["epoch", "seconds", "objective",
                                        "rmse", "throughput"]
        assert len(lines) == 4
        m = dpmf.load_snapshot(model)
        assert m.k == 4

    def test_deterministic_per_seed(self, preprocessed, tmp_path):
        outs = []
        logs = []
        for tag in ("a", "b"):
            model = tmp_path / f"m{tag}.bin"
            log = tmp_path / f"l{tag}.tsv"
            rc = main(["train", "--data", str(preprocessed) + ".blocks",
                       "--solver", "sgd", "--epochs", "2", "--k", "3",
                       "--workers", "1", "--seed", "7",
                       "--out", str(model), "--log", str(log)])
            assert rc == 0
            outs.append(model.read_bytes())
            rows = [ln.split("\t") for ln in log.read_text().strip().splitlines()[1:]]
            logs.append([(r[0], r[2], r[3]) for r in rows])  # timing columns excluded
        assert outs[0] == outs[1]
        assert logs[0] == logs[1]

    def test_sgld_smoke_with_budget(self, preprocessed, tmp_path):
        model = tmp_path / "s.bin"
        log = tmp_path / "s.tsv"
        rc = main(["train", "--data", str(preprocessed) + ".blocks",
                   "--solver", "sgld", "--epochs", "2", "--k", "3",
                   "--budget", str(preprocessed) + ".budget.json",
                   "--epsilon", "10000", "--eta0", "2e-6", "--zeta", "0.01",
                   "--fix-hyperparams", "--out", str(model), "--log", str(log),
                   "--seed", "2"])
        assert rc == 0
        header = log.read_text().splitlines()[0].split("\t")
        assert "lambda_u_mean" in header

    def test_config_file_precedence(self, preprocessed, tmp_path):
        cfgfile = tmp_path / "train.cfg"
        cfgfile.write_text("epochs=2\nk=3\n# comment\neta0=0.01\n")
        model = tmp_path / "c.bin"
        log = tmp_path / "c.tsv"
        # config alone: 2 epochs
        rc = main(["train", "--data", str(preprocessed) + ".blocks",
                   "--config", str(cfgfile), "--out", str(model),
                   "--log", str(log)])
        assert rc == 0
        assert len(log.read_text().strip().splitlines()) == 3
        # CLI flag wins over config
        rc = main(["train", "--data", str(preprocessed) + ".blocks",
                   "--config", str(cfgfile), "--epochs", "1",
                   "--out", str(model), "--log", str(log)])
        assert rc == 0
        assert len(log.read_text().strip().splitlines()) == 2

    def test_divergence_exit_3(self, preprocessed, tmp_path, capsys):
        rc = main(["train", "--data", str(preprocessed) + ".blocks",
                   "--solver", "sgd", "--epochs", "2", "--eta0", "1e12",
                   "--out", str(tmp_path / "d.bin")])
        assert rc == 3


class TestRelease:
    def test_release_recommend_evaluate(self, tmp_path):
        # loose kappa so the smoke release passes its constraint check
        pre = tmp_path / "loose"
        rc = main(["preprocess", str(sample_ratings_path()), str(pre),
                   "--tau", "100", "--kappa", "50", "--tiers", "20,80",
                   "--block-users", "16"])
        assert rc == 0
        released = tmp_path / "released.bin"
        report = tmp_path / "report.json"
        rc = main(["dp-release", "--data", str(pre) + ".blocks",
                   "--budget", str(pre) + ".budget.json",
                   "--epsilon", "1000000", "--k", "4", "--epochs", "3",
                   "--eta0", "2e-5", "--zeta", "0.005", "--seed", "3",
                   "--out", str(released), "--report", str(report)])
        assert rc == 0
        rep = json.loads(report.read_text())
        assert rep["retries"] == 0
        assert rep["eps_rating"] == pytest.approx(1000000 / 100)
        assert len(rep["eps_i"]) == 40
        V = dpmf.load_item_factors(released)
        assert V.shape[1] == 4

        recs = tmp_path / "recs.tsv"
        rc = main(["recommend", "--item-factors", str(released),
                   "--ratings", str(sample_ratings_path()), "--n", "3",
                   "--out", str(recs)])
        assert rc == 0
        rows = [ln.split("\t") for ln in recs.read_text().strip().splitlines()]
        assert len(rows) == 40 * 3
        # recommended items are never ones the user already rated
        rated = {}
        for ln in sample_ratings_path().read_text().strip().splitlines():
            u, i, _ = ln.split(",")
            rated.setdefault(u, set()).add(i)
        for u, _rank, item, _score in rows:
            assert item not in rated[u]

        train_csv = tmp_path / "tr.csv"
        test_csv = tmp_path / "te.csv"
        lines = sample_ratings_path().read_text().strip().splitlines()
        train_csv.write_text("\n".join(lines[:-150]) + "\n")
        test_csv.write_text("\n".join(lines[-150:]) + "\n")
        rc = main(["evaluate", "--item-factors", str(released),
                   "--train", str(train_csv), "--test", str(test_csv)])
        assert rc == 0

    def test_retry_limit_exit_3(self, tmp_path, capsys):
        pre = tmp_path / "tight"
        main(["preprocess", str(sample_ratings_path()), str(pre),
              "--tau", "100", "--kappa", "1", "--tiers", "20,80",
              "--block-users", "16"])
        rc = main(["dp-release", "--data", str(pre) + ".blocks",
                   "--budget", str(pre) + ".budget.json",
                   "--epsilon", "10000", "--k", "4", "--epochs", "1",
                   "--eta0", "1e-9", "--zeta", "0.005",
                   "--retry-limit", "2",
                   "--out", str(tmp_path / "x.bin"),
                   "--report", str(tmp_path / "x.json")])
        assert rc == 3
        assert "kappa" in capsys.readouterr().err


class TestBench:
    def test_two_worker_rows_positive(self, tmp_path, capsys):
        rc = main(["bench", "--dims", "8", "--workers", "1,2",
                   "--ratings", "5000", "--users", "200", "--items", "150",
                   "--epochs", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        rows = [ln for ln in out.splitlines() if ln.strip().startswith("8 ")]
        assert len(rows) == 2
        assert all(float(r.split()[-1]) > 0 for r in rows)

    def test_layouts_process_identical_counts(self, tmp_path):
        csv = tmp_path / "bench.csv"
        rc = main(["bench", "--dims", "8", "--workers", "1",
                   "--layouts", "tiered,shuffled", "--ratings", "5000",
                   "--users", "200", "--items", "150", "--epochs", "1",
                   "--out", str(csv)])
        assert rc == 0
        rows = csv.read_text().strip().splitlines()[1:]
        counts = {r.split(",")[2]: int(r.split(",")[-1]) for r in rows}
        assert counts["tiered"] == counts["shuffled"] > 0
