import time
from pathlib import Path

import numpy as np
import pytest

from idcf.cli import RunConfig, build_config, load_trained, main, parse_config_text
from idcf.data import load_dataset
from idcf.errors import ConfigError
from idcf.evaluation import evaluate_model
from idcf.identify import random_forward_model

ROOT = Path(__file__).resolve().parent.parent
MINI = ROOT / "fixtures" / "mini"
FAST = ROOT / "fixtures" / "fast.cfg"


def read_tsv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:]]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(FAST), "--data", str(MINI), "--out", str(run)]) == 0
    assert main(["eval", "--data", str(MINI), "--run", str(run)]) == 0
    return run


class TestConfig:
    def test_parse(self):
        text = "# comment\nalpha = 0.2  # trailing\n\nseeds = 1, 2\n"
        assert parse_config_text(text) == {"alpha": "0.2", "seeds": "1, 2"}

    def test_types(self):
        cfg = build_config(overrides=["seeds=3,4", "hidden=16", "alpha=0.25", "methods=mf"])
        assert cfg.seeds == (3, 4) and cfg.hidden == (16,) and cfg.alpha == 0.25 and cfg.methods == ("mf",)

    def test_file_then_override(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("beta = 1.5\ngamma = 2\n")
        cfg = build_config(files=[path], overrides=["gamma=4"])
        assert (cfg.beta, cfg.gamma) == (1.5, 4.0)

    @pytest.mark.parametrize("override", ["nope=1", "alpha=abc", "seeds=", "methods=idcf,foo", "beta"])
    def test_bad_values(self, override):
        with pytest.raises(ConfigError):
            build_config(overrides=[override])

    def test_bad_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("just words\n")

    def test_exit_code(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path), "--set", "alpha=2"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_defaults_follow_search_space(self):
        cfg = RunConfig()
        assert cfg.lr_grid == (1e-3, 5e-4, 1e-4, 5e-5, 1e-5) and cfg.wd_grid == (1e-5, 1e-6)


class TestGen:
    def test_rows_and_determinism(self, tmp_path):
        args = ["--set", "num_users=40", "--set", "num_items=25", "--set", "data_seed=3"]
        assert main(["gen", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["gen", "--out", str(tmp_path / "b"), *args]) == 0
        for name in ("interactions_biased.tsv", "interactions_unbiased.tsv", "user_features.tsv", "truth.tsv", "generator.cfg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        _, rows = read_tsv(tmp_path / "a" / "interactions_unbiased.tsv")
        assert len(rows) == 40 * 15
        _, rows = read_tsv(tmp_path / "a" / "user_features.tsv")
        assert len(rows) == 40


class TestTrainEval:
    def test_files(self, trained_run):
        for method in ("idcf", "idcf-w", "mf", "mf-wf"):
            for seed in (0, 1):
                d = trained_run / method / f"seed{seed}"
                assert (d / "feedback.ckpt").exists()
                assert (d / "confounder.ckpt").exists() == method.startswith("idcf")

    def test_grid_report(self, trained_run):
        header, rows = read_tsv(trained_run / "grid_report.tsv")
        assert header == ["method", "seed", "stage", "lr", "weight_decay", "score", "selected"]
        for method in ("idcf", "mf"):
            for seed in ("0", "1"):
                fb = [(r[3], r[4]) for r in rows if r[0] == method and r[1] == seed and r[2] == "feedback"]
                assert sorted(fb) == sorted({("0.001", "1e-05"), ("0.0005", "1e-05")})
                assert sum(int(r[6]) for r in rows if r[0] == method and r[1] == seed and r[2] == "feedback") == 1
        # mf has no confounder stage
        assert not [r for r in rows if r[0] == "mf" and r[2] == "confounder"]

    def test_metric_rows_per_seed(self, trained_run):
        header, rows = read_tsv(trained_run / "metrics.tsv")
        assert header == ["method", "seed", "metric", "K", "value"]
        for method in ("idcf", "mf"):
            assert len([r for r in rows if r[0] == method and r[2] == "ndcg" and r[3] == "5"]) == 2

    def test_matches_library(self, trained_run):
        dataset = load_dataset(MINI)
        _, rows = read_tsv(trained_run / "metrics.tsv")
        for method in ("idcf", "mf-wf"):
            model, conf = load_trained(trained_run, method, 1, dataset)
            rep = evaluate_model(model, conf, dataset, ks=(3, 5))
            for metric in ("ndcg", "recall"):
                for k in (3, 5):
                    value = [r[4] for r in rows if r[:4] == [method, "1", metric, str(k)]]
                    assert float(value[0]) == rep.mean(metric, k)

    def test_mcc_written(self, trained_run):
        header, rows = read_tsv(trained_run / "mcc.tsv")
        assert header == ["method", "gamma", "seed", "mcc"]
        assert {r[0] for r in rows} == {"idcf", "idcf-w"}
        assert all(0.0 <= float(r[3]) <= 1.0 for r in rows)

    def test_identical_checkpoints_give_p_one(self, trained_run, tmp_path):
        run = tmp_path / "run"
        for seed in (0, 1):
            ckpt = (trained_run / "mf" / f"seed{seed}" / "feedback.ckpt").read_bytes()
            for method in ("mf", "mf-wf"):
                d = run / method / f"seed{seed}"
                d.mkdir(parents=True)
                (d / "feedback.ckpt").write_bytes(ckpt)
        args = ["--set", "methods=mf,mf-wf", "--set", "seeds=0,1", "--set", "compare=mf:mf-wf"]
        assert main(["eval", "--data", str(MINI), "--run", str(run), *args]) == 0
        _, rows = read_tsv(run / "pvalues.tsv")
        assert rows and all(float(r[6]) == 1.0 for r in rows)

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--data", str(MINI), "--run", str(tmp_path), "--set", "methods=mf", "--set", "seeds=0"]) == 3
        assert "missing checkpoint" in capsys.readouterr().err

    def test_rerun_is_byte_identical(self, trained_run, tmp_path):
        run = tmp_path / "again"
        assert main(["train", "--config", str(FAST), "--data", str(MINI), "--out", str(run), "--set", "methods=idcf"]) == 0
        for seed in (0, 1):
            for name in ("feedback.ckpt", "confounder.ckpt", "confounder_log.tsv"):
                a = trained_run / "idcf" / f"seed{seed}" / name
                assert a.read_bytes() == (run / "idcf" / f"seed{seed}" / name).read_bytes()

    def test_eval_reuses_run_config(self, trained_run, tmp_path):
        # ks = 3, 5 come from the run.cfg written at training time
        out = tmp_path / "ev"
        assert main(["eval", "--data", str(MINI), "--run", str(trained_run), "--out", str(out)]) == 0
        _, rows = read_tsv(out / "metrics.tsv")
        assert {r[3] for r in rows} == {"3", "5"}


class TestRank:
    def test_rank_output(self, trained_run, tmp_path):
        out = tmp_path / "rank.tsv"
        code = main(["rank", "--data", str(MINI), "--run", str(trained_run), "--method", "idcf", "--users", "3,0", "--k", "4", "--out", str(out)])
        assert code == 0
        header, rows = read_tsv(out)
        assert header == ["user_id", "item_id", "score", "rank"]
        assert [r[0] for r in rows] == ["3"] * 4 + ["0"] * 4
        assert [r[3] for r in rows[:4]] == ["1", "2", "3", "4"]
        scores = [float(r[2]) for r in rows[:4]]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_user(self, trained_run):
        assert main(["rank", "--data", str(MINI), "--run", str(trained_run), "--method", "mf", "--users", "ghost"]) == 3


class TestIdentify:
    def test_example_prints_interval_and_note(self, capsys):
        assert main(["identify", "--pz1", "0.5", "--pz1-a", "0.2", "--pr1-a", "0.6"]) == 0
        out = capsys.readouterr().out
        assert "p(r^a=1) interval: [0.375, 0.75]" in out
        assert "NOTE:" in out and "0.33" in out

    def test_proxy_round_trip(self, capsys):
        rng = np.random.default_rng(5)
        fm = random_forward_model(rng)
        s = fm.scenario()
        args = ["--pz1", repr(s.pz1), "--pz1-a", repr(s.pz1_a), "--pr1-a", repr(s.pr1_a)]
        args += ["--pz1-aw0", repr(s.pz1_aw[0]), "--pz1-aw1", repr(s.pz1_aw[1]), "--pr1-aw0", repr(s.pr1_aw[0]), "--pr1-aw1", repr(s.pr1_aw[1])]
        assert main(["identify", *args]) == 0
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if l.startswith("adjusted"))
        assert abs(float(line.split(": ")[1]) - fm.true_outcome()) < 1e-9
        joint = next(l for l in out.splitlines() if l.startswith("unique joint"))
        values = [float(tok.split("=")[1]) for tok in joint.split(": ")[1].split()]
        np.testing.assert_allclose(values, fm.joint().as_array(), atol=1e-9)

    def test_equal_conditionals(self, capsys):
        args = ["--pz1", "0.5", "--pz1-a", "0.4", "--pr1-a", "0.5"]
        args += ["--pz1-aw0", "0.4", "--pz1-aw1", "0.4", "--pr1-aw0", "0.5", "--pr1-aw1", "0.5"]
        assert main(["identify", *args]) == 3
        assert "non-identifiable: uniqueness condition violated" in capsys.readouterr().err

    def test_partial_proxy_flags(self):
        assert main(["identify", "--pz1", "0.5", "--pz1-a", "0.4", "--pr1-a", "0.5", "--pz1-aw0", "0.2"]) == 2

    def test_out_of_range(self):
        assert main(["identify", "--pz1", "1.5", "--pz1-a", "0.4", "--pr1-a", "0.5"]) == 2

    def test_degenerate(self, capsys):
        assert main(["identify", "--pz1", "0.5", "--pz1-a", "0", "--pr1-a", "0.5"]) == 3


def test_sweep_merges(tmp_path):
    args = ["sweep", "--sweep", "gamma=0,5", "--out", str(tmp_path), "--config", str(FAST)]
    args += ["--set", "num_users=30", "--set", "num_items=20", "--set", "methods=idcf,mf", "--set", "lr_grid=0.001", "--set", "fb_epochs=5"]
    assert main(args) == 0
    header, rows = read_tsv(tmp_path / "mcc.tsv")
    assert header == ["method", "gamma", "seed", "mcc"]
    assert [r[1] for r in rows] == ["0.0"] * 2 + ["5.0"] * 2
    header, rows = read_tsv(tmp_path / "metrics.tsv")
    assert header[0] == "gamma" and len(rows) == 2 * 2 * 2 * 2 * 2
    assert (tmp_path / "gamma=5" / "data" / "truth.tsv").exists()


def test_bad_sweep_key(tmp_path):
    assert main(["sweep", "--sweep", "delta=1", "--out", str(tmp_path)]) == 2


def test_fixture_end_to_end_budget(tmp_path):
    start = time.perf_counter()
    assert main(["train", "--config", str(FAST), "--data", str(MINI), "--out", str(tmp_path)]) == 0
    assert main(["eval", "--data", str(MINI), "--run", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 60.0
