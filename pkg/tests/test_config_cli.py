import json

import numpy as np
import pytest

from divdistill import __version__
from divdistill.cli import main
from divdistill.config import DEFAULTS, RunConfig
from divdistill.losses import ConfigError
from divdistill.models import load_checkpoint, load_ensemble

TINY = {
    "teacher": {"epochs": 6, "warmup_epochs": 1, "batch_size": 16},
    "student": {"epochs": 4, "warmup_epochs": 1, "batch_size": 16},
    "model": {"hidden": [8]},
    "jacobian": {"snr_points": 8, "snr_etas": [0.01, 0.02]},
}


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.load()
        assert cfg.to_dict() == dict(sorted(DEFAULTS.items()))
        assert (cfg["loss.alpha"], cfg["loss.tau"], cfg["perturb.eta"]) == (0.9, 4.0, 1 / 255)

    def test_file_then_flags(self, tmp_path, caplog):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"loss": {"tau": 2}, "seed": 5}))
        with caplog.at_level("INFO"):
            cfg = RunConfig.load(path, {"loss.tau": 3.0, "seed": None})
        assert cfg["loss.tau"] == 3.0 and cfg["seed"] == 5
        assert "overrides" in caplog.text

    def test_unknown_keys_listed(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"loss": {"temperature": 2}, "bogus": 1}))
        with pytest.raises(ConfigError, match="bogus, loss.temperature"):
            RunConfig.load(path)

    @pytest.mark.parametrize("key,value", [("teacher.epochs", 2.5), ("loss.tau", "hot"),
                                           ("perturb.share_per_batch", "maybe")])
    def test_type_errors(self, key, value):
        with pytest.raises(ConfigError):
            RunConfig({key: value})

    def test_coercion(self):
        cfg = RunConfig({"model.hidden": "32,16", "teacher.epochs": 10.0, "perturb.share_per_batch": "true"})
        assert cfg["model.hidden"] == [32, 16] and cfg["teacher.epochs"] == 10
        assert cfg["perturb.share_per_batch"] is True

    def test_seed_offsets_and_perturb_tau(self):
        cfg = RunConfig({"seed": 7, "loss.tau": 2.0})
        assert cfg.seed_for("teacher", 3) == 10 and cfg.seed_for("distill") == 2007
        assert cfg.perturb_config().tau == 2.0
        assert RunConfig({"perturb.tau": 1.5}).perturb_config().tau == 1.5

    def test_invalid_perturb(self):
        with pytest.raises(ConfigError):
            RunConfig({"perturb.eta": -1.0}).perturb_config()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY))
    cfg = str(root / "cfg.json")
    assert main(["gen-data", "--kind", "spirals", "--k", "3", "--n", "20", "--seed", "7",
                 "--out", str(root / "data")]) == 0
    assert main(["train-teachers", "--config", cfg, "--data", str(root / "data"), "--m", "2",
                 "--seed", "3", "--out", str(root / "teachers")]) == 0
    for name, extra in (("ods", ["--perturb", "ods", "--eta", "0.00392"]), ("kd", ["--perturb", "none"]),
                        ("scratch", ["--scratch"])):
        assert main(["distill", "--config", cfg, "--teachers", str(root / "teachers"), "--alpha", "0.9",
                     "--tau", "4", "--seed", "3", *extra, "--out", str(root / f"{name}.json")]) == 0
    return root


class TestCli:
    def test_gen_data_files_and_determinism(self, workspace, tmp_path):
        assert main(["gen-data", "--kind", "spirals", "--k", "3", "--n", "20", "--seed", "7",
                     "--out", str(tmp_path / "again")]) == 0
        for name in ("train.csv", "val.csv", "test.csv", "ood.csv"):
            assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert manifest["run"]["version"] == __version__ and manifest["run"]["config"]["seed"] == 7

    def test_gen_data_validation(self, tmp_path, capsys):
        assert main(["gen-data", "--k", "1", "--out", str(tmp_path / "bad")]) == 2
        assert "K must be >= 2" in capsys.readouterr().err

    def test_teachers(self, workspace):
        teachers = load_ensemble(workspace / "teachers")
        assert len(teachers) == 2
        assert [t.meta["seed"] for t in teachers] == [3, 4]
        run = json.loads((workspace / "teachers" / "run.json").read_text())
        assert run["seeds"] == [3, 4] and run["config"]["teacher.epochs"] == 6
        header = (workspace / "teachers" / "log_0.csv").read_text().splitlines()[0]
        assert header == "epoch,lr,train_loss,val_acc,val_nll"

    def test_teachers_reproducible(self, workspace, tmp_path):
        assert main(["train-teachers", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                     "--m", "2", "--seed", "3", "--out", str(tmp_path / "t")]) == 0
        a, b = load_ensemble(workspace / "teachers"), load_ensemble(tmp_path / "t")
        for ta, tb in zip(a, b):
            for k in ta.params:
                np.testing.assert_array_equal(ta.params[k], tb.params[k])

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"teacher": {"epochz": 3}}))
        assert main(["train-teachers", "--config", str(bad), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "t")]) == 2
        assert "teacher.epochz" in capsys.readouterr().err

    def test_students(self, workspace):
        ods, kd = load_checkpoint(workspace / "ods.json"), load_checkpoint(workspace / "kd.json")
        assert ods.M == 2 and ods.meta["perturb"]["strategy"] == "ods"
        np.testing.assert_allclose(ods.meta["perturb"]["eta"], 0.00392)
        assert kd.meta["perturb"]["strategy"] == "none"
        assert (workspace / "ods.log.csv").exists()

    @pytest.mark.parametrize("strategy", ["confods", "adversarial", "gaussian"])
    def test_other_strategies(self, workspace, tmp_path, strategy):
        assert main(["distill", "--config", str(workspace / "cfg.json"), "--teachers", str(workspace / "teachers"),
                     "--perturb", strategy, "--out", str(tmp_path / "s.json")]) == 0

    def test_numerical_failure_exit_code(self, workspace, tmp_path):
        with np.errstate(all="ignore"):
            code = main(["distill", "--config", str(workspace / "cfg.json"), "--teachers",
                         str(workspace / "teachers"), "--lr", "1e8", "--out", str(tmp_path / "s.json")])
        assert code == 3

    def test_evaluate(self, workspace):
        out = workspace / "report.json"
        assert main(["evaluate", "--model", str(workspace / "ods.json"), "--data", str(workspace / "data"),
                     "--dee-teachers", str(workspace / "teachers"), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        for key in ("acc", "nll", "brier", "ece", "entropy_mean", "tau_star", "dee", "standard", "calibrated",
                    "config_echo"):
            assert key in report
        assert report["nll"] == report["calibrated"]["nll"]
        assert report["validation"]["nll_calibrated"] <= report["validation"]["nll_standard"] + 1e-9
        assert report["config_echo"]["version"] == __version__

    def test_evaluate_reproducible(self, workspace, tmp_path):
        args = ["evaluate", "--model", str(workspace / "kd.json"), "--data", str(workspace / "data"),
                "--dee-teachers", str(workspace / "teachers")]
        assert main([*args, "--out", str(tmp_path / "a.json")]) == 0
        assert main([*args, "--out", str(tmp_path / "b.json")]) == 0
        a, b = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "b.json"))
        a["config_echo"]["paths"]["out"] = b["config_echo"]["paths"]["out"]
        assert a == b

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert main(["evaluate", "--model", str(tmp_path / "nope.json"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r.json")]) == 2

    def test_diversity(self, workspace):
        prefix = workspace / "div"
        assert main(["diversity", "--models", str(workspace / "teachers"), "--data", str(workspace / "data"),
                     "--split", "train", "--perturb", "ods", "--eta", "0.02", "--out", str(prefix)]) == 0
        summary = json.loads((workspace / "div.json").read_text())
        rows = (workspace / "div.csv").read_text().splitlines()
        assert rows[0] == "bin_lo,bin_hi,count,density,mean_kl" and len(rows) == 21
        assert summary["mean_kld"] >= 0 and summary["n"] == 48

    def test_diversity_student_needs_teacher_perturbations(self, workspace):
        assert main(["diversity", "--models", str(workspace / "ods.json"), "--data", str(workspace / "data"),
                     "--perturb", "ods", "--out", str(workspace / "bad")]) == 2
        assert main(["diversity", "--models", str(workspace / "ods.json"), "--data", str(workspace / "data"),
                     "--perturb", "ods", "--perturb-teachers", str(workspace / "teachers"),
                     "--out", str(workspace / "div_student")]) == 0

    def test_jacobian_roc(self, workspace):
        prefix = workspace / "jac"
        assert main(["jacobian", "--teacher", str(workspace / "teachers"), "--students", str(workspace / "ods.json"),
                     str(workspace / "kd.json"), str(workspace / "scratch.json"), "--data", str(workspace / "data"),
                     "--out", str(prefix)]) == 0
        summary = json.loads((workspace / "jac.json").read_text())
        assert len(summary["auroc"]) == 2 and all(0 <= v <= 1 for v in summary["auroc"].values())
        assert (workspace / "jac_roc_0.csv").read_text().startswith("threshold,tpr,fpr")

    def test_jacobian_single_teacher_checkpoint(self, workspace):
        assert main(["jacobian", "--teacher", str(workspace / "teachers" / "teacher_1.json"), "--students",
                     str(workspace / "ods.json"), str(workspace / "scratch.json"), "--data", str(workspace / "data"),
                     "--out", str(workspace / "jac1")]) == 0

    def test_jacobian_snr(self, workspace):
        assert main(["jacobian", "--snr", "--samples", "4", "--config", str(workspace / "cfg.json"),
                     "--teacher", str(workspace / "teachers"), "--students", str(workspace / "kd.json"),
                     "--data", str(workspace / "data"), "--split", "train", "--out", str(workspace / "snr")]) == 0
        lines = (workspace / "snr.csv").read_text().splitlines()
        assert lines[0] == "eta,snr_ods,snr_gaussian" and len(lines) == 3
        meta = json.loads((workspace / "snr.json").read_text())["snr_meta"]
        assert meta == {"samples": 4, "etas": [0.01, 0.02], "points": 8}

    def test_jacobian_needs_baseline(self, workspace):
        assert main(["jacobian", "--teacher", str(workspace / "teachers"), "--students", str(workspace / "ods.json"),
                     "--data", str(workspace / "data"), "--out", str(workspace / "x")]) == 2
