import json
import subprocess
import sys

import numpy as np
import pytest

import wsdsel.head
from wsdsel.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from wsdsel.data import load_dataset
from wsdsel.head import HeadParams
from wsdsel.trainer import init_params, load_checkpoint

SMALL_SYNTH = ["--n-images", "10", "--num-classes", "3", "--feat-dim", "8", "--proposals-per-image", "16"]
FAST_TRAIN = ["--epochs", "4", "--warmup-epochs", "1", "--m-start", "8", "--m-final", "4",
              "--m-neg", "4", "--schedule-epochs", "4", "--learning-rate", "0.01"]


@pytest.fixture
def small_dataset(tmp_path):
    out = tmp_path / "ds.json"
    assert main(["synth", "--out", str(out), *SMALL_SYNTH]) == EXIT_OK
    return out


class TestSynth:
    def test_writes_valid_dataset_and_manifest(self, tmp_path):
        out = tmp_path / "ds.json"
        assert main(["synth", "--out", str(out), *SMALL_SYNTH]) == EXIT_OK
        ds = load_dataset(out)
        assert len(ds.images) == 10
        manifest = json.loads((tmp_path / "ds.json.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["config"]["n_images"] == 10
        assert manifest["version"]

    def test_byte_identical_outputs(self, tmp_path):
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            assert main(["synth", "--out", str(tmp_path / sub / "ds.json"), *SMALL_SYNTH]) == EXIT_OK
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "ds.json").read_bytes() == (b / "ds.json").read_bytes()
        for sidecar in sorted((a / "ds_features").iterdir()):
            assert sidecar.read_bytes() == (b / "ds_features" / sidecar.name).read_bytes()

    def test_invalid_value_exits_config(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "x.json"), "--objects-max", "0"])
        assert rc == EXIT_CONFIG
        assert "objects" in capsys.readouterr().err

    def test_unknown_config_key_listed(self, tmp_path, capsys):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("n_images = 5\nbananas = 7\n")
        rc = main(["synth", "--out", str(tmp_path / "x.json"), "--config", str(cfg)])
        assert rc == EXIT_CONFIG
        assert "bananas" in capsys.readouterr().err

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("# comment\nn_images = 6\nnum_classes = 3\nfeat_dim = 8\nproposals_per_image = 16\n")
        out = tmp_path / "ds.json"
        assert main(["synth", "--out", str(out), "--config", str(cfg), "--n-images", "4"]) == EXIT_OK
        assert len(load_dataset(out).images) == 4  # flag wins over file

    def test_train_split_writes_pair(self, tmp_path):
        out = tmp_path / "ds.json"
        assert main(["synth", "--out", str(out), *SMALL_SYNTH, "--train-split", "7"]) == EXIT_OK
        train_ds = load_dataset(tmp_path / "ds-train.json")
        test_ds = load_dataset(tmp_path / "ds-test.json")
        assert len(train_ds.images) == 7
        assert len(test_ds.images) == 3


class TestTrain:
    def test_zero_epochs_equals_initialization(self, small_dataset, tmp_path):
        ckpt = tmp_path / "ckpt.wsdc"
        assert main(["train", "--dataset", str(small_dataset), "--out", str(ckpt), "--epochs", "0"]) == EXIT_OK
        state = load_checkpoint(ckpt)
        init = init_params(8, 3, seed=0)
        for (_, x), (_, y) in zip(state.params.blocks(), init.blocks()):
            assert x.tobytes() == y.tobytes()

    def test_run_and_loss_csv(self, small_dataset, tmp_path):
        ckpt = tmp_path / "ckpt.wsdc"
        assert main(["train", "--dataset", str(small_dataset), "--out", str(ckpt), *FAST_TRAIN]) == EXIT_OK
        rows = (tmp_path / "ckpt_loss.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,mean_loss,m_pos,m_neg"
        assert len(rows) == 5
        budgets = [r.split(",")[2] for r in rows[1:]]
        assert budgets == ["n", "8", "8", "4"]  # warmup then halving trace

    def test_baseline_logs_constant_budgets(self, small_dataset, tmp_path):
        ckpt = tmp_path / "b.wsdc"
        assert main(["train", "--dataset", str(small_dataset), "--out", str(ckpt), *FAST_TRAIN, "--baseline"]) == EXIT_OK
        rows = (tmp_path / "b_loss.csv").read_text().strip().splitlines()[1:]
        assert all(r.split(",")[2] == "n" and r.split(",")[3] == "n" for r in rows)

    def test_deterministic_checkpoints(self, small_dataset, tmp_path):
        outs = []
        for name in ("one.wsdc", "two.wsdc"):
            path = tmp_path / name
            assert main(["train", "--dataset", str(small_dataset), "--out", str(path), *FAST_TRAIN]) == EXIT_OK
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_dataset_exits_data(self, tmp_path, capsys):
        rc = main(["train", "--dataset", str(tmp_path / "nope.json"), "--out", str(tmp_path / "c.wsdc")])
        assert rc == EXIT_DATA

    def test_invalid_momentum_exits_config(self, small_dataset, tmp_path):
        rc = main(["train", "--dataset", str(small_dataset), "--out", str(tmp_path / "c.wsdc"),
                   "--momentum", "1.5"])
        assert rc == EXIT_CONFIG


class TestEval:
    @pytest.fixture
    def trained(self, small_dataset, tmp_path):
        ckpt = tmp_path / "ckpt.wsdc"
        assert main(["train", "--dataset", str(small_dataset), "--out", str(ckpt), *FAST_TRAIN]) == EXIT_OK
        return small_dataset, ckpt

    def test_report_fields(self, trained, tmp_path):
        dataset, ckpt = trained
        report_path = tmp_path / "report.json"
        assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(report_path), "--top-m", "4"]) == EXIT_OK
        report = json.loads(report_path.read_text())
        assert set(report) >= {"per_class_ap", "map", "per_class_corloc", "mean_corloc", "n_images", "diagnostics"}
        assert report["n_images"] == 10
        assert 0.0 <= report["map"] <= 1.0
        assert report["diagnostics"]["concentration_k"] == 4

    def test_fresh_checkpoint_gives_valid_report(self, small_dataset, tmp_path):
        ckpt = tmp_path / "init.wsdc"
        assert main(["train", "--dataset", str(small_dataset), "--out", str(ckpt), "--epochs", "0"]) == EXIT_OK
        report_path = tmp_path / "r.json"
        assert main(["eval", "--dataset", str(small_dataset), "--checkpoint", str(ckpt),
                     "--out", str(report_path)]) == EXIT_OK
        report = json.loads(report_path.read_text())
        assert 0.0 <= report["map"] <= 1.0

    def test_byte_identical_reports(self, trained, tmp_path):
        dataset, ckpt = trained
        blobs = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                         "--out", str(path)]) == EXIT_OK
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_thread_count_does_not_change_report(self, trained, tmp_path):
        dataset, ckpt = trained
        blobs = []
        for threads in ("1", "4"):
            path = tmp_path / f"r{threads}.json"
            assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                         "--out", str(path), "--threads", threads]) == EXIT_OK
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_both_protocols_present(self, trained, tmp_path):
        dataset, ckpt = trained
        path = tmp_path / "r.json"
        assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(path), "--both"]) == EXIT_OK
        report = json.loads(path.read_text())
        assert "map_area" in report["diagnostics"]
        assert abs(report["map"] - report["diagnostics"]["map_area"]) < 0.2

    def test_pr_csv_dump(self, trained, tmp_path):
        dataset, ckpt = trained
        csv_path = tmp_path / "pr.csv"
        assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "r.json"), "--pr-csv", str(csv_path)]) == EXIT_OK
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "class,rank,score,recall,precision"
        assert len(lines) > 1

    def test_bad_mask_mode_exits_config(self, trained, tmp_path):
        dataset, ckpt = trained
        rc = main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                   "--out", str(tmp_path / "r.json"), "--mask-mode", "sideways"])
        assert rc == EXIT_CONFIG

    def test_dimension_mismatch_exits_data(self, trained, tmp_path):
        dataset, _ = trained
        other = tmp_path / "other.wsdc"
        from wsdsel.trainer import TrainState, save_checkpoint

        params = init_params(5, 2, 0)
        save_checkpoint(TrainState(params=params, velocity=params.zeros_like()), other)
        rc = main(["eval", "--dataset", str(dataset), "--checkpoint", str(other),
                   "--out", str(tmp_path / "r.json")])
        assert rc == EXIT_DATA

    def test_top_mpt_mask_mode_runs(self, trained, tmp_path):
        dataset, ckpt = trained
        path = tmp_path / "r.json"
        assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(ckpt),
                     "--out", str(path), "--mask-mode", "top_mpt", "--top-m", "4"]) == EXIT_OK
        assert 0.0 <= json.loads(path.read_text())["map"] <= 1.0


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck", "--instances", "20"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "max relative error" in out

    def test_degenerate_sizes_pass(self):
        assert main(["gradcheck", "--instances", "5", "--max-regions", "1",
                     "--max-classes", "1", "--max-dim", "1"]) == EXIT_OK

    def test_sign_flip_mutation_fails(self, monkeypatch, capsys):
        real = wsdsel.head.backward_image

        def flipped(trace, params, feats, labels, eps=wsdsel.head.EPS):
            grads = real(trace, params, feats, labels, eps)
            return HeadParams(-grads.w_cls, grads.b_cls, grads.w_imp, grads.b_imp)

        monkeypatch.setattr(wsdsel.head, "backward_image", flipped)
        rc = main(["gradcheck", "--instances", "10"])
        assert rc == EXIT_NUMERIC
        assert "worst" in capsys.readouterr().err


class TestEntryPoint:
    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "wsdsel.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "wsdsel" in proc.stdout

    def test_run_as_module_synth(self, tmp_path):
        out = tmp_path / "ds.json"
        proc = subprocess.run(
            [sys.executable, "-m", "wsdsel.cli", "synth", "--out", str(out), *SMALL_SYNTH],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert out.exists()
