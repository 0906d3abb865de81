"""End-to-end command tests driven through main(argv).

Exit-code contract: 0 success, 1 usage, 2 validation, 3 I/O.
"""

import numpy as np
import pytest

from etide.cli import main
from etide.events import read_ocm
from etide.losses import LossConfig
from etide.model import ModelConfig, init_params, save_checkpoint
from etide.training import (SequenceDataset, TrainConfig, load_dataset,
                            make_moving_bar_dataset, save_dataset,
                            train_config_to_text)

MODEL = dict(t_in=3, t_out=3, height=16, width=16, c_step=2, n_blocks=1,
             enc_widths=(4,), dec_widths=(8, 4), droppath_rate=0.0)


def model_cfg(**overrides):
    return ModelConfig(**{**MODEL, **overrides})


def write_train_config(path, **overrides):
    base = dict(epochs=1, batch_size=2, seed=0, val_split=0.25,
                model=model_cfg(), loss=LossConfig(alpha_ddr=0.1))
    base.update(overrides)
    path.write_text(train_config_to_text(TrainConfig(**base)))
    return path


def synth_args(out, n, frames=3, size="16x16", seed=0):
    return ["synth", "--out", str(out), "--sequences", str(n),
            "--frames", str(frames), "--size", size, "--seed", str(seed)]


class TestUsageErrors:
    def test_no_command(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as err:
            main(["explode"])
        assert err.value.code == 1

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--sequences", "2"])
        assert err.value.code == 1


class TestSynth:
    def test_writes_pairs_and_manifest(self, tmp_path):
        out = tmp_path / "data"
        assert main(synth_args(out, 3)) == 0
        rows = (out / "manifest.txt").read_text().splitlines()
        assert len(rows) == 3
        ds = load_dataset(out)
        assert len(ds) == 3
        assert ds.inputs.shape == (3, 3, 2, 16, 16)

    def test_zero_sequences(self, tmp_path):
        out = tmp_path / "data"
        assert main(synth_args(out, 0)) == 0
        assert (out / "manifest.txt").read_text() == ""

    def test_seed_reproducible_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(synth_args(a, 2, seed=9)) == 0
        assert main(synth_args(b, 2, seed=9)) == 0
        for name in ("seq_00000_in.ocm1", "seq_00001_tgt.ocm1",
                     "manifest.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_bad_size_is_validation_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"),
                     "--sequences", "1", "--size", "16by16"]) == 2

    def test_bad_objects_range(self, tmp_path):
        assert main(synth_args(tmp_path / "d", 1)
                    + ["--objects", "5-2"]) == 2


class TestTrain:
    def test_missing_data_dir(self, tmp_path, capsys):
        cfg = write_train_config(tmp_path / "cfg.txt")
        code = main(["train", "--data", str(tmp_path / "nope"),
                     "--config", str(cfg), "--out",
                     str(tmp_path / "m.etw")])
        assert code == 3
        assert "not found" in capsys.readouterr().err

    def test_trains_and_writes_checkpoint(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(synth_args(data, 4)) == 0
        cfg = write_train_config(tmp_path / "cfg.txt")
        out = tmp_path / "model.etw"
        assert main(["train", "--data", str(data), "--config", str(cfg),
                     "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "epoch=1" in stdout and "train_loss=" in stdout
        assert out.exists() and (tmp_path / "model.etw.opt.npz").exists()
        assert main(["inspect", "--ckpt", str(out)]) == 0

    def test_resume_matches_unbroken(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(synth_args(data, 4)) == 0
        cfg2 = write_train_config(tmp_path / "cfg2.txt", epochs=2)

        out_a = tmp_path / "a" / "model.etw"
        assert main(["train", "--data", str(data), "--config", str(cfg2),
                     "--out", str(out_a)]) == 0
        full_log = capsys.readouterr().out

        cfg1 = write_train_config(tmp_path / "cfg1.txt", epochs=1)
        out_b = tmp_path / "b" / "model.etw"
        assert main(["train", "--data", str(data), "--config", str(cfg1),
                     "--out", str(out_b)]) == 0
        capsys.readouterr()
        out_c = tmp_path / "b" / "resumed.etw"
        assert main(["train", "--data", str(data), "--config", str(cfg2),
                     "--out", str(out_c), "--resume", str(out_b)]) == 0
        resume_log = capsys.readouterr().out

        full_epoch2 = [l for l in full_log.splitlines()
                       if l.startswith("epoch=2")]
        resumed_epoch2 = [l for l in resume_log.splitlines()
                          if l.startswith("epoch=2")]
        assert full_epoch2 and full_epoch2 == resumed_epoch2
        assert (out_a.read_bytes() == out_c.read_bytes())

    def test_resume_config_mismatch(self, tmp_path):
        data = tmp_path / "data"
        assert main(synth_args(data, 2)) == 0
        cfg = write_train_config(tmp_path / "cfg.txt")
        out = tmp_path / "model.etw"
        assert main(["train", "--data", str(data), "--config", str(cfg),
                     "--out", str(out)]) == 0
        other = write_train_config(tmp_path / "other.txt",
                                   model=model_cfg(n_blocks=2))
        assert main(["train", "--data", str(data), "--config", str(other),
                     "--out", str(tmp_path / "x.etw"),
                     "--resume", str(out)]) == 2


class TestPredictEval:
    @pytest.fixture()
    def ckpt(self, tmp_path):
        path = tmp_path / "model.etw"
        save_checkpoint(path, init_params(model_cfg(), seed=0))
        return path

    def test_predict_roundtrip(self, tmp_path, ckpt):
        data = tmp_path / "data"
        assert main(synth_args(data, 1)) == 0
        out = tmp_path / "pred.ocm1"
        assert main(["predict", "--ckpt", str(ckpt),
                     "--in", str(data / "seq_00000_in.ocm1"),
                     "--out", str(out)]) == 0
        occ = read_ocm(out)
        assert occ.frames.shape == (3, 2, 16, 16)
        probs = np.load(str(out) + ".probs.npy")
        assert probs.shape == (3, 2, 16, 16)
        assert probs.dtype == np.float32

    def test_predict_shape_mismatch(self, tmp_path, ckpt):
        data = tmp_path / "data"
        assert main(synth_args(data, 1, size="32x32")) == 0
        assert main(["predict", "--ckpt", str(ckpt),
                     "--in", str(data / "seq_00000_in.ocm1"),
                     "--out", str(tmp_path / "p.ocm1")]) == 2

    def test_predict_missing_input(self, tmp_path, ckpt):
        assert main(["predict", "--ckpt", str(ckpt),
                     "--in", str(tmp_path / "absent.ocm1"),
                     "--out", str(tmp_path / "p.ocm1")]) == 3

    def test_eval_records(self, tmp_path, ckpt, capsys):
        data = tmp_path / "data"
        assert main(synth_args(data, 2)) == 0
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
        out = capsys.readouterr().out
        model_lines = [l for l in out.splitlines() if l.startswith("model ")]
        pers_lines = [l for l in out.splitlines()
                      if l.startswith("persistence ")]
        assert len(model_lines) == 1 and len(pers_lines) == 1
        record = dict(kv.split("=") for kv in model_lines[0].split()[1:])
        assert set(record) == {"iou_on", "iou_off", "miou", "aiou",
                               "mse", "ssim"}
        float(record["aiou"])

    def test_eval_threshold_grid_rows(self, tmp_path, ckpt, capsys):
        data = tmp_path / "data"
        assert main(synth_args(data, 1)) == 0
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                     "--threshold-grid"]) == 0
        grid = [l for l in capsys.readouterr().out.splitlines()
                if l.startswith("grid ")]
        assert len(grid) == 9
        taus = [l.split()[1] for l in grid]
        assert taus == [f"tau={0.1 * i:.1f}" for i in range(1, 10)]

    def test_eval_persistence_perfect_on_static_targets(self, tmp_path, ckpt,
                                                        capsys):
        ds = make_moving_bar_dataset(2, height=16, width=16, t_in=3, t_out=3,
                                     seed=0)
        static = SequenceDataset(ds.inputs,
                                 np.repeat(ds.inputs[:, -1:], 3, axis=1))
        data = tmp_path / "static"
        save_dataset(static, data)
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
        pers = [l for l in capsys.readouterr().out.splitlines()
                if l.startswith("persistence ")][0]
        record = dict(kv.split("=") for kv in pers.split()[1:])
        assert float(record["miou"]) == 1.0
        assert float(record["aiou"]) == 1.0


class TestVerificationCommands:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines()
                 if l.startswith("check=")]
        assert lines and all("status=PASS" in l for l in lines)

    def test_bench_record_line(self, tmp_path, capsys):
        cfg_file = tmp_path / "model.cfg"
        cfg_file.write_text(model_cfg().to_text())
        assert main(["bench", "--config", str(cfg_file),
                     "--iters", "3"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1
        record = dict(kv.split("=") for kv in out[0].split())
        assert set(record) == {"median_ms", "p95_ms", "peak_bytes_estimate",
                               "n_params"}

    def test_inspect_lists_params(self, tmp_path, capsys):
        path = tmp_path / "m.etw"
        model = init_params(model_cfg(), seed=0)
        save_checkpoint(path, model)
        assert main(["inspect", "--ckpt", str(path)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[-1] == f"n_params={sum(p.data.size for p in model.parameters())}"
        assert len(out) == len(model.parameters()) + 1

    def test_inspect_missing_file(self, tmp_path):
        assert main(["inspect", "--ckpt", str(tmp_path / "gone.etw")]) == 3

    def test_inspect_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.etw"
        bad.write_bytes(b"NOPE" + b"\x00" * 32)
        assert main(["inspect", "--ckpt", str(bad)]) == 3
