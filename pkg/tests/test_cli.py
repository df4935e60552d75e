import json

import numpy as np
import pytest

from s2wmamba.branches import bicubic_upsample
from s2wmamba.cli import main
from s2wmamba.dataset import read_image, write_image
from s2wmamba.network import ModelConfig, S2WMambaNet, save_checkpoint, zero_residual_path


def _kv_lines(captured: str) -> dict:
    out = {}
    for line in captured.splitlines():
        if "=" in line and not line.startswith("manifest="):
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _gen(tmp_path, name="data", **overrides):
    args = {"bands": 4, "size": 8, "count": 3, "ratio": 2, "seed": 11}
    args.update(overrides)
    out = tmp_path / name
    rc = main(
        [
            "gen",
            "--bands", str(args["bands"]),
            "--size", str(args["size"]),
            "--count", str(args["count"]),
            "--ratio", str(args["ratio"]),
            "--seed", str(args["seed"]),
            "--out", str(out),
        ]
    )
    assert rc == 0
    return out


class TestGen:
    def test_writes_triplets_and_manifest(self, tmp_path):
        out = _gen(tmp_path, bands=8, size=16, count=4, ratio=4)
        gts = sorted((out / "train").glob("*.gt.s2wt"))
        assert len(gts) == 4
        gt = read_image(gts[0])
        lrms = read_image(out / "train" / "00000.lrms.s2wt")
        pan = read_image(out / "train" / "00000.pan.s2wt")
        assert gt.shape == (8, 16, 16)
        assert lrms.shape == (8, 4, 4)
        assert pan.shape == (1, 16, 16)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 11

    def test_four_band_variant(self, tmp_path):
        out = _gen(tmp_path, bands=4, size=8, ratio=2)
        assert read_image(out / "train" / "00000.gt.s2wt").shape == (4, 8, 8)

    def test_same_seed_identical_files(self, tmp_path):
        a = _gen(tmp_path, name="a")
        b = _gen(tmp_path, name="b")
        for name in ("00000.gt.s2wt", "00001.lrms.s2wt", "00002.pan.s2wt"):
            assert (a / "train" / name).read_bytes() == (b / "train" / name).read_bytes()

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("S2W_SEED", "11")
        implicit = tmp_path / "env"
        assert main(["gen", "--bands", "4", "--size", "8", "--count", "1", "--ratio", "2", "--out", str(implicit)]) == 0
        explicit = _gen(tmp_path, name="explicit", count=1)
        assert (implicit / "train" / "00000.gt.s2wt").read_bytes() == (
            explicit / "train" / "00000.gt.s2wt"
        ).read_bytes()

    def test_bad_ratio_is_usage_error(self, tmp_path):
        rc = main(["gen", "--bands", "4", "--size", "8", "--count", "1", "--ratio", "3", "--out", str(tmp_path / "x")])
        assert rc == 1


class TestTrain:
    def test_default_lr_is_4e_minus_4(self):
        from s2wmamba.cli import _build_parser

        args = _build_parser().parse_args(["train", "--data", "d", "--ckpt", "c"])
        assert args.lr == 4e-4

    def test_zero_steps_writes_initial_checkpoint(self, tmp_path, capsys):
        data = _gen(tmp_path)
        ckpt = tmp_path / "init.s2wc"
        rc = main(
            ["train", "--data", str(data), "--steps", "0", "--width", "4", "--d-state", "2",
             "--seed", "1", "--ckpt", str(ckpt)]
        )
        assert rc == 0
        assert ckpt.exists()
        out = capsys.readouterr().out
        assert "params=" in out
        step_lines = [l for l in out.splitlines() if l.strip() and l.split()[0].isdigit()]
        assert step_lines == []

    def test_short_run_trains_and_logs(self, tmp_path, capsys):
        data = _gen(tmp_path)
        ckpt = tmp_path / "m.s2wc"
        rc = main(
            ["train", "--data", str(data), "--steps", "3", "--batch", "2", "--width", "4",
             "--d-state", "2", "--patch", "8", "--seed", "2", "--ckpt", str(ckpt)]
        )
        assert rc == 0
        out = capsys.readouterr().out
        step_lines = [l for l in out.splitlines() if l.strip() and l.split()[0].isdigit()]
        assert len(step_lines) == 3
        assert (tmp_path / "m.s2wc.manifest.json").exists()

    def test_ablation_flag(self, tmp_path):
        data = _gen(tmp_path)
        ckpt = tmp_path / "crm.s2wc"
        rc = main(
            ["train", "--data", str(data), "--steps", "1", "--batch", "1", "--width", "4",
             "--d-state", "2", "--patch", "8", "--seed", "3", "--ablation", "CRM", "--ckpt", str(ckpt)]
        )
        assert rc == 0
        from s2wmamba.network import load_checkpoint

        assert load_checkpoint(ckpt).config.variant == "CRM"

    def test_missing_data_dir(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "none"), "--ckpt", str(tmp_path / "x.s2wc")])
        assert rc == 2


class TestFuse:
    def _ckpt_and_inputs(self, tmp_path, zero_residual=False):
        model = S2WMambaNet(ModelConfig(c=4, r=2, width=4, d_state=2), seed=4)
        if zero_residual:
            zero_residual_path(model)
        ckpt = tmp_path / "f.s2wc"
        save_checkpoint(model, ckpt)
        gen = np.random.default_rng(5)
        pan = gen.uniform(size=(1, 8, 8)).astype(np.float32)
        lrms = gen.uniform(size=(4, 4, 4)).astype(np.float32)
        write_image(tmp_path / "pan.s2wt", pan)
        write_image(tmp_path / "lrms.s2wt", lrms)
        return ckpt, tmp_path / "pan.s2wt", tmp_path / "lrms.s2wt"

    def test_zero_residual_equals_bicubic(self, tmp_path):
        ckpt, pan, lrms = self._ckpt_and_inputs(tmp_path, zero_residual=True)
        out = tmp_path / "fused.s2wt"
        assert main(["fuse", "--ckpt", str(ckpt), "--pan", str(pan), "--lrms", str(lrms), "--out", str(out)]) == 0
        fused = read_image(out)
        expected = bicubic_upsample(read_image(lrms).astype(np.float64), 2).astype(np.float32)
        assert np.array_equal(fused, expected)

    def test_output_shape_and_rerun_determinism(self, tmp_path):
        ckpt, pan, lrms = self._ckpt_and_inputs(tmp_path)
        out1 = tmp_path / "a.s2wt"
        out2 = tmp_path / "b.s2wt"
        assert main(["fuse", "--ckpt", str(ckpt), "--pan", str(pan), "--lrms", str(lrms), "--out", str(out1)]) == 0
        assert main(["fuse", "--ckpt", str(ckpt), "--pan", str(pan), "--lrms", str(lrms), "--out", str(out2)]) == 0
        assert read_image(out1).shape == (4, 8, 8)
        assert out1.read_bytes() == out2.read_bytes()

    def test_shape_mismatch_is_data_error(self, tmp_path):
        ckpt, pan, _ = self._ckpt_and_inputs(tmp_path)
        write_image(tmp_path / "badlrms.s2wt", np.zeros((4, 3, 3), dtype=np.float32))
        rc = main(["fuse", "--ckpt", str(ckpt), "--pan", str(pan), "--lrms", str(tmp_path / "badlrms.s2wt"),
                   "--out", str(tmp_path / "o.s2wt")])
        assert rc == 2

    def test_preview_written(self, tmp_path):
        ckpt, pan, lrms = self._ckpt_and_inputs(tmp_path)
        out = tmp_path / "p.s2wt"
        pgm = tmp_path / "p.pgm"
        assert main(["fuse", "--ckpt", str(ckpt), "--pan", str(pan), "--lrms", str(lrms),
                     "--out", str(out), "--preview", str(pgm)]) == 0
        assert pgm.read_bytes().startswith(b"P5\n")


class TestEval:
    def test_reduced_mode_perfect_prediction(self, tmp_path, capsys):
        img = np.random.default_rng(6).uniform(0.1, 0.9, size=(4, 16, 16)).astype(np.float32)
        write_image(tmp_path / "pred.s2wt", img)
        write_image(tmp_path / "gt.s2wt", img)
        rc = main(["eval", "--pred", str(tmp_path / "pred.s2wt"), "--gt", str(tmp_path / "gt.s2wt")])
        assert rc == 0
        kv = _kv_lines(capsys.readouterr().out)
        assert kv["psnr"] == "inf"
        assert float(kv["sam"]) == 0.0
        assert float(kv["ergas"]) == 0.0
        assert float(kv["q2n"]) == pytest.approx(1.0, abs=1e-9)

    def test_full_mode_composition(self, tmp_path, capsys):
        from s2wmamba.dataset import SceneSpec, generate_scenes, wald_degrade

        gt = generate_scenes(SceneSpec(c=4, size=32, count=1, seed=7))[0]
        t = wald_degrade(gt, 4)
        fused = bicubic_upsample(t.lrms, 4)
        write_image(tmp_path / "fused.s2wt", fused.astype(np.float32))
        write_image(tmp_path / "lrms.s2wt", t.lrms.astype(np.float32))
        write_image(tmp_path / "pan.s2wt", t.pan.astype(np.float32))
        rc = main(["eval", "--fused", str(tmp_path / "fused.s2wt"), "--lrms", str(tmp_path / "lrms.s2wt"),
                   "--pan", str(tmp_path / "pan.s2wt")])
        assert rc == 0
        kv = _kv_lines(capsys.readouterr().out)
        dl, ds, hq = float(kv["d_lambda"]), float(kv["d_s"]), float(kv["hqnr"])
        assert round((1 - dl) * (1 - ds), 3) == round(hq, 3)

    def test_mode_conflict_is_usage_error(self, tmp_path):
        assert main(["eval", "--pred", "x", "--fused", "y"]) == 1
        assert main(["eval"]) == 1

    def test_malformed_file_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.s2wt"
        bad.write_bytes(b"JUNKJUNKJUNK")
        ok = tmp_path / "ok.s2wt"
        write_image(ok, np.ones((2, 4, 4), dtype=np.float32))
        assert main(["eval", "--pred", str(bad), "--gt", str(ok)]) == 2

    def test_missing_counterpart(self, tmp_path):
        ok = tmp_path / "ok.s2wt"
        write_image(ok, np.ones((2, 4, 4), dtype=np.float32))
        assert main(["eval", "--pred", str(ok)]) == 1


class TestBenchAndDwt:
    def test_bench_scan_table(self, capsys):
        rc = main(["bench", "--op", "scan", "--sizes", "128,256", "--repeats", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "N" in out and "seconds" in out
        rows = [l for l in out.splitlines() if l.strip() and l.split()[0].isdigit()]
        assert len(rows) == 2

    def test_bench_dwt_table(self, capsys):
        rc = main(["bench", "--op", "dwt", "--sizes", "16,32", "--repeats", "1"])
        assert rc == 0
        rows = [l for l in capsys.readouterr().out.splitlines() if l.strip() and l.split()[0].isdigit()]
        assert len(rows) == 2

    def test_bench_bad_sizes(self):
        assert main(["bench", "--op", "scan", "--sizes", "abc"]) == 1

    def test_dwt_2d_roundtrip(self, tmp_path, capsys):
        img = np.random.default_rng(8).uniform(size=(2, 16, 16)).astype(np.float32)
        path = tmp_path / "img.s2wt"
        write_image(path, img)
        rc = main(["dwt", "--mode", "2d", "--in", str(path), "--roundtrip"])
        assert rc == 0
        kv = _kv_lines(capsys.readouterr().out)
        assert float(kv["roundtrip_max_error"]) < 1e-5

    def test_dwt_1d_constant_spectrum(self, tmp_path, capsys):
        band = np.random.default_rng(9).uniform(size=(1, 8, 8)).astype(np.float32)
        img = np.tile(band, (4, 1, 1))
        path = tmp_path / "const.s2wt"
        write_image(path, img)
        rc = main(["dwt", "--mode", "1d", "--in", str(path)])
        assert rc == 0
        kv = _kv_lines(capsys.readouterr().out)
        assert float(kv["h_band_max_abs"]) == 0.0

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["dwt", "--mode", "2d", "--in", str(tmp_path / "none.s2wt")]) == 2


class TestUsage:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["gen", "--bands", "4"]) == 1
