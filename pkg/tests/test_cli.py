"""End-to-end runs of the command-line pipeline."""

import json
import shutil
import subprocess

import numpy as np
import pytest

from vrvq import (
    FeatureSequence,
    SweepPoint,
    load_features,
    load_importance_net,
    load_masker,
    load_model,
    read_rd_curve,
    rvq_decode,
    save_wav,
    vrvq_encode,
    write_rd_csv,
)
from vrvq.cli import dispatch
from vrvq.features import AudioClip


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full run: synthetic data, training, encode/decode, reports."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    paths = {
        "root": root,
        "data": data,
        "model": root / "model.vrqm",
        "model_b": root / "model_b.vrqm",
        "net": root / "net.vimp",
        "trace": root / "trace.csv",
        "clean0": data / "clean_0000.vfea",
        "vbr": root / "clean0_vbr.vrvb",
        "cbr": root / "clean0_cbr.vrvb",
        "recon": root / "recon.vfea",
        "sweep": root / "sweep.csv",
        "impmap": root / "impmap.csv",
    }

    def run(*argv):
        rc = dispatch(list(argv))
        assert rc == 0, f"command failed: {argv}"

    run("synth", "--out", str(data), "--pairs", "6", "--frames", "24",
        "--dim", "8", "--seed", "11")
    run("train-codebooks", "--data", str(data), "--stages", "4", "--bits", "4",
        "--out", str(paths["model"]), "--seed", "0")
    run("train-codebooks", "--data", str(data), "--use", "noisy", "--stages", "4",
        "--bits", "4", "--out", str(paths["model_b"]), "--seed", "1")
    run("train-importance", "--model", str(paths["model"]), "--data", str(data),
        "--hidden", "8", "--iters", "12", "--batch", "4", "--seed", "0",
        "--out", str(paths["net"]), "--trace", str(paths["trace"]))
    run("encode", "--model", str(paths["model"]), "--net", str(paths["net"]),
        "--mode", "vbr", "--scale", "4.2", "--in", str(paths["clean0"]),
        "--out", str(paths["vbr"]))
    run("encode", "--model", str(paths["model"]), "--mode", "cbr", "--nq", "2",
        "--in", str(paths["clean0"]), "--out", str(paths["cbr"]))
    run("decode", "--model", str(paths["model"]), "--in", str(paths["vbr"]),
        "--out", str(paths["recon"]))
    run("sweep", "--model", str(paths["model"]), "--net", str(paths["net"]),
        "--data", str(data), "--scales", "1.6,6.0,18.1", "--depths", "1,2,4",
        "--label", "pipe", "--out", str(paths["sweep"]))
    run("impmap", "--model", str(paths["model"]), "--net", str(paths["net"]),
        "--scale", "6.0", "--in", str(paths["clean0"]), "--out", str(paths["impmap"]))
    return paths


class TestPipelineArtifacts:
    def test_synth_layout_and_determinism(self, pipeline, synth_pairs):
        files = sorted(p.name for p in pipeline["data"].iterdir())
        assert files[:2] == ["clean_0000.vfea", "clean_0001.vfea"]
        assert len(files) == 12
        # same spec and seed as the in-process fixture, so the contents agree
        loaded = load_features(pipeline["clean0"])
        expected = synth_pairs[0][0].data.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(loaded.data, expected)

    def test_trained_model_geometry(self, pipeline):
        model = load_model(pipeline["model"])
        assert model.n_stages == 4
        assert model.codebook_size == 16
        assert model.dim == 8
        assert load_model(pipeline["model_b"]).fingerprint != model.fingerprint

    def test_training_is_repeatable(self, pipeline, tmp_path):
        out = tmp_path / "again.vrqm"
        rc = dispatch(["train-codebooks", "--data", str(pipeline["data"]),
                       "--stages", "4", "--bits", "4", "--out", str(out), "--seed", "0"])
        assert rc == 0
        assert out.read_bytes() == pipeline["model"].read_bytes()

    def test_importance_trace_rows(self, pipeline):
        lines = pipeline["trace"].read_text().strip().splitlines()
        assert lines[0].startswith("iteration,loss")
        assert len(lines) == 13

    def test_encode_is_byte_stable(self, pipeline, tmp_path):
        out = tmp_path / "again.vrvb"
        rc = dispatch(["encode", "--model", str(pipeline["model"]),
                       "--net", str(pipeline["net"]), "--mode", "vbr", "--scale", "4.2",
                       "--in", str(pipeline["clean0"]), "--out", str(out)])
        assert rc == 0
        assert out.read_bytes() == pipeline["vbr"].read_bytes()

    def test_decode_matches_library_route(self, pipeline):
        model = load_model(pipeline["model"])
        net = load_importance_net(pipeline["net"])
        seq = load_features(pipeline["clean0"])
        enc = vrvq_encode(model, net, seq, 4.2)
        recon = rvq_decode(model, enc.codes, enc.depths)
        loaded = load_features(pipeline["recon"])
        np.testing.assert_array_equal(
            loaded.data, recon.astype(np.float32).astype(np.float64)
        )
        assert loaded.frame_rate == seq.frame_rate

    def test_stream_sizes_follow_the_header_arithmetic(self, pipeline):
        # 30-byte header plus one fixed-depth byte, then 24 frames x 2 stages
        # x 4 bits = 24 payload bytes
        assert pipeline["cbr"].stat().st_size == 31 + 24
        assert pipeline["cbr"].read_bytes()[:4] == b"VRVQ"
        assert pipeline["vbr"].read_bytes()[:4] == b"VRVQ"

    def test_sweep_csv_reads_back(self, pipeline):
        cbr = read_rd_curve(pipeline["sweep"], "si_sdr", "pipe:cbr")
        assert len(cbr.bitrates) == 3
        assert np.all(np.diff(cbr.bitrates) > 0)
        vbr = read_rd_curve(pipeline["sweep"], "si_sdr", "pipe:vbr")
        assert len(vbr.bitrates) >= 2

    def test_impmap_header_and_rows(self, pipeline):
        lines = pipeline["impmap"].read_text().strip().splitlines()
        assert lines[0].startswith("# mean_bitrate_kbps=")
        assert lines[1] == "frame,importance,depth"
        assert len(lines) == 2 + 24


class TestDenoiserCommands:
    def test_finetune_and_masked_encode(self, pipeline, tmp_path):
        net2 = tmp_path / "net2.vimp"
        masker = tmp_path / "masker.vdnz"
        trace = tmp_path / "ft.csv"
        rc = dispatch(["finetune-denoiser", "--model", str(pipeline["model"]),
                       "--net", str(pipeline["net"]), "--data", str(pipeline["data"]),
                       "--hidden", "4", "--iters", "4", "--batch", "2",
                       "--out-net", str(net2), "--out-masker", str(masker),
                       "--trace", str(trace), "--seed", "0"])
        assert rc == 0
        assert load_masker(masker).dim == 8
        assert load_importance_net(net2).dim == 8
        lines = trace.read_text().strip().splitlines()
        assert lines[0] == "iteration,loss,distortion,rate,guidance,mean_depth"
        assert len(lines) == 5

        masked = tmp_path / "masked.vrvb"
        rc = dispatch(["encode", "--model", str(pipeline["model"]),
                       "--net", str(net2), "--masker", str(masker),
                       "--mode", "vbr", "--scale", "4.2",
                       "--in", str(pipeline["clean0"]), "--out", str(masked)])
        assert rc == 0
        assert masked.read_bytes() != pipeline["vbr"].read_bytes()

    def test_noisy_input_sweep(self, pipeline, tmp_path):
        out = tmp_path / "noisy_sweep.csv"
        rc = dispatch(["sweep", "--model", str(pipeline["model"]),
                       "--data", str(pipeline["data"]), "--noisy-input",
                       "--depths", "1,4", "--label", "noisy", "--out", str(out)])
        assert rc == 0
        curve = read_rd_curve(out, "mse", "noisy:cbr")
        assert len(curve.bitrates) == 2


class TestAudioCommands:
    @pytest.fixture()
    def wavs(self, tmp_path):
        rng = np.random.default_rng(40)
        t = np.arange(16000) / 16000.0
        speech = 0.4 * np.sin(2 * np.pi * 220 * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t))
        noise = 0.2 * rng.standard_normal(16000)
        clean = tmp_path / "clean.wav"
        noisewav = tmp_path / "noise.wav"
        save_wav(AudioClip(speech, 16000), clean)
        save_wav(AudioClip(np.clip(noise, -1, 1), 16000), noisewav)
        return clean, noisewav

    def test_mix_then_features(self, wavs, tmp_path):
        clean, noise = wavs
        mixed = tmp_path / "mixed.wav"
        rc = dispatch(["mix", "--clean", str(clean), "--noise", str(noise),
                       "--snr", "5", "--out", str(mixed), "--seed", "1"])
        assert rc == 0
        feats = tmp_path / "mixed.vfea"
        rc = dispatch(["features", "--in", str(mixed), "--out", str(feats),
                       "--window", "256", "--hop", "128", "--mel", "20", "--dim", "10"])
        assert rc == 0
        seq = load_features(feats)
        assert seq.dim == 10
        assert seq.frames == (16000 - 256) // 128 + 1
        assert (seq.frame_rate_num, seq.frame_rate_den) == (16000, 128)

    def test_features_with_fixed_stats(self, wavs, tmp_path):
        clean, _ = wavs
        stats = tmp_path / "stats.json"
        stats.write_text(json.dumps({"mean": [1.0] * 10, "scale": [2.0] * 10}))
        plain = tmp_path / "plain.vfea"
        fixed = tmp_path / "fixed.vfea"
        for out, extra in ((plain, []), (fixed, ["--stats", str(stats)])):
            rc = dispatch(["features", "--in", str(clean), "--out", str(out),
                           "--window", "256", "--hop", "128", "--mel", "20",
                           "--dim", "10", *extra])
            assert rc == 0
        raw = load_features(plain).data
        standardized = load_features(fixed).data
        np.testing.assert_allclose(standardized, (raw - 1.0) / 2.0, rtol=1e-5, atol=1e-6)


class TestBdRateCommand:
    def _write_curves(self, tmp_path):
        ref = tmp_path / "ref.csv"
        test = tmp_path / "test.csv"
        points = [
            SweepPoint("cbr", d, rate, {"si_sdr": q})
            for d, rate, q in ((1, 1.0, 8.0), (2, 2.0, 14.0), (3, 4.0, 19.0))
        ]
        doubled = [
            SweepPoint("cbr", p.setting, 2 * p.bitrate_kbps, dict(p.metrics))
            for p in points
        ]
        write_rd_csv(points, "ref", ref)
        write_rd_csv(doubled, "test", test)
        return ref, test

    def test_doubled_curve_reports_plus_hundred(self, tmp_path):
        ref, test = self._write_curves(tmp_path)
        out = tmp_path / "report.json"
        rc = dispatch(["bdrate", "--ref", str(ref), "--test", str(test),
                       "--ref-label", "ref:cbr", "--test-label", "test:cbr",
                       "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["bd_rate_percent"] == pytest.approx(100.0, abs=1e-6)
        assert report["metric"] == "si_sdr"

    def test_report_goes_to_stdout_without_out(self, tmp_path, capsys):
        ref, test = self._write_curves(tmp_path)
        rc = dispatch(["bdrate", "--ref", str(ref), "--test", str(test)])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["bd_rate_percent"] == pytest.approx(100.0, abs=1e-6)

    def test_disjoint_curves_fail_cleanly(self, tmp_path, capsys):
        # quality ranges that never meet, so there is nothing to compare over
        ref = tmp_path / "ref.csv"
        test = tmp_path / "test.csv"
        write_rd_csv(
            [SweepPoint("cbr", d, r, {"si_sdr": q})
             for d, r, q in ((1, 1.0, 5.0), (2, 2.0, 9.0))], "a", ref)
        write_rd_csv(
            [SweepPoint("cbr", d, r, {"si_sdr": q})
             for d, r, q in ((1, 1.0, 20.0), (2, 2.0, 30.0))], "b", test)
        rc = dispatch(["bdrate", "--ref", str(ref), "--test", str(test)])
        assert rc == 1
        assert "overlap" in capsys.readouterr().err


class TestErrorHandling:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert dispatch(["frobnicate"]) == 2
        capsys.readouterr()

    def test_missing_required_flag(self, capsys):
        assert dispatch(["decode", "--model", "m.vrqm"]) == 2
        capsys.readouterr()

    def test_vbr_without_net_is_usage_error(self, pipeline, capsys):
        rc = dispatch(["encode", "--model", str(pipeline["model"]), "--mode", "vbr",
                       "--scale", "4.0", "--in", str(pipeline["clean0"]),
                       "--out", "/tmp/never.vrvb"])
        assert rc == 2
        assert "requires --net" in capsys.readouterr().err

    def test_cbr_without_depth_is_usage_error(self, pipeline, capsys):
        rc = dispatch(["encode", "--model", str(pipeline["model"]), "--mode", "cbr",
                       "--in", str(pipeline["clean0"]), "--out", "/tmp/never.vrvb"])
        assert rc == 2
        assert "requires --nq" in capsys.readouterr().err

    def test_bad_scale_list_rejected(self, pipeline, capsys):
        rc = dispatch(["sweep", "--model", str(pipeline["model"]),
                       "--data", str(pipeline["data"]), "--scales", "1.6,abc",
                       "--out", "/tmp/never.csv"])
        assert rc == 2
        capsys.readouterr()

    def test_missing_input_is_runtime_error(self, pipeline, capsys):
        rc = dispatch(["decode", "--model", str(pipeline["model"]),
                       "--in", "/nonexistent/stream.vrvb", "--out", "/tmp/never.vfea"])
        assert rc == 1
        capsys.readouterr()

    def test_fingerprint_mismatch_fails_decode(self, pipeline, tmp_path, capsys):
        rc = dispatch(["decode", "--model", str(pipeline["model_b"]),
                       "--in", str(pipeline["vbr"]), "--out", str(tmp_path / "x.vfea")])
        assert rc == 1
        assert "fingerprint" in capsys.readouterr().err

    def test_truncated_stream_fails_decode(self, pipeline, tmp_path, capsys):
        broken = tmp_path / "broken.vrvb"
        broken.write_bytes(pipeline["vbr"].read_bytes()[:-3])
        rc = dispatch(["decode", "--model", str(pipeline["model"]),
                       "--in", str(broken), "--out", str(tmp_path / "x.vfea")])
        assert rc == 1
        capsys.readouterr()

    def test_empty_data_directory(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = dispatch(["train-codebooks", "--data", str(empty), "--out",
                       str(tmp_path / "m.vrqm")])
        assert rc == 1
        assert "clean_" in capsys.readouterr().err


class TestConfigFile:
    def test_config_sets_defaults_and_flags_win(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("# defaults\nframes = 10\npairs = 2\ndim = 4\n")
        out_a = tmp_path / "a"
        rc = dispatch(["synth", "--out", str(out_a), "--config", str(cfg)])
        assert rc == 0
        seq = load_features(out_a / "clean_0000.vfea")
        assert seq.frames == 10 and seq.dim == 4
        assert len(list(out_a.iterdir())) == 4

        out_b = tmp_path / "b"
        rc = dispatch(["synth", "--out", str(out_b), "--config", str(cfg),
                       "--frames", "12"])
        assert rc == 0
        assert load_features(out_b / "clean_0000.vfea").frames == 12

    def test_config_booleans(self, tmp_path, capsys):
        cfg = tmp_path / "v.cfg"
        cfg.write_text("verbose = true\npairs = 1\nframes = 8\ndim = 4\n")
        rc = dispatch(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert rc == 0
        assert "wrote" in capsys.readouterr().err

        cfg.write_text("verbose = false\npairs = 1\nframes = 8\ndim = 4\n")
        rc = dispatch(["synth", "--out", str(tmp_path / "e"), "--config", str(cfg)])
        assert rc == 0
        assert capsys.readouterr().err == ""

    def test_malformed_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("frames 10\n")
        rc = dispatch(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert rc == 2
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_config_cannot_nest(self, tmp_path, capsys):
        cfg = tmp_path / "nest.cfg"
        cfg.write_text(f"config = {cfg}\n")
        rc = dispatch(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)])
        assert rc == 2
        assert "nest" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        rc = dispatch(["synth", "--out", str(tmp_path / "d"),
                       "--config", str(tmp_path / "absent.cfg")])
        assert rc == 2
        capsys.readouterr()


class TestEntryPoints:
    def test_help_exits_zero(self):
        assert dispatch(["--help"]) == 0

    def test_no_arguments_is_usage_error(self):
        assert dispatch([]) == 2

    def test_console_script_is_installed(self):
        exe = shutil.which("vrvq")
        assert exe is not None
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "encode" in proc.stdout
