import json
import subprocess
import sys

import numpy as np
import pytest

from lfkm.bitstream import compute_bpp, deserialize, read_header
from lfkm.cli import build_parser, main
from lfkm.lightfield import load_lightfield, make_synthetic_lf, save_lightfield
from lfkm.model import render_all

FAST = ["--cd", "4", "--iterations", "6", "--quant-uses", "5", "--centroids", "32"]


@pytest.fixture
def lf_dir(tmp_path):
    path = tmp_path / "lf"
    save_lightfield(make_synthetic_lf("checkerboard-parallax", 16, 16, 3, 3, 1, period=8), path)
    return path


@pytest.fixture
def encoded(lf_dir, tmp_path, capsys):
    out = tmp_path / "m.lfkm"
    assert main(["encode", "--input", str(lf_dir), "--output", str(out), *FAST]) == 0
    return out, capsys.readouterr().out


class TestParser:
    def test_encode_defaults(self):
        args = build_parser().parse_args(["encode", "--input", "a", "--output", "b"])
        assert (args.cm, args.cd, args.rank, args.centroids, args.epochs, args.lr) == (2, 48, 6, 256, 12, 0.01)
        assert not (args.no_alloc or args.no_decomp or args.skip_quant)


class TestEncode:
    def test_outputs(self, encoded):
        out, stdout = encoded
        assert "bpp" in stdout and "mean PSNR" in stdout
        manifest = json.loads(out.with_name("m.lfkm.json").read_text())
        assert manifest["command"] == "encode"
        assert manifest["bpp"] == compute_bpp(out.read_bytes(), 16, 16, 3, 3)
        assert manifest["config"]["c_d"] == 4

    def test_reproducible_from_manifest(self, encoded, tmp_path):
        out, _ = encoded
        manifest = json.loads(out.with_name("m.lfkm.json").read_text())
        argv = list(manifest["argv"])
        argv[argv.index("--output") + 1] = str(tmp_path / "again.lfkm")
        assert main(argv) == 0
        assert (tmp_path / "again.lfkm").read_bytes() == out.read_bytes()

    def test_skip_quant_is_larger(self, encoded, lf_dir, tmp_path):
        out, _ = encoded
        raw = tmp_path / "raw.lfkm"
        assert main(["encode", "--input", str(lf_dir), "--output", str(raw), "--skip-quant", *FAST]) == 0
        assert read_header(raw.read_bytes())[1]
        assert raw.stat().st_size > out.stat().st_size

    @pytest.mark.parametrize("flags,alloc,decomp", [(["--no-alloc"], False, True),
                                                     (["--no-alloc", "--no-decomp"], False, False)])
    def test_variants(self, lf_dir, tmp_path, flags, alloc, decomp):
        out = tmp_path / "v.lfkm"
        assert main(["encode", "--input", str(lf_dir), "--output", str(out), *flags, *FAST]) == 0
        cfg, _ = read_header(out.read_bytes())
        assert (cfg.allocate_modulators, cfg.decompose_kernels) == (alloc, decomp)

    def test_odd_cm_rejected(self, lf_dir, tmp_path, capsys):
        out = tmp_path / "x.lfkm"
        assert main(["encode", "--input", str(lf_dir), "--output", str(out), "--cm", "3", *FAST]) == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "c_m" in err
        assert not out.exists()
        assert list(tmp_path.glob(".x.lfkm*")) == []

    def test_missing_input(self, tmp_path, capsys):
        assert main(["encode", "--input", str(tmp_path / "none"), "--output", str(tmp_path / "o.lfkm")]) == 1
        assert "error" in capsys.readouterr().err


class TestDecodeEval:
    def test_decode(self, encoded, tmp_path):
        out, _ = encoded
        assert main(["decode", "--model", str(out), "--output", str(tmp_path / "d1")]) == 0
        assert main(["decode", "--model", str(out), "--output", str(tmp_path / "d2")]) == 0
        files = sorted(p.name for p in (tmp_path / "d1").iterdir())
        assert len(files) == 9
        for name in files:
            assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()
        renders = render_all(deserialize(out.read_bytes()).to_bank())
        decoded = load_lightfield(tmp_path / "d1")
        np.testing.assert_array_equal(decoded.views, np.round(renders * 255) / 255)

    def test_eval(self, encoded, lf_dir, tmp_path, capsys):
        out, stdout = encoded
        report = tmp_path / "r.csv"
        maps = tmp_path / "maps"
        assert main(["eval", "--model", str(out), "--reference", str(lf_dir), "--report", str(report),
                     "--error-maps", str(maps)]) == 0
        encode_psnr = json.loads(out.with_name("m.lfkm.json").read_text())["mean_psnr"]
        lines = report.read_text().splitlines()
        assert len(lines) == 1 + 9 + 1
        summary = dict(kv.split("=") for kv in lines[-1].split(",")[2].split(";"))
        assert abs(float(summary["mean"]) - encode_psnr) < 1e-6
        assert float(summary["bpp"]) == pytest.approx(compute_bpp(out.read_bytes(), 16, 16, 3, 3), rel=1e-8)
        assert (maps / "error_map.png").exists() and len(list(maps.iterdir())) == 10

    def test_eval_extent_mismatch(self, encoded, tmp_path):
        out, _ = encoded
        save_lightfield(make_synthetic_lf("gradient", 8, 8, 3, 3), tmp_path / "small")
        assert main(["eval", "--model", str(out), "--reference", str(tmp_path / "small")]) == 1

    def test_corrupt_model(self, encoded, tmp_path, capsys):
        out, _ = encoded
        data = bytearray(out.read_bytes())
        data[len(data) // 2] ^= 0xFF
        bad = tmp_path / "bad.lfkm"
        bad.write_bytes(bytes(data))
        assert main(["decode", "--model", str(bad), "--output", str(tmp_path / "never")]) == 1
        assert "FormatError" in capsys.readouterr().err
        assert not (tmp_path / "never").exists()

    def test_info(self, encoded, capsys):
        out, _ = encoded
        assert main(["info", "--model", str(out)]) == 0
        text = capsys.readouterr().out
        assert "c_m=2 c_d=4" in text and "bpp" in text


class TestTransferCommand:
    def test_transfer(self, tmp_path, capsys):
        for variant in (0, 1):
            lf = make_synthetic_lf("checkerboard-parallax", 16, 16, 5, 5, 1, period=8, variant=variant)
            save_lightfield(lf, tmp_path / f"l{variant}")
        model = tmp_path / "p.lfkm"
        assert main(["encode", "--input", str(tmp_path / "l0"), "--output", str(model), "--skip-quant",
                     "--cd", "4", "--iterations", "5"]) == 0
        report = tmp_path / "t.csv"
        assert main(["transfer", "--pretrained", str(model), "--target", str(tmp_path / "l1"), "--subset", "9",
                     "--output", str(report), "--iterations", "3"]) == 0
        assert "uninvolved mean" in capsys.readouterr().out
        assert len(report.read_text().splitlines()) == 27
        assert json.loads(report.with_name("t.csv.json").read_text())["frozen_modulators"] == "verified"

    def test_transfer_mismatch(self, encoded, tmp_path):
        out, _ = encoded
        save_lightfield(make_synthetic_lf("gradient", 16, 16, 5, 5), tmp_path / "t5")
        assert main(["transfer", "--pretrained", str(out), "--target", str(tmp_path / "t5"),
                     "--output", str(tmp_path / "r.csv")]) == 1
        assert not (tmp_path / "r.csv").exists()


def test_module_entry_point_with_thread_limit(encoded):
    out, _ = encoded
    proc = subprocess.run([sys.executable, "-m", "lfkm", "info", "--model", str(out)], capture_output=True,
                          text=True, env={"LFKM_NUM_THREADS": "1", "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert "extents" in proc.stdout
