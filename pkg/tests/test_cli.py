"""End-to-end checks of the command line frontend.

Everything runs in-process through cli.main so exit codes and the
stdout/stderr split are observable without subprocesses.
"""

import json

import numpy as np
import pytest

import colmap_fixtures as cf
from mvsr import cli, colmap_io, synthscene, view_select
from mvsr.cli import main
from mvsr.colmap_io import CameraIntrinsics, CameraPose, PoseManifest


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    scene = synthscene.build_scene(n=6, width=32, height=32, factor=2,
                                   elevation=1.0, seed=4)
    synthscene.write_scene(scene, d)
    return d


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    code = main(["train", "--scene", str(scene_dir), "--iters", "4",
                 "--out", str(d), "--channels", "4", "--n-ref", "4",
                 "--k-epi", "4,3,2", "--checkpoint-every", "2",
                 "--seed", "5"])
    assert code == 0
    return d


class TestHelp:
    def test_top_level_lists_subcommands(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for name in ("parse-colmap", "select", "epi-check", "gen-scene",
                     "train", "sr", "attn-map", "eval", "bench-attn"):
            assert name in out

    def test_select_help_shows_defaults(self, capsys):
        assert main(["select", "--help"]) == 0
        out = capsys.readouterr().out
        assert "(default: 4)" in out      # n-ref
        assert "(default: 2)" in out      # stride
        assert "(default: 0.5)" in out    # lambda-pos
        assert "(default: auxiliary)" in out

    def test_train_help_shows_k_epi_default(self, capsys):
        assert main(["train", "--help"]) == 0
        assert "64,32,16" in capsys.readouterr().out

    def test_missing_subcommand_is_user_error(self, capsys):
        assert main([]) == 1
        assert capsys.readouterr().err.strip()

    def test_unknown_flag_is_user_error(self, capsys):
        assert main(["select", "--bogus"]) == 1
        err = capsys.readouterr().err
        assert err.strip() and len(err.splitlines()) == 1


class TestThreadCap:
    def test_sets_blas_env(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._cap_threads(["--threads", "2", "bench-attn"])
        for var in cli._THREAD_VARS:
            assert __import__("os").environ[var] == "2"

    def test_equals_form(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._cap_threads(["--threads=3"])
        assert __import__("os").environ["OMP_NUM_THREADS"] == "3"

    def test_absent_flag_leaves_env_alone(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._cap_threads(["train", "--iters", "5"])
        assert "OMP_NUM_THREADS" not in __import__("os").environ


class TestParseColmap:
    def _write_model(self, d, format):
        cams, images = cf.ring_model(n=6)
        if format == "text":
            cf.write_cameras_text(d / "cameras.txt", cams)
            cf.write_images_text(d / "images.txt", images)
        else:
            cf.write_cameras_binary(d / "cameras.bin", cams)
            cf.write_images_binary(d / "images.bin", images)

    def test_text_and_binary_agree_field_for_field(self, tmp_path, capsys):
        td, bd = tmp_path / "t", tmp_path / "b"
        td.mkdir(), bd.mkdir()
        self._write_model(td, "text")
        self._write_model(bd, "binary")
        out_t = tmp_path / "t.json"
        out_b = tmp_path / "b.json"
        assert main(["parse-colmap", str(td), "-o", str(out_t)]) == 0
        assert main(["parse-colmap", str(bd), "-o", str(out_b),
                     "--format", "binary"]) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
        doc_t = json.loads(out_t.read_text())
        doc_b = json.loads(out_b.read_text())
        assert len(doc_t["cameras"]) == len(doc_b["cameras"]) == 6
        for ct, cb in zip(doc_t["cameras"], doc_b["cameras"]):
            for key in ("view_id", "image_name", "model", "width", "height"):
                assert ct[key] == cb[key]
            for key in ("fx", "fy", "cx", "cy"):
                assert ct[key] == pytest.approx(cb[key], abs=1e-12)
            assert np.allclose(ct["rotation"], cb["rotation"], atol=1e-12)
            assert np.allclose(ct["center"], cb["center"], atol=1e-12)

    def test_dash_output_goes_to_stdout(self, tmp_path, capsys):
        d = tmp_path / "m"
        d.mkdir()
        self._write_model(d, "text")
        assert main(["parse-colmap", str(d), "-o", "-"]) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
        doc = json.loads(captured.out)
        assert len(doc["cameras"]) == 6

    def test_missing_directory(self, tmp_path, capsys):
        assert main(["parse-colmap", str(tmp_path / "nope")]) == 1
        err = capsys.readouterr().err
        assert len(err.splitlines()) == 1

    def test_truncated_binary_reports_location(self, tmp_path, capsys):
        d = tmp_path / "m"
        d.mkdir()
        self._write_model(d, "binary")
        blob = (d / "cameras.bin").read_bytes()
        (d / "cameras.bin").write_bytes(blob[:-5])
        assert main(["parse-colmap", str(d), "--format", "binary"]) == 1
        err = capsys.readouterr().err
        assert "offset" in err or "cameras.bin" in err


class TestSelect:
    @pytest.fixture()
    def poses(self, tmp_path):
        rig = synthscene.gen_rig("ring_inward", n=16, radius=4.0, seed=0,
                                 elevation=0.8)
        path = tmp_path / "poses.json"
        colmap_io.write_manifest(rig, path)
        return path

    def test_prints_selected_ids(self, poses, capsys):
        assert main(["select", "--poses", str(poses), "--target", "0"]) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
        printed = [int(v) for v in captured.out.split()]
        manifest = colmap_io.read_manifest(poses)
        expect = view_select.select_auxiliary(
            manifest, 0, view_select.SelectionConfig())
        assert printed == list(expect.auxiliaries)
        assert len(printed) == 4

    def test_random_strategy_seeded_twice_identical(self, poses, capsys):
        args = ["select", "--poses", str(poses), "--target", "3",
                "--strategy", "random", "--seed", "7"]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first

    def test_unknown_target(self, poses, capsys):
        assert main(["select", "--poses", str(poses), "--target", "99"]) == 1
        assert "99" in capsys.readouterr().err

    def test_table_output_round_trips(self, poses, tmp_path, capsys):
        table = tmp_path / "table.json"
        assert main(["select", "--poses", str(poses),
                     "-o", str(table)]) == 0
        assert capsys.readouterr().out == ""
        results, cfg = view_select.read_selection_table(table)
        assert len(results) == 16
        assert cfg.n_ref == 4

    def test_all_targets_print_one_line_each(self, poses, capsys):
        assert main(["select", "--poses", str(poses)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 16
        assert lines[0].startswith("0:")


class TestEpiCheck:
    @pytest.fixture()
    def translation_poses(self, tmp_path):
        intr = CameraIntrinsics("PINHOLE", 64, 64, 50.0, 50.0, 31.5, 31.5)
        eye = np.eye(3)
        entries = [
            (0, intr, CameraPose(rotation=eye, center=np.zeros(3),
                                 view_id=0, image_name="a")),
            (1, intr, CameraPose(rotation=eye, center=np.array([1.0, 0, 0]),
                                 view_id=1, image_name="b")),
        ]
        path = tmp_path / "poses.json"
        colmap_io.write_manifest(PoseManifest(cameras=entries), path)
        return path

    def test_pure_translation_horizontal_line(self, translation_poses,
                                              capsys):
        assert main(["epi-check", "--poses", str(translation_poses),
                     "--pair", "0", "1", "--point", "5", "3"]) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
        assert captured.out.strip() == "0 1 -3"

    def test_degenerate_pair(self, translation_poses, tmp_path, capsys):
        intr = CameraIntrinsics("PINHOLE", 64, 64, 50.0, 50.0, 31.5, 31.5)
        eye = np.eye(3)
        entries = [
            (0, intr, CameraPose(rotation=eye, center=np.zeros(3),
                                 view_id=0, image_name="a")),
            (1, intr, CameraPose(rotation=eye, center=np.zeros(3),
                                 view_id=1, image_name="b")),
        ]
        path = tmp_path / "same.json"
        colmap_io.write_manifest(PoseManifest(cameras=entries), path)
        assert main(["epi-check", "--poses", str(path),
                     "--pair", "0", "1", "--point", "5", "3"]) == 1
        assert capsys.readouterr().err.strip() == "degenerate pair"

    def test_scene_adds_residual_line(self, scene_dir, capsys):
        assert main(["epi-check", "--poses", str(scene_dir / "poses.json"),
                     "--pair", "0", "2", "--point", "16", "20"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("residual ")
        assert float(lines[1].split()[1]) < 1e-6


class TestSceneCommands:
    def test_gen_scene_reproducible(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-scene", "--cams", "5", "--hr", "32",
                         "--factor", "2", "--seed", "9",
                         "-o", str(out)]) == 0
        assert capsys.readouterr().err == ""
        for rel in ("poses.json", "meta.json", "hr/000.png", "lr/003.png"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_train_writes_run_artifacts(self, run_dir):
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss,psnr"
        assert len(lines) == 5
        assert (run_dir / "checkpoint" / "manifest.json").exists()

    def test_sr_writes_png(self, scene_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "sr.png"
        assert main(["sr", "--scene", str(scene_dir),
                     "--ckpt", str(run_dir), "--target", "1",
                     "-o", str(out)]) == 0
        assert capsys.readouterr().err == ""
        assert out.read_bytes()[:4] == b"\x89PNG"
        from PIL import Image

        assert Image.open(out).size == (32, 32)

    def test_sr_to_stdout(self, scene_dir, run_dir, capsysbinary):
        assert main(["sr", "--scene", str(scene_dir),
                     "--ckpt", str(run_dir), "--target", "1",
                     "-o", "-"]) == 0
        captured = capsysbinary.readouterr()
        assert captured.out[:4] == b"\x89PNG"
        assert captured.err == b""

    def test_attn_map_pgm(self, scene_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "heat.pgm"
        assert main(["attn-map", "--scene", str(scene_dir),
                     "--ckpt", str(run_dir), "--target", "1",
                     "--aux", self._first_aux(scene_dir), "--query",
                     "8", "8", "-o", str(out)]) == 0
        assert capsys.readouterr().err == ""
        data = out.read_bytes()
        assert data.startswith(b"P5\n16 16\n255\n")
        assert len(data) == len(b"P5\n16 16\n255\n") + 16 * 16

    def test_attn_map_rejects_non_auxiliary(self, scene_dir, run_dir,
                                            tmp_path, capsys):
        aux = self._first_aux(scene_dir)
        bad = str(1)  # the target itself is never its own auxiliary
        assert main(["attn-map", "--scene", str(scene_dir),
                     "--ckpt", str(run_dir), "--target", "1",
                     "--aux", bad, "--query", "8", "8",
                     "-o", str(tmp_path / "x.pgm")]) == 1
        assert "auxiliary" in capsys.readouterr().err

    @staticmethod
    def _first_aux(scene_dir):
        manifest = colmap_io.read_manifest(scene_dir / "poses.json")
        sel = view_select.select_auxiliary(
            manifest, 1, view_select.SelectionConfig())
        return str(sel.auxiliaries[0])


class TestEval:
    def test_identical_images(self, scene_dir, capsys):
        path = str(scene_dir / "hr" / "000.png")
        assert main(["eval", "--pred", path, "--gt", path]) == 0
        captured = capsys.readouterr()
        assert captured.out == "PSNR inf SSIM 1.0\n"
        assert captured.err == ""

    def test_different_images(self, scene_dir, capsys):
        assert main(["eval", "--pred", str(scene_dir / "hr" / "000.png"),
                     "--gt", str(scene_dir / "hr" / "001.png")]) == 0
        out = capsys.readouterr().out.split()
        assert out[0] == "PSNR" and out[2] == "SSIM"
        assert 0.0 < float(out[1]) < 60.0
        assert -1.0 <= float(out[3]) < 1.0

    def test_size_mismatch(self, scene_dir, capsys):
        assert main(["eval", "--pred", str(scene_dir / "hr" / "000.png"),
                     "--gt", str(scene_dir / "lr" / "000.png")]) == 1
        assert capsys.readouterr().err.strip()


class TestBenchAttn:
    def test_lines_and_exact_mac_counts(self, capsys):
        assert main(["bench-attn", "--sizes", "8,16", "--k", "4",
                     "--channels", "16", "--n-ref", "4",
                     "--repeat", "1"]) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
        lines = captured.out.strip().splitlines()
        assert len(lines) == 2
        for line, size in zip(lines, (8, 16)):
            toks = line.split()
            assert toks[0] == "size" and int(toks[1]) == size
            epi_macs = int(toks[5])
            cross_macs = int(toks[10])
            assert epi_macs == 2 * 4 * 16 * 4
            assert cross_macs == 2 * size * size * 16 * 4
            assert float(toks[3]) > 0.0 and float(toks[8]) > 0.0

    def test_budget_cap_is_a_user_error(self, capsys):
        assert main(["bench-attn", "--sizes", "128", "--k", "4",
                     "--repeat", "1"]) == 1
        assert "exceed" in capsys.readouterr().err


class TestExitCodes:
    def test_internal_error_is_two(self, monkeypatch, capsys):
        def boom(**kwargs):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(synthscene, "build_scene", boom)
        assert main(["gen-scene", "-o", "/tmp/never-written"]) == 2
        assert "internal error" in capsys.readouterr().err

    def test_domain_error_is_one(self, tmp_path, capsys):
        bad = tmp_path / "poses.json"
        bad.write_text("{not json")
        assert main(["select", "--poses", str(bad), "--target", "0"]) == 1
        err = capsys.readouterr().err
        assert len(err.splitlines()) == 1
