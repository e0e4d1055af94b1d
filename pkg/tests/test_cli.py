"""Command-line interface: config plumbing, subcommand happy paths, exit
codes, and run-to-run determinism of the written artifacts."""

import filecmp
import os

import numpy as np
import pytest

from uvgsplat import cli, pipeline as P


TINY_CONFIG = """\
# desk-sized everything so the whole CLI round trip stays fast
scene.num_cameras=4
scene.num_frames=5
scene.image_size=48
scene.texture_size=32
scene.segments=3
scene.radial=6

pipeline.uv_resolution=32
pipeline.depth=3
pipeline.mesh_base_channels=4
pipeline.gauss_base_channels=8
pipeline.iterations=10
pipeline.log_every=5
pipeline.checkpoint_every=0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared gen-data -> train pipeline for the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    data = root / "data"
    run = root / "run"
    assert cli.dispatch(["gen-data", "--out", str(data), "--seed", "0",
                         "--config", str(cfg)]) == 0
    assert cli.dispatch(["train", "--data", str(data), "--out", str(run),
                         "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


class TestHappyPath:
    def test_gen_data_writes_dataset_and_resolved_config(self, workspace):
        data = workspace["data"]
        assert (data / "resolved_config.txt").exists()
        text = (data / "resolved_config.txt").read_text()
        assert "scene.num_frames=5" in text
        assert "pipeline.iterations=10" in text
        assert "loss.l1=1.0" in text

    def test_train_writes_checkpoint_and_loss_curve(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint.npz").exists()
        curve = (run / "loss_curve.txt").read_text().splitlines()
        assert curve[0] == "iteration\tl_mesh\tl_image\tl_gauss\ttotal"
        assert len(curve) == 4  # header + iterations 1, 5, 10
        assert (run / "resolved_config.txt").exists()

    def test_eval_writes_metric_table(self, workspace, capsys):
        run = workspace["run"]
        assert cli.dispatch(["eval", "--run", str(run),
                             "--split", "novel_view"]) == 0
        table = (run / "metrics_novel_view.txt").read_text().splitlines()
        assert table[0] == "subject\tsplit\tframe\tview\tpsnr\tssim"
        assert all(line.split("\t")[1] == "novel_view" for line in table[1:])
        assert "mean psnr" in capsys.readouterr().out

    def test_render_writes_image(self, workspace, tmp_path):
        out = tmp_path / "renders"
        assert cli.dispatch(["render", "--run", str(workspace["run"]),
                             "--out", str(out)]) == 0
        ppms = list(out.glob("*.ppm"))
        assert len(ppms) == 1
        assert ppms[0].read_bytes().startswith(b"P6")

    def test_data_dir_from_environment(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.DATA_ENV, str(workspace["data"]))
        out = tmp_path / "envrun"
        assert cli.dispatch(["train", "--out", str(out),
                             "--config", str(workspace["cfg"]),
                             "--iterations", "2"]) == 0
        assert (out / "checkpoint.npz").exists()


class TestGradCheckCommand:
    def test_grad_check_passes_and_reports_each_check(self, capsys):
        assert cli.dispatch(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "all gradient checks passed" in out
        for name in ("conv2d", "lbs", "rasterize", "image_loss"):
            assert f"grad-check {name}" in out


class TestAblateCommand:
    def test_ablation_table_covers_exactly_the_four_modes(self, workspace,
                                                          tmp_path):
        out = tmp_path / "ablation"
        assert cli.dispatch(["ablate", "--data", str(workspace["data"]),
                             "--out", str(out),
                             "--config", str(workspace["cfg"]),
                             "--iterations", "3"]) == 0
        lines = (out / "ablation.txt").read_text().splitlines()
        assert lines[0] == "mode\tpsnr\tssim"
        modes = [line.split("\t")[0] for line in lines[1:]]
        assert modes == list(P.GUIDANCE_MODES)
        assert set(modes) == {"none", "coarse", "gt_deformed", "learned"}
        for line in lines[1:]:
            _, psnr, ssim = line.split("\t")
            assert np.isfinite(float(psnr)) and np.isfinite(float(ssim))


class TestUsageErrors:
    def test_bogus_flag_exits_one_with_usage(self, capsys):
        assert cli.dispatch(["train", "--bogus-flag", "x"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_exits_one(self, capsys):
        assert cli.dispatch([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("pipeline.no_such_knob=3\n")
        assert cli.dispatch(["gen-data", "--out", str(tmp_path / "d"),
                             "--config", str(cfg)]) == 1
        assert "no_such_knob" in capsys.readouterr().err

    def test_unknown_config_section_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("rocket.thrust=9000\n")
        assert cli.dispatch(["gen-data", "--out", str(tmp_path / "d"),
                             "--config", str(cfg)]) == 1
        assert "rocket" in capsys.readouterr().err

    def test_malformed_config_line_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("pipeline.iterations\n")
        assert cli.dispatch(["gen-data", "--out", str(tmp_path / "d"),
                             "--config", str(cfg)]) == 1
        assert "key=value" in capsys.readouterr().err

    def test_missing_data_dir_rejected(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv(cli.DATA_ENV, raising=False)
        assert cli.dispatch(["train", "--out", str(tmp_path / "r")]) == 1
        assert cli.DATA_ENV in capsys.readouterr().err

    def test_missing_checkpoint_rejected(self, tmp_path, capsys):
        assert cli.dispatch(["eval", "--run", str(tmp_path)]) == 1
        assert "checkpoint" in capsys.readouterr().err


class TestConfigPlumbing:
    def test_comments_and_blank_lines_ignored(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n\npipeline.iterations=7  # trailing\n")
        assert cli.parse_config_file(str(cfg)) == {"pipeline.iterations": "7"}

    def test_flag_overrides_config_file(self, workspace, tmp_path):
        out = tmp_path / "override"
        assert cli.dispatch(["train", "--data", str(workspace["data"]),
                             "--out", str(out),
                             "--config", str(workspace["cfg"]),
                             "--iterations", "4"]) == 0
        assert "pipeline.iterations=4" in (out / "resolved_config.txt").read_text()

    def test_boolean_coercion(self):
        assert cli._coerce("true", False) is True
        assert cli._coerce("0", True) is False
        with pytest.raises(cli.UsageError):
            cli._coerce("maybe", True)


class TestDeterminism:
    def test_same_seed_reruns_are_bit_identical(self, workspace, tmp_path):
        data2 = tmp_path / "data2"
        run2a = tmp_path / "run2a"
        run2b = tmp_path / "run2b"
        cfg = workspace["cfg"]
        assert cli.dispatch(["gen-data", "--out", str(data2), "--seed", "0",
                             "--config", str(cfg)]) == 0
        for dirpath, _, files in os.walk(workspace["data"]):
            rel = os.path.relpath(dirpath, workspace["data"])
            for name in files:
                a = os.path.join(dirpath, name)
                b = os.path.join(data2, rel, name)
                assert filecmp.cmp(a, b, shallow=False), os.path.join(rel, name)
        for run in (run2a, run2b):
            assert cli.dispatch(["train", "--data", str(data2),
                                 "--out", str(run), "--config", str(cfg)]) == 0
        assert (run2a / "loss_curve.txt").read_bytes() == \
               (run2b / "loss_curve.txt").read_bytes()
        with np.load(run2a / "checkpoint.npz") as a, \
                np.load(run2b / "checkpoint.npz") as b:
            assert sorted(a.files) == sorted(b.files)
            for k in a.files:
                assert np.array_equal(a[k], b[k]), k
