import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from hardsplat.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def _gen_args(out, views=6, size=24, gaussians=40, seed=3):
    return ["gen-scene", str(out), "--views", str(views), "--size", str(size),
            "--gaussians", str(gaussians), "--seed", str(seed), "--test-every", "3"]


TRAIN_FAST = ["--iters", "40", "--eval-every", "20", "--densify-start", "10",
              "--densify-end", "30", "--interval", "10", "--init-count", "20",
              "--tau-grad", "1e-5"]


@pytest.fixture(scope="module")
def scene_dir(runner, tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    result = runner.invoke(main, _gen_args(out))
    assert result.exit_code == 0, result.output
    return out


def _dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGenScene:
    def test_layout(self, scene_dir):
        assert (scene_dir / "cameras.json").exists()
        assert (scene_dir / "ground_truth.hgscloud").exists()
        pngs = list((scene_dir / "images").glob("*.png"))
        assert len(pngs) == 6
        entries = json.loads((scene_dir / "cameras.json").read_text())
        assert len(entries) == 6

    def test_deterministic_digest(self, runner, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert runner.invoke(main, _gen_args(a)).exit_code == 0
        assert runner.invoke(main, _gen_args(b)).exit_code == 0
        assert _dir_digest(a) == _dir_digest(b)

    def test_too_few_views_rejected(self, runner, tmp_path):
        result = runner.invoke(main, _gen_args(tmp_path / "x", views=2))
        assert result.exit_code == 2


class TestTrain:
    def test_smoke_and_artifacts(self, runner, scene_dir, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(main, ["train", str(scene_dir), "--out", str(out),
                                      "--policy", "hgs", "--seed", "1"] + TRAIN_FAST)
        assert result.exit_code == 0, result.output
        for name in ("report.csv", "growth_log.csv", "summary.json",
                     "timings.txt", "final.hgscloud"):
            assert (out / name).exists()
        rows = (out / "report.csv").read_text().splitlines()
        assert rows[0] == "iteration,train_psnr,test_psnr,test_ssim,n_gaussians"
        assert len(rows) >= 3

    def test_unknown_policy_exit_2(self, runner, scene_dir, tmp_path):
        result = runner.invoke(main, ["train", str(scene_dir), "--out",
                                      str(tmp_path / "x"), "--policy", "bogus"])
        assert result.exit_code == 2
        assert "policy" in result.output

    def test_n_constant_after_densify_end(self, runner, scene_dir, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(main, ["train", str(scene_dir), "--out", str(out),
                                      "--policy", "og", "--seed", "2"] + TRAIN_FAST)
        assert result.exit_code == 0, result.output
        rows = (out / "report.csv").read_text().splitlines()[1:]
        ns = [int(r.split(",")[-1]) for r in rows]
        iters = [int(r.split(",")[0]) for r in rows]
        after_end = [n for it, n in zip(iters, ns) if it >= 30]
        assert len(set(after_end)) == 1

    def test_config_file_with_cli_override(self, runner, scene_dir, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('iters = 20\nseed = 9\npolicy = "og"\n'
                       'eval-every = 10\ndensify-start = 100\ndensify-end = 5\n'
                       'init-count = 15\n')
        out = tmp_path / "out"
        result = runner.invoke(main, ["train", str(scene_dir), "--out", str(out),
                                      "--config", str(cfg), "--seed", "4"])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["total_iters"] == 20  # from file
        assert summary["config"]["seed"] == 4          # flag overrides file

    def test_seed_determinism_byte_identical(self, runner, scene_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(main, ["train", str(scene_dir), "--out", str(out),
                                          "--policy", "og", "--seed", "7"] + TRAIN_FAST)
            assert result.exit_code == 0, result.output
            outs.append(out)
        for name in ("report.csv", "growth_log.csv", "summary.json", "final.hgscloud"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


@pytest.fixture(scope="module")
def trained(runner, scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    result = runner.invoke(main, ["train", str(scene_dir), "--out", str(out),
                                  "--policy", "og", "--seed", "5"] + TRAIN_FAST)
    assert result.exit_code == 0, result.output
    return out


class TestEvalRenderDiag:
    def test_eval(self, runner, scene_dir, trained):
        result = runner.invoke(main, ["eval", str(trained / "final.hgscloud"),
                                      str(scene_dir), "--split", "test"])
        assert result.exit_code == 0, result.output
        assert "psnr" in result.output

    def test_render(self, runner, scene_dir, trained, tmp_path):
        png = tmp_path / "view0.png"
        result = runner.invoke(main, ["render", str(trained / "final.hgscloud"),
                                      str(scene_dir), "--view-id", "0",
                                      "--out", str(png)])
        assert result.exit_code == 0, result.output
        assert png.exists()

    def test_render_bad_view(self, runner, scene_dir, trained, tmp_path):
        result = runner.invoke(main, ["render", str(trained / "final.hgscloud"),
                                      str(scene_dir), "--view-id", "99",
                                      "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 2

    def test_diag_bundle(self, runner, scene_dir, trained, tmp_path):
        out = tmp_path / "diag"
        result = runner.invoke(main, ["diag", str(trained / "final.hgscloud"),
                                      str(scene_dir), "--view-id", "0",
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        for name in ("rendered.png", "rendered_index.png", "rendered_index.u32",
                     "ssim_map.png", "over_large_points.csv", "hard_points.csv",
                     "over_large_overlay.png", "hard_overlay.png", "grad_norms.csv"):
            assert (out / name).exists(), name

    def test_diag_hard_subset_of_overlarge(self, runner, scene_dir, trained, tmp_path):
        out = tmp_path / "diag2"
        result = runner.invoke(main, ["diag", str(trained / "final.hgscloud"),
                                      str(scene_dir), "--view-id", "1",
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        over = {line.split(",")[0] for line
                in (out / "over_large_points.csv").read_text().splitlines()[1:]}
        hard = {line.split(",")[0] for line
                in (out / "hard_points.csv").read_text().splitlines()[1:]}
        assert hard <= over

    def test_diag_gt_cloud_white_ssim(self, runner, scene_dir, tmp_path):
        out = tmp_path / "diag3"
        result = runner.invoke(main, ["diag", str(scene_dir / "ground_truth.hgscloud"),
                                      str(scene_dir), "--view-id", "0",
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        from PIL import Image
        # gt renders match the (quantized) gt images almost perfectly; the
        # ssim map holds (v+1)/2, so near-1 values encode near-white.
        img = np.asarray(Image.open(out / "ssim_map.png"))
        assert img.min() >= 250

    def test_diag_empty_cloud_all_background_index(self, runner, scene_dir, tmp_path):
        from hardsplat.gaussians import GaussianCloud, save_cloud
        empty = tmp_path / "empty.hgscloud"
        save_cloud(GaussianCloud.empty(), empty)
        out = tmp_path / "diag4"
        result = runner.invoke(main, ["diag", str(empty), str(scene_dir),
                                      "--view-id", "0", "--out", str(out)])
        assert result.exit_code == 0, result.output
        raw = np.fromfile(out / "rendered_index.u32", dtype="<u4")
        assert np.all(raw == np.uint32(0xFFFFFFFF))  # -1 everywhere


class TestCompare:
    def test_single_row_matches_report(self, runner, scene_dir, tmp_path):
        out = tmp_path / "cmp"
        result = runner.invoke(main, ["compare", str(scene_dir), "--out", str(out),
                                      "--policies", "og", "--seeds", "3"] + TRAIN_FAST)
        assert result.exit_code == 0, result.output
        runs = json.loads((out / "runs.json").read_text())
        assert len(runs) == 1
        report = (out / "og_seed3" / "report.csv").read_text().splitlines()[-1]
        report_psnr = report.split(",")[2]
        table_row = (out / "compare.csv").read_text().splitlines()[1]
        assert report_psnr == table_row.split(",")[2]  # byte-identical value
        table = (out / "compare.md").read_text()
        assert "og" in table

    def test_multi_policy_aggregation(self, runner, scene_dir, tmp_path):
        out = tmp_path / "cmp2"
        result = runner.invoke(main, ["compare", str(scene_dir), "--out", str(out),
                                      "--policies", "og,hgs", "--seeds", "1,2"]
                               + TRAIN_FAST)
        assert result.exit_code == 0, result.output
        rows = (out / "compare.csv").read_text().splitlines()
        assert len(rows) == 3  # header + 2 policies
        runs = json.loads((out / "runs.json").read_text())
        assert len(runs) == 4

    def test_tau_sweep_mode(self, runner, scene_dir, tmp_path):
        out = tmp_path / "sweep"
        result = runner.invoke(main, ["compare", str(scene_dir), "--out", str(out),
                                      "--tau-grad-sweep", "2e-4,7e-5",
                                      "--seeds", "1"] + TRAIN_FAST)
        assert result.exit_code == 0, result.output
        rows = (out / "compare.csv").read_text().splitlines()
        assert len(rows) == 3  # header + 2 tau rows
        assert "og@tau=0.0002" in rows[1] + rows[2]
        assert "og@tau=7e-05" in rows[1] + rows[2]

    def test_unknown_policy_rejected(self, runner, scene_dir, tmp_path):
        result = runner.invoke(main, ["compare", str(scene_dir), "--out",
                                      str(tmp_path / "x"), "--policies", "og,nope"])
        assert result.exit_code == 2

    def test_parallel_jobs_match_serial(self, runner, scene_dir, tmp_path,
                                        monkeypatch):
        serial = tmp_path / "serial"
        parallel = tmp_path / "parallel"
        args = ["--policies", "og", "--seeds", "1,2"] + TRAIN_FAST
        assert runner.invoke(main, ["compare", str(scene_dir), "--out",
                                    str(serial)] + args).exit_code == 0
        monkeypatch.setenv("HGS_THREADS", "2")
        assert runner.invoke(main, ["compare", str(scene_dir), "--out",
                                    str(parallel)] + args).exit_code == 0
        assert (serial / "compare.csv").read_text().splitlines()[1].rsplit(",", 1)[0] \
            == (parallel / "compare.csv").read_text().splitlines()[1].rsplit(",", 1)[0]
        for sub in ("og_seed1", "og_seed2"):
            assert (serial / sub / "report.csv").read_bytes() == \
                   (parallel / sub / "report.csv").read_bytes()
