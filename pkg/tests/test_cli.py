import json
import subprocess
import sys

import numpy as np
import pytest

from cadfield import camera, cli, synthetic
from cadfield.errors import DivergenceError
from cadfield.masks import write_image, write_mask
from cadfield.trainer import CONFIG_TYPES

from conftest import CUBE_OBJ

TINY = ["--phase1_iters", "6", "--phase2_iters", "6", "--phase3_iters", "8", "--pose_start", "9",
        "--pose_end", "12", "--anneal_start", "6", "--anneal_end", "9", "--background_boundary", "6",
        "--width", "16", "--feature_width", "16", "--n_samples", "8", "--eval_samples", "8",
        "--batch_rays", "32", "--occupancy_batch", "128", "--occupancy_pool", "600",
        "--pos_freqs", "3", "--dir_freqs", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    meshes = root / "meshes"
    meshes.mkdir()
    (meshes / "box.obj").write_text(CUBE_OBJ)
    scene = synthetic.ToyScene()
    paths, mask_paths = [], []
    for i, (a, e) in enumerate(((0.6, 0.35), (1.5, 0.5), (2.3, 0.3))):
        image, mask = scene.render(camera.orbit_pose(a, e, 2.0, 24))
        write_image(root / f"view{i}.png", image)
        write_mask(root / f"mask{i}.png", mask)
        paths.append(str(root / f"view{i}.png"))
        mask_paths.append(str(root / f"mask{i}.png"))
    return root, ",".join(paths), ",".join(mask_paths)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_build_library(workspace, capsys):
    root, _, _ = workspace
    code, out, _ = run(["build-library", "--meshes", str(root / "meshes"), "--builtin", "cuboid,sphere",
                        "--out", str(root / "lib"), "--poses", "30", "--resolution", "48"], capsys)
    assert code == 0
    assert json.loads(out)["models"] == ["box", "cuboid", "sphere"]
    assert len(list((root / "lib" / "cuboid" / "masks").iterdir())) == 30


def test_retrieve_json(workspace, capsys):
    root, images, masks = workspace
    code, out, _ = run(["retrieve", "--library", str(root / "lib"), "--images", images, "--masks", masks,
                        "--k", "10", "--out", str(root / "ret.json")], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["model_id"] == "cuboid" and len(doc["views"]) + len(doc["discarded_views"]) == 3
    assert {"view", "pose_index", "iou", "camera_to_world"} <= set(doc["views"][0])
    assert json.loads((root / "ret.json").read_text()) == doc


def test_train_render_eval(workspace, capsys, tmp_path):
    root, images, masks = workspace
    run_dir = tmp_path / "run"
    code, out, err = run(["--seed", "3", "--threads", "1", "train", "--library", str(root / "lib"),
                          "--images", images, "--masks", masks, "--out", str(run_dir)] + TINY, capsys)
    assert code == 0, err
    assert "seed = 3" in (run_dir / "config.cfg").read_text()
    assert len(json.loads(out)["train_psnr"]) >= 1

    code, out, err = run(["render", "--run", str(run_dir), "--out", str(tmp_path / "r")], capsys)
    assert code == 0, err
    assert json.loads(out)["rendered"] >= 1 and (tmp_path / "r" / "render_0.png").is_file()

    held = [camera.orbit_pose(1.0, 0.45, 2.0, 24)]
    camera.save_poses(tmp_path / "held.json", held)
    code, out, err = run(["eval", "--run", str(run_dir), "--images", images.split(",")[0],
                          "--poses", str(tmp_path / "held.json"), "--out", str(tmp_path / "e"), "--no-align"],
                         capsys)
    assert code == 0, err
    assert len(json.loads(out)["views"]) == 1 and (tmp_path / "e" / "metrics.csv").is_file()


def test_config_file_and_flag_override(workspace, capsys, tmp_path):
    root, images, masks = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 11\nlr = 0.001\n")
    code, _, err = run(["train", "--library", str(root / "lib"), "--images", images, "--masks", masks,
                        "--out", str(tmp_path / "run"), "--config", str(cfg), "--lr", "0.002"] + TINY, capsys)
    assert code == 0, err
    text = (tmp_path / "run" / "config.cfg").read_text()
    assert "seed = 11" in text and "lr = 0.002" in text


def test_missing_library_is_data_error(workspace, capsys, tmp_path):
    _, images, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = desk\n")
    code, _, err = run(["train", "--config", str(cfg), "--library", str(tmp_path / "nope"), "--images", images,
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 3
    assert err.strip().startswith("error: ") and len(err.strip().splitlines()) == 1


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["retrieve", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
    assert cli.main(["build-library", "--out", "x"]) == 2


def test_bad_config_key(workspace, capsys, tmp_path):
    root, images, masks = workspace
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    code, _, err = run(["train", "--library", str(root / "lib"), "--images", images, "--out", str(tmp_path / "o"),
                        "--config", str(cfg)], capsys)
    assert code == 3 and "line 1" in err


def test_divergence_exit_code(workspace, capsys, tmp_path, monkeypatch):
    root, images, masks = workspace

    def explode(*args, **kwargs):
        raise DivergenceError("training diverged", 7)

    monkeypatch.setattr("cadfield.trainer.run_full", explode)
    code, _, err = run(["train", "--library", str(root / "lib"), "--images", images, "--masks", masks,
                        "--out", str(tmp_path / "o")], capsys)
    assert code == 4 and "iteration 7" in err


def test_help_lists_every_config_key():
    text = cli.build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for key in CONFIG_TYPES:
        assert f"--{key}" in text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cadfield", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "build-library" in proc.stdout
