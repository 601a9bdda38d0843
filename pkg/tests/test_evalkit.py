import csv
import math

import numpy as np
import pytest

from cadfield import camera, evalkit, trainer
from cadfield.errors import DimensionError, FormatError


def naive_ssim(a, b, c1=1e-4, c2=9e-4):
    """Direct per-window SSIM with the 11x11, sigma 1.5 Gaussian; windows fully inside the image."""
    x = np.arange(11) - 5.0
    g = np.exp(-0.5 * (x / 1.5) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    scores = []
    for ch in range(a.shape[2]):
        vals = []
        for i in range(a.shape[0] - 10):
            for j in range(a.shape[1] - 10):
                pa, pb = a[i:i + 11, j:j + 11, ch], b[i:i + 11, j:j + 11, ch]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va, vb = (w * pa * pa).sum() - ma * ma, (w * pb * pb).sum() - mb * mb
                cov = (w * pa * pb).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
        scores.append(np.mean(vals))
    return float(np.mean(scores))


def test_psnr_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert evalkit.psnr(a, a) == 99.0
    assert evalkit.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    assert evalkit.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), math.sqrt(0.001))) == pytest.approx(30.0)
    with pytest.raises(DimensionError):
        evalkit.psnr(a, a[:4])


def test_psnr_symmetric_and_permutation_invariant(rng):
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert evalkit.psnr(a, b) == evalkit.psnr(b, a)
    perm = rng.permutation(256)
    pa = a.reshape(256, 3)[perm].reshape(16, 16, 3)
    pb = b.reshape(256, 3)[perm].reshape(16, 16, 3)
    assert evalkit.psnr(pa, pb) == pytest.approx(evalkit.psnr(a, b), abs=1e-12)


def test_ssim_matches_direct_windows(rng):
    a = rng.uniform(size=(20, 17, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert evalkit.ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-12)


def test_ssim_identical():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert evalkit.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_negative():
    yy, xx = np.mgrid[:32, :32]
    board = np.repeat((((yy // 2) + (xx // 2)) % 2).astype(float)[..., None], 3, axis=2)
    assert evalkit.ssim(board, 1.0 - board) < 0.2


def test_ssim_constants_closed_form():
    a, b = 0.3, 0.7
    expected = (2 * a * b + 1e-4) / (a * a + b * b + 1e-4)
    got = evalkit.ssim(np.full((16, 16, 3), a), np.full((16, 16, 3), b))
    assert got == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetries(rng):
    a, b = rng.uniform(size=(24, 24, 3)), rng.uniform(size=(24, 24, 3))
    base = evalkit.ssim(a, b)
    assert evalkit.ssim(b, a) == pytest.approx(base, abs=1e-14)
    for f in (np.fliplr, np.flipud, lambda x: x.transpose(1, 0, 2)):
        assert evalkit.ssim(f(a), f(b)) == pytest.approx(base, abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        evalkit.ssim(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


def test_average_metric():
    assert evalkit.average_metric(20, 0.91, 0.1) == pytest.approx(0.0669, abs=1e-4)
    base = evalkit.average_metric(25, 0.8, 0.2)
    assert evalkit.average_metric(25, 0.8, 0.2 * 8) == pytest.approx(2 * base)
    assert evalkit.average_metric(99, 1.0, 0.3) == 0.0
    assert evalkit.average_metric(26, 0.8, 0.2) < base
    assert evalkit.average_metric(25, 0.85, 0.2) < base
    assert evalkit.average_metric(25, 0.8, 0.1) < base


def test_lpips_csv(tmp_path):
    good = tmp_path / "l.csv"
    good.write_text("view,lpips\na.png,0.12\nb.png,0.3\n")
    assert evalkit.read_lpips_csv(good) == {"a.png": 0.12, "b.png": 0.3}
    bad = tmp_path / "bad.csv"
    bad.write_text("view,lpips\na.png,oops\n")
    with pytest.raises(FormatError, match="line 2"):
        evalkit.read_lpips_csv(bad)
    bad.write_text("a.png,1.5\n")
    with pytest.raises(FormatError):
        evalkit.read_lpips_csv(bad)


def test_metrics_report(tmp_path):
    rows = [evalkit.MetricsRow("a", 20.0, 0.9, 0.1, evalkit.average_metric(20.0, 0.9, 0.1)),
            evalkit.MetricsRow("b", 30.0, 0.8, 0.3, evalkit.average_metric(30.0, 0.8, 0.3))]
    evalkit.write_metrics(tmp_path / "m.csv", rows)
    table = list(csv.reader(open(tmp_path / "m.csv")))
    assert table[0] == ["view", "psnr", "ssim", "lpips", "average"]
    assert [r[0] for r in table[1:]] == ["a", "b", "mean", "average_of_means"]
    assert float(table[3][1]) == 25.0
    assert float(table[3][4]) == pytest.approx((rows[0].average + rows[1].average) / 2)
    assert float(table[4][4]) == pytest.approx(evalkit.average_metric(25.0, 0.85, 0.2))


def test_metrics_without_lpips(tmp_path, rng):
    img = rng.uniform(size=(12, 12, 3))
    row = evalkit.metrics_row("v", img, img)
    assert row.lpips is None and row.average is None
    evalkit.write_metrics(tmp_path / "m.csv", [row])
    assert list(csv.reader(open(tmp_path / "m.csv")))[1][3:] == ["", ""]


@pytest.fixture(scope="module")
def small_state():
    poses = [camera.orbit_pose(a, e, 2.0, 16) for a, e in ((0.2, 0.3), (1.4, 0.1), (2.8, 0.5), (4.0, -0.2))]
    cfg = trainer.desk_preset(40, width=16, feature_width=16, eval_samples=16, pos_freqs=4, dir_freqs=2)
    state = trainer.init_state(poses, cfg)
    state.pose_w[1].data = np.array([0.02, -0.01, 0.03])
    return state


def test_evaluate_run_self_reference(small_state, tmp_path, rng):
    estimated = small_state.current_poses()
    held = [camera.orbit_pose(0.9, 0.2, 2.0, 16), camera.orbit_pose(2.0, 0.3, 2.0, 16)]
    images = [rng.uniform(size=(16, 16, 3)) for _ in held]
    rows, errors, renders = evalkit.evaluate_run(small_state, images, held, estimated, {"0": 0.2},
                                                 tmp_path, align=True)
    assert len(rows) == 2 and len(renders) == 2
    assert errors[0] == pytest.approx(0.0, abs=1e-6) and errors[1] == pytest.approx(0.0, abs=1e-6)
    assert rows[0].average is not None and rows[1].average is None
    assert (tmp_path / "metrics.csv").is_file() and (tmp_path / "pose_errors.csv").is_file()
    plain, _, plain_renders = evalkit.evaluate_run(small_state, images, held, estimated, align=False)
    assert np.allclose(plain_renders[0], renders[0], atol=1e-6)
