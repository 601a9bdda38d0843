"""Image metrics, pose-error reporting and held-out evaluation."""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .camera import align_poses, map_to_estimated_frame, pose_registration_error
from .errors import DimensionError, FormatError, InvalidInputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class MetricsRow:
    view: str
    psnr: float
    ssim: float
    lpips: float = None
    average: float = None


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) over all channels, capped at 99 dB for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter(img, kernel):
    """Separable Gaussian filter keeping only windows fully inside the image."""
    out = correlate1d(correlate1d(img, kernel, axis=0, mode="reflect"), kernel, axis=1, mode="reflect")
    r = len(kernel) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range=1.0):
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    kernel = _gaussian_kernel()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, kernel), _filter(y, kernel)
        sxx = _filter(x * x, kernel) - mx * mx
        syy = _filter(y * y, kernel) - my * my
        sxy = _filter(x * y, kernel) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def average_metric(psnr_db, ssim_value, lpips):
    """Geometric mean of 10^(-PSNR/10), sqrt(1 - SSIM) and LPIPS; 0 for a perfect image."""
    if ssim_value >= 1.0 or lpips <= 0.0:
        return 0.0
    mse = 10.0 ** (-psnr_db / 10.0)
    return float((mse * math.sqrt(1.0 - ssim_value) * lpips) ** (1.0 / 3.0))


def read_lpips_csv(path):
    """``view,lpips`` rows -> {view: score}."""
    scores = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().lower() == "view":
                continue
            if len(row) < 2:
                raise FormatError("expected 'view,lpips'", lineno)
            try:
                value = float(row[1])
            except ValueError:
                raise FormatError(f"bad LPIPS value {row[1]!r}", lineno) from None
            if not 0.0 <= value <= 1.0:
                raise FormatError(f"LPIPS {value} outside [0, 1]", lineno)
            scores[row[0].strip()] = value
    return scores


def metrics_row(view, rendered, reference, lpips=None):
    p, s = psnr(rendered, reference), ssim(rendered, reference)
    avg = None if lpips is None else average_metric(p, s, lpips)
    return MetricsRow(str(view), p, max(-1.0, min(1.0, s)), lpips, avg)


def _fmt(value):
    return "" if value is None else repr(float(value))


def write_metrics(path, rows):
    """Per-view rows, then a mean row; ``average_of_means`` applies the formula to the means."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "psnr", "ssim", "lpips", "average"])
        for r in rows:
            writer.writerow([r.view, _fmt(r.psnr), _fmt(r.ssim), _fmt(r.lpips), _fmt(r.average)])
        if rows:
            mean = summarize(rows)
            writer.writerow(["mean", _fmt(mean["psnr"]), _fmt(mean["ssim"]), _fmt(mean["lpips"]),
                             _fmt(mean["average"])])
            if mean["average_of_means"] is not None:
                writer.writerow(["average_of_means", "", "", "", _fmt(mean["average_of_means"])])


def summarize(rows):
    def avg(key):
        vals = [getattr(r, key) for r in rows if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals and len(vals) == len(rows) else None

    out = {k: avg(k) for k in ("psnr", "ssim", "lpips", "average")}
    out["average_of_means"] = (None if out["lpips"] is None
                               else average_metric(out["psnr"], out["ssim"], out["lpips"]))
    return out


def write_pose_errors(path, rotation_deg, translation_x100):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rotation_deg", "translation_x100"])
        writer.writerow([_fmt(rotation_deg), _fmt(translation_x100)])


def evaluate_run(state, images, poses, train_reference=None, lpips=None, out_dir=None, names=None,
                 align=True):
    """Render held-out views and score them.

    ``poses`` are reference-frame cameras. With ``train_reference`` (ground
    truth of the training views) the optimized training poses are aligned to
    it by a similarity and the pose errors are reported; when ``align`` is
    set the held-out cameras are also mapped into the learned frame before
    rendering. Leave ``align`` off when the reference frame already is the
    frame of the retrieved model. Returns ``(rows, pose_errors or None, renders)``.
    """
    if len(images) != len(poses):
        raise InvalidInputError("need one pose per held-out image")
    names = [str(i) for i in range(len(images))] if names is None else [str(n) for n in names]
    pose_errors = None
    if train_reference is not None:
        estimated = state.current_poses()
        pose_errors = pose_registration_error(estimated, train_reference)
        if align:
            similarity = align_poses(estimated, train_reference)
            poses = [map_to_estimated_frame(p, similarity) for p in poses]
    rows, renders = [], []
    for name, image, pose in zip(names, images, poses):
        color, _ = state.render(pose)
        renders.append(color)
        score = None if lpips is None else lpips.get(name)
        rows.append(metrics_row(name, color, image, score))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        if pose_errors is not None:
            write_pose_errors(os.path.join(out_dir, "pose_errors.csv"), *pose_errors)
    return rows, pose_errors, renders
