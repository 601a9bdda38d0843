"""Alpha-composited volume rendering along camera rays and the training losses."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import generate_rays
from .errors import DimensionError, InvalidInputError
from .fields import color_eval, deformed_density

DENSITY_EPS = 1e-7


@dataclass
class RaySampleBatch:
    origins: object
    directions: object
    ts: np.ndarray
    deltas: np.ndarray
    near: float
    far: float

    def __len__(self):
        return self.ts.shape[0]


@dataclass
class RenderOutput:
    color: ad.Tensor
    opacity: ad.Tensor
    transmittance: ad.Tensor
    weights: ad.Tensor
    offsets: ad.Tensor = None
    corrections: ad.Tensor = None


def cell_widths(ts, near, far):
    """Length of the part of [near, far] closer to each sample than to its neighbours."""
    mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
    edges = np.concatenate(
        [np.full((len(ts), 1), near), mids, np.full((len(ts), 1), far)], axis=1
    )
    return np.diff(edges, axis=1)


def sample_depths(n_rays, n_samples, near, far, stratified=False, rng=None):
    """(n_rays, n_samples) sorted depths: bin centers, or one uniform draw per bin."""
    if n_samples < 2:
        raise InvalidInputError("need at least 2 samples per ray")
    if not near < far:
        raise InvalidInputError("need near < far")
    width = (far - near) / n_samples
    base = near + width * np.arange(n_samples)
    if stratified:
        rng = np.random.default_rng(rng)
        return base + width * rng.random((n_rays, n_samples))
    return np.broadcast_to(base + 0.5 * width, (n_rays, n_samples)).copy()


def sample_along_rays(rays, n_samples, stratified=False, rng=None):
    ts = sample_depths(len(rays), n_samples, rays.near, rays.far, stratified, rng)
    return RaySampleBatch(rays.origins, rays.directions, ts, cell_widths(ts, rays.near, rays.far),
                          rays.near, rays.far)


def make_batch(origins, directions, n_samples, near, far, stratified=False, rng=None):
    n_rays = directions.shape[0]
    ts = sample_depths(n_rays, n_samples, near, far, stratified, rng)
    return RaySampleBatch(origins, directions, ts, cell_widths(ts, near, far), near, far)


def composite(sigma, rgb, deltas, density_scale=1.0):
    """Quadrature of the emission-absorption integral.

    ``sigma`` (R, S), ``rgb`` (R, S, 3). Transmittance is the exponential of
    the exclusive cumulative optical depth.
    """
    sigma, rgb = ad.as_tensor(sigma), ad.as_tensor(rgb)
    depth = sigma * (density_scale * np.asarray(deltas))
    trans = ad.exp(-ad.cumsum(depth, axis=1, exclusive=True))
    alpha = 1.0 - ad.exp(-depth)
    weights = trans * alpha
    color = ad.sum(ad.reshape(weights, weights.shape + (1,)) * rgb, axis=1)
    return RenderOutput(color, ad.sum(weights, axis=1), trans, weights)


def render_rays(batch, params, encoding, deformation="learned", density_scale=1.0,
                with_color=True):
    """Evaluate the fields at every sample and composite on a black background.

    ``batch.origins`` / ``batch.directions`` may be Tensors so gradients reach
    the camera poses. ``deformation`` is ``"learned"``, ``"zero"`` or ``"off"``.
    """
    origins, dirs = ad.as_tensor(batch.origins), ad.as_tensor(batch.directions)
    n_rays, n_samples = batch.ts.shape
    o = origins if origins.ndim == 2 else ad.broadcast_to(origins, (n_rays, 3))
    o = ad.reshape(o, (n_rays, 1, 3))
    d = ad.reshape(dirs, (n_rays, 1, 3))
    points = ad.reshape(o + d * batch.ts[:, :, None], (n_rays * n_samples, 3))
    sigma, feature, offset, corr = deformed_density(params, points, encoding, deformation)
    if with_color:
        view = ad.reshape(ad.broadcast_to(d, (n_rays, n_samples, 3)), (n_rays * n_samples, 3))
        rgb = ad.reshape(color_eval(params, feature, view, encoding), (n_rays, n_samples, 3))
    else:
        rgb = np.zeros((n_rays, n_samples, 3))
    out = composite(ad.reshape(sigma, (n_rays, n_samples)), rgb, batch.deltas, density_scale)
    out.offsets, out.corrections = offset, corr
    return out


def render_image(params, pose, encoding, bounds, n_samples=64, deformation="learned",
                 density_scale=1.0, chunk=1024):
    """Full-frame render without gradients -> ((H, W, 3) color, (H, W) opacity)."""
    rays = generate_rays(pose, pose.pixel_centers(), bounds)
    colors, alphas = [], []
    with _no_grad(params):
        for start in range(0, len(rays), chunk):
            part = type(rays)(rays.origins[start:start + chunk], rays.directions[start:start + chunk],
                              rays.near, rays.far)
            out = render_rays(sample_along_rays(part, n_samples), params, encoding, deformation,
                              density_scale)
            colors.append(out.color.data)
            alphas.append(out.opacity.data)
    h, w = pose.height, pose.width
    return np.concatenate(colors).reshape(h, w, 3), np.concatenate(alphas).reshape(h, w)


class _no_grad:
    """Temporarily mark parameters as constants so no graph is recorded."""

    def __init__(self, params):
        self.tensors = list(params.tensors.values())

    def __enter__(self):
        self.flags = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False

    def __exit__(self, *exc):
        for t, flag in zip(self.tensors, self.flags):
            t.requires_grad = flag


# losses


def _check_rows(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"prediction shape {a.shape} != target shape {b.shape}")


def loss_color(rendered, target):
    """Per-ray squared color error, averaged over the batch."""
    color = rendered.color if isinstance(rendered, RenderOutput) else ad.as_tensor(rendered)
    target = np.asarray(target, dtype=np.float64)
    _check_rows(color, target)
    diff = color - target
    return ad.mean(ad.sum(diff * diff, axis=-1))


def loss_silhouette(rendered, mask):
    """Mean squared gap between accumulated opacity and a binary mask."""
    opacity = rendered.opacity if isinstance(rendered, RenderOutput) else ad.as_tensor(rendered)
    mask = np.asarray(mask, dtype=np.float64)
    _check_rows(opacity, mask)
    diff = opacity - mask
    return ad.mean(diff * diff)


def loss_density(sigma, occupancy, eps=DENSITY_EPS):
    """Binary cross-entropy of predicted density against {0, 1} occupancy."""
    sigma = ad.as_tensor(sigma)
    occ = np.asarray(occupancy, dtype=np.float64)
    _check_rows(sigma, occ)
    s = ad.clip(sigma, eps, 1.0 - eps)
    return -ad.mean(occ * ad.log(s) + (1.0 - occ) * ad.log(1.0 - s))


def loss_regularizers(offsets, corrections):
    """(mean offset length, mean absolute correction)."""
    offsets, corrections = ad.as_tensor(offsets), ad.as_tensor(corrections)
    if offsets.size == 0:
        return ad.Tensor(0.0), ad.Tensor(0.0)
    return ad.mean(ad.norm(ad.reshape(offsets, (-1, 3)), axis=-1)), ad.mean(ad.absolute(corrections))


def loss_total(color, offset, correction, lambda_a=10.0, lambda_b=0.1):
    if lambda_a < 0 or lambda_b < 0:
        raise InvalidInputError("loss weights must be non-negative")
    return ad.as_tensor(color) + lambda_a * ad.as_tensor(offset) + lambda_b * ad.as_tensor(correction)
