"""Analytic ray-traced toy scenes used as ground truth in tests and demos."""

import numpy as np

from .camera import camera_directions


def _box_hits(origins, dirs, lo, hi):
    """Slab-test entry distance and entry normal axis; inf where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    t_in = near.max(axis=1)
    t_out = far.min(axis=1)
    hit = (t_in <= t_out) & (t_out > 0) & (t_in > 0)
    return np.where(hit, t_in, np.inf), near.argmax(axis=1)


def _box_texture(points, axis, lo, hi):
    """Distinct base color per face with a gentle two-tone band pattern."""
    base = np.array([
        [0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.85],
        [0.9, 0.75, 0.2], [0.7, 0.3, 0.75], [0.25, 0.75, 0.8],
    ])
    center = (lo + hi) / 2.0
    side = points[np.arange(len(points)), axis] > center[axis]
    rgb = base[2 * axis + side]
    u = (points - lo) / (hi - lo)
    # bands along the longest tangent direction of each face
    tangent = np.where(axis == 0, 1, 0)
    band = 0.5 + 0.5 * np.sin(2.0 * np.pi * u[np.arange(len(points)), tangent])
    return rgb * (0.8 + 0.2 * band[:, None])


class ToyScene:
    """Textured axis-aligned box, optionally standing on a checkered floor."""

    def __init__(self, size=(1.0, 0.6, 0.4), floor=False, floor_half=1.2):
        self.hi = np.asarray(size, dtype=np.float64) / 2.0
        self.lo = -self.hi
        self.floor = floor
        self.floor_lo = np.array([-floor_half, -floor_half, self.lo[2] - 0.06])
        self.floor_hi = np.array([floor_half, floor_half, self.lo[2] - 0.01])

    def occupancy(self, points):
        points = np.asarray(points, dtype=np.float64)
        inside = np.all((points > self.lo) & (points < self.hi), axis=1)
        if self.floor:
            inside |= np.all((points > self.floor_lo) & (points < self.floor_hi), axis=1)
        return inside

    def render(self, pose):
        """(H, W, 3) image on black and the (H, W) object mask."""
        dirs = camera_directions(pose, pose.pixel_centers()) @ pose.rotation.T
        origins = np.broadcast_to(pose.center, dirs.shape)
        t_box, axis = _box_hits(origins, dirs, self.lo, self.hi)
        image = np.zeros((len(dirs), 3))
        hit = np.isfinite(t_box)
        pts = origins[hit] + t_box[hit, None] * dirs[hit]
        image[hit] = _box_texture(pts, axis[hit], self.lo, self.hi)
        if self.floor:
            t_floor, _ = _box_hits(origins, dirs, self.floor_lo, self.floor_hi)
            show = np.isfinite(t_floor) & (t_floor < t_box)
            fp = origins[show] + t_floor[show, None] * dirs[show]
            check = (np.floor(fp[:, 0] * 2.5) + np.floor(fp[:, 1] * 2.5)) % 2
            image[show] = np.where(check[:, None] > 0, [0.55, 0.5, 0.45], [0.35, 0.33, 0.3])
            hit &= ~show
        shape = (pose.height, pose.width)
        return image.reshape(shape + (3,)), hit.reshape(shape)
