"""Pinhole cameras, SE(3) pose updates, ray generation and pose-error metrics.

Conventions: ``rotation`` is camera-to-world, the camera looks down its
local -z axis with +y up, and image rows grow downward. Pixel coordinates
are continuous; the center of integer pixel ``(col, row)`` is
``(col + 0.5, row + 0.5)``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import AlignmentError, DimensionError, FormatError, InvalidInputError

# bounding-sphere radius of an object normalized into the unit cube
OBJECT_RADIUS = math.sqrt(3.0) / 2.0


@dataclass(eq=False)
class CameraPose:
    rotation: np.ndarray
    center: np.ndarray
    focal: float
    width: int
    height: int
    principal: tuple = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        self.focal = float(self.focal)
        if self.principal is None:
            self.principal = (self.width / 2.0, self.height / 2.0)
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        if not self.focal > 0:
            raise InvalidInputError(f"focal length must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")
        r = self.rotation
        if not (np.allclose(r.T @ r, np.eye(3), atol=1e-9) and abs(np.linalg.det(r) - 1.0) < 1e-9):
            raise InvalidInputError("rotation must be orthonormal with determinant +1")

    @property
    def forward(self):
        return -self.rotation[:, 2]

    def matrix(self):
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.center
        return m

    def with_resolution(self, width, height=None):
        height = width if height is None else height
        sx, sy = width / self.width, height / self.height
        return CameraPose(
            self.rotation, self.center, self.focal * sx, width, height,
            (self.principal[0] * sx, self.principal[1] * sy),
        )

    def pixel_centers(self):
        """(H*W, 2) continuous pixel-center coordinates in row-major order."""
        cols, rows = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([cols.ravel(), rows.ravel()], axis=1)

    def project(self, points):
        """World points -> (pixel xy, depth along the viewing axis)."""
        local = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        depth = -local[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.principal[0] + self.focal * local[:, 0] / depth
            y = self.principal[1] - self.focal * local[:, 1] / depth
        return np.stack([x, y], axis=1), depth


@dataclass
class PoseUpdate:
    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64).reshape(3)
        self.delta_t = np.asarray(self.delta_t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.axis_angle)) and np.all(np.isfinite(self.delta_t))):
            raise InvalidInputError("pose update entries must be finite")

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = exp_so3(self.axis_angle)
        m[:3, 3] = self.delta_t
        return m


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __len__(self):
        return len(self.origins)


def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _rodrigues_coefficients(s):
    """sin(θ)/θ and (1-cos θ)/θ² as functions of s = θ², with derivatives."""
    s = np.asarray(s, dtype=np.float64)
    if s < 1e-2:
        a = 1.0 - s / 6.0 + s * s / 120.0 - s**3 / 5040.0
        b = 0.5 - s / 24.0 + s * s / 720.0 - s**3 / 40320.0
        da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
        db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
        return a, b, da, db
    th = np.sqrt(s)
    sin, cos = np.sin(th), np.cos(th)
    a = sin / th
    b = (1.0 - cos) / s
    da = (th * cos - sin) / (2.0 * th**3)
    db = (th * sin - 2.0 + 2.0 * cos) / (2.0 * s * s)
    return a, b, da, db


def exp_so3(w):
    """Axis-angle vector -> rotation matrix (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    a, b, _, _ = _rodrigues_coefficients(w @ w)
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(r):
    """Rotation matrix -> axis-angle vector."""
    r = np.asarray(r, dtype=np.float64)
    angle = rotation_angle(r)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < 1e-7:
        return 0.5 * vee
    if np.pi - angle < 1e-6:
        # near pi: axis from the symmetric part
        sym = (r + np.eye(3)) / 2.0
        axis = sym[np.argmax(np.diag(sym))]
        return angle * axis / np.linalg.norm(axis)
    return angle * vee / (2.0 * np.sin(angle))


def rotation_angle(r):
    """Geodesic angle of a rotation matrix in radians; accurate near 0."""
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(vee), 0.5 * (np.trace(r) - 1.0)))


_SKEW_INDEX = np.array([[3, 2, 1], [2, 3, 0], [1, 0, 3]])
_SKEW_SIGN = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])


def _rodrigues_scalars(s):
    """Differentiable (a(s), b(s)) where s = |w|² is a scalar Tensor."""
    a, b, da, db = _rodrigues_coefficients(s.data)

    def scalar_backward(g):
        return (g * da,)

    def second_backward(g):
        return (g * db,)

    return ad._node(np.asarray(a), (s,), scalar_backward), ad._node(np.asarray(b), (s,), second_backward)


def exp_so3_tensor(w):
    """Differentiable Rodrigues map for a (3,) Tensor."""
    w = ad.as_tensor(w)
    padded = ad.concatenate([w, ad.Tensor(np.zeros(1))])
    k = padded[_SKEW_INDEX] * _SKEW_SIGN
    a, b = _rodrigues_scalars(ad.sum(w * w))
    return ad.Tensor(np.eye(3)) + a * k + b * (k @ k)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world rotation looking from ``center`` toward ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    return np.stack([right, cam_up, -fwd], axis=1)


def library_focal(width, radius):
    """Focal length (pixels) at which the object's bounding sphere spans 80% of the image."""
    half = math.asin(min(OBJECT_RADIUS / radius, 0.999))
    return 0.8 * (width / 2.0) / math.tan(half)


def orbit_pose(azimuth, elevation, radius=2.0, resolution=64, focal=None):
    """Look-at pose on the sphere, angles in radians."""
    direction = np.array([
        math.cos(elevation) * math.cos(azimuth),
        math.cos(elevation) * math.sin(azimuth),
        math.sin(elevation),
    ])
    center = radius * direction
    focal = library_focal(resolution, radius) if focal is None else focal
    return CameraPose(look_at(center), center, focal, resolution, resolution)


def sample_library_poses(count, radius=2.0, resolution=128):
    """Fibonacci-lattice poses on a sphere, sorted by (azimuth, elevation).

    The position in the returned list is the library pose index.
    """
    if count < 1 or radius <= 0:
        raise InvalidInputError("need count >= 1 and radius > 0")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    keyed = []
    for i in range(count):
        z = 1.0 - (2.0 * i + 1.0) / count
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        p = np.array([r * math.cos(phi), r * math.sin(phi), z])
        keyed.append(((math.atan2(p[1], p[0]), math.asin(z)), p * radius))
    keyed.sort(key=lambda item: item[0])
    focal = library_focal(resolution, radius)
    return [CameraPose(look_at(c), c, focal, resolution, resolution) for _, c in keyed]


def camera_directions(pose, pixels):
    """Unit ray directions in the camera frame for continuous pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.empty((len(pixels), 3))
    d[:, 0] = (pixels[:, 0] - pose.principal[0]) / pose.focal
    d[:, 1] = -(pixels[:, 1] - pose.principal[1]) / pose.focal
    d[:, 2] = -1.0
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_rays(pose, pixels, bounds):
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(pixels < 0) or np.any(pixels[:, 0] > pose.width) or np.any(pixels[:, 1] > pose.height):
        raise InvalidInputError("pixel coordinates outside the image")
    near, far = bounds
    if not near < far:
        raise InvalidInputError("need near < far")
    dirs = camera_directions(pose, pixels) @ pose.rotation.T
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return Rays(origins, dirs, float(near), float(far))


def apply_pose_update(update, init):
    """P_opt = T · P_init with T the rigid transform of ``update``."""
    m = update.matrix() @ init.matrix()
    return CameraPose(m[:3, :3], m[:3, 3], init.focal, init.width, init.height, init.principal)


def umeyama(source, target):
    """Similarity (s, R, t) minimizing sum |s R source_i + t - target_i|²."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise DimensionError("point sets must be matching (n, 3) arrays")
    mu_s, mu_t = source.mean(0), target.mean(0)
    xs, xt = source - mu_s, target - mu_t
    sv_s = np.linalg.svd(xs, compute_uv=False)
    sv_t = np.linalg.svd(xt, compute_uv=False)
    if len(source) < 3 or sv_s[1] <= 1e-6 * max(sv_s[0], 1e-300) or sv_t[1] <= 1e-6 * max(sv_t[0], 1e-300):
        raise AlignmentError("camera centers are collinear; global alignment is ill-conditioned")
    cov = xt.T @ xs / len(source)
    u, d, vt = np.linalg.svd(cov)
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1.0
    r = u @ fix @ vt
    var_s = (xs * xs).sum() / len(source)
    s = float(np.trace(np.diag(d) @ fix) / var_s)
    t = mu_t - s * r @ mu_s
    return s, r, t


def align_poses(estimated, reference):
    """Similarity mapping estimated camera centers onto the reference ones."""
    if len(estimated) != len(reference):
        raise DimensionError("pose lists differ in length")
    if len(estimated) < 2:
        raise InvalidInputError("need at least two poses")
    return umeyama([p.center for p in estimated], [p.center for p in reference])


def pose_registration_error(estimated, reference):
    """Mean rotation error (degrees) and mean center error (x100) after alignment."""
    s, r, t = align_poses(estimated, reference)
    rot, trans = [], []
    for est, ref in zip(estimated, reference):
        rot.append(math.degrees(rotation_angle(ref.rotation.T @ r @ est.rotation)))
        trans.append(np.linalg.norm(s * r @ est.center + t - ref.center))
    return float(np.mean(rot)), float(np.mean(trans) * 100.0)


def map_to_estimated_frame(pose, similarity):
    """Bring a reference-frame pose into the frame of the estimated poses."""
    s, r, t = similarity
    center = r.T @ (pose.center - t) / s
    return CameraPose(r.T @ pose.rotation, center, pose.focal, pose.width, pose.height, pose.principal)


def poses_to_json(poses):
    return [
        {
            "index": i,
            "camera_to_world": [float(v) for v in p.matrix().ravel()],
            "focal": p.focal,
            "width": p.width,
            "height": p.height,
        }
        for i, p in enumerate(poses)
    ]


def poses_from_json(records):
    poses = []
    for n, rec in enumerate(records):
        try:
            m = np.asarray(rec["camera_to_world"], dtype=np.float64).reshape(4, 4)
            poses.append(CameraPose(m[:3, :3], m[:3, 3], rec["focal"], rec["width"], rec["height"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"pose record {n}: {exc}") from None
    return poses


def save_poses(path, poses):
    with open(path, "w") as fh:
        json.dump(poses_to_json(poses), fh, indent=1)


def load_poses(path):
    with open(path) as fh:
        try:
            records = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return poses_from_json(records)
