"""Triangle meshes: OBJ loading, watertightness, parity occupancy, silhouettes."""

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import FormatError, InvalidInputError, SurfaceAmbiguousError
from .masks import MaskRaster

DET_EPS = 1e-9
T_EPS = 1e-9
SURFACE_TOL = 1e-6


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    watertight: bool = None
    name: str = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0 or len(self.vertices) == 0:
            raise InvalidInputError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise InvalidInputError("triangle index out of range")
        if self.watertight is None:
            self.watertight = is_watertight(self.triangles)
        self._cache = None

    @property
    def corners(self):
        """(M, 3, 3) triangle corner coordinates."""
        return self.vertices[self.triangles]

    @property
    def extent(self):
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)

    def _arrays(self):
        if self._cache is None:
            c = self.corners
            v0 = c[:, 0]
            e1 = c[:, 1] - v0
            e2 = c[:, 2] - v0
            self._cache = (v0, e1, e2)
        return self._cache


class OccupancyQuery(NamedTuple):
    point: np.ndarray
    directions: np.ndarray


class RayHits(NamedTuple):
    count: int
    t_values: np.ndarray
    watertight: bool


def is_watertight(triangles):
    """Every edge used exactly twice, once in each direction."""
    tri = np.asarray(triangles, dtype=np.int64)
    if np.any(tri[:, 0] == tri[:, 1]) or np.any(tri[:, 1] == tri[:, 2]) or np.any(tri[:, 0] == tri[:, 2]):
        return False
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    n = int(tri.max()) + 1
    keys = edges[:, 0] * n + edges[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False
    reverse = edges[:, 1] * n + edges[:, 0]
    return bool(np.all(np.isin(reverse, keys)))


def normalize_vertices(vertices):
    """Center the bounding box at the origin and scale the largest extent to 1."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    size = float((hi - lo).max())
    if size <= 0:
        raise InvalidInputError("mesh has zero extent")
    return (vertices - (lo + hi) / 2.0) / size


def _weld(vertices, triangles):
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)[triangles]


def parse_obj(text):
    """Parse the ``v``/``f`` subset of OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            try:
                xyz = [float(p) for p in parts[1:4]]
            except ValueError:
                raise FormatError(f"bad vertex {raw.strip()!r}", lineno) from None
            if len(xyz) != 3:
                raise FormatError("vertex needs three coordinates", lineno)
            verts.append(xyz)
        elif tag == "f":
            idx = []
            for p in parts[1:]:
                try:
                    i = int(p.split("/")[0])
                except ValueError:
                    raise FormatError(f"bad face index {p!r}", lineno) from None
                if i == 0:
                    raise FormatError("face indices are 1-based", lineno)
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise FormatError(f"face index {p} out of range", lineno)
                idx.append(i)
            if len(idx) < 3:
                raise FormatError("face needs at least three vertices", lineno)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not faces:
        raise InvalidInputError("mesh is empty")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def load_mesh(path, normalize=True, weld=True):
    """Read an OBJ file; coincident vertices are welded before the watertight check."""
    with open(path) as fh:
        text = fh.read()
    verts, faces = parse_obj(text)
    if weld:
        verts, faces = _weld(verts, faces)
    if normalize:
        verts = normalize_vertices(verts)
    name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return TriangleMesh(verts, faces, name=name)


def save_obj(mesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ray casting


def _distinct_count(t):
    """Count finite entries per row after merging values closer than T_EPS."""
    t = np.sort(t, axis=1)
    finite = np.isfinite(t)
    with np.errstate(invalid="ignore"):
        gaps = np.diff(t, axis=1, prepend=-np.inf) > T_EPS
    return np.sum(finite & gaps, axis=1)


def hits_shared_direction(mesh, origins, direction):
    """(N, M) hit distances for rays sharing one direction; inf where missed."""
    v0, e1, e2 = mesh._arrays()
    d = np.asarray(direction, dtype=np.float64)
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    q_dir = np.cross(e1, d)
    normal = np.cross(e1, e2)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    u = (o @ p.T - np.einsum("ij,ij->i", v0, p)) * inv
    v = (o @ q_dir.T - np.einsum("ij,ij->i", v0, q_dir)) * inv
    t = (o @ normal.T - np.einsum("ij,ij->i", v0, normal)) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > T_EPS)
    return np.where(hit, t, np.inf)


def hits_shared_origin(mesh, origin, directions):
    """(N, M) hit distances for rays sharing one origin; inf where missed."""
    v0, e1, e2 = mesh._arrays()
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    tvec = np.asarray(origin, dtype=np.float64) - v0
    qvec = np.cross(tvec, e1)
    det = d @ np.cross(e2, e1).T
    ok = np.abs(det) > DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    u = (d @ np.cross(e2, tvec).T) * inv
    v = (d @ qvec.T) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > T_EPS)
    return np.where(hit, t, np.inf)


def ray_intersections(mesh, origin, direction):
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise InvalidInputError("ray direction must be unit length")
    t = hits_shared_direction(mesh, np.asarray(origin, dtype=np.float64)[None], direction)
    ts = np.sort(t[0][np.isfinite(t[0])])
    keep = np.diff(ts, prepend=-np.inf) > T_EPS
    return RayHits(int(keep.sum()), ts[keep], mesh.watertight)


def default_directions(n=3, seed=0):
    """Seeded generic unit directions for parity voting."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def occupancy_batch(mesh, points, directions=None, chunk=2048):
    """Majority vote of per-direction parities; returns uint8 labels in {0, 1}.

    No surface-band check is made here; see ``occupancy`` for the checked
    single-point form.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    directions = default_directions() if directions is None else np.asarray(directions, dtype=np.float64)
    directions = directions.reshape(-1, 3)
    odd = np.zeros(len(points), dtype=np.int64)
    for d in directions:
        for s in range(0, len(points), chunk):
            t = hits_shared_direction(mesh, points[s:s + chunk], d)
            odd[s:s + chunk] += _distinct_count(t) % 2
    return (2 * odd > len(directions)).astype(np.uint8)


def occupancy(mesh, query, surface_tol=SURFACE_TOL):
    point = np.asarray(query.point, dtype=np.float64).reshape(1, 3)
    directions = np.asarray(query.directions, dtype=np.float64).reshape(-1, 3)
    if len(directions) == 0:
        raise InvalidInputError("need at least one direction")
    if np.any(np.abs(np.linalg.norm(directions, axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("query directions must be unit length")
    if surface_distance(mesh, point)[0] < surface_tol:
        raise SurfaceAmbiguousError(f"point {point[0].tolist()} lies within {surface_tol} of the surface")
    return int(occupancy_batch(mesh, point, directions)[0])


def surface_distance(mesh, points, chunk=512):
    """Unsigned distance from each point to the nearest triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v0, e1, e2 = mesh._arrays()
    normal = np.cross(e1, e2)
    nlen = np.linalg.norm(normal, axis=1)
    unit = normal / np.where(nlen > 0, nlen, 1.0)[:, None]
    d11 = np.einsum("ij,ij->i", e1, e1)
    d12 = np.einsum("ij,ij->i", e1, e2)
    d22 = np.einsum("ij,ij->i", e2, e2)
    denom = d11 * d22 - d12 * d12
    good = denom > 0
    denom = np.where(good, denom, 1.0)
    corners = mesh.corners
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        w = p[:, None, :] - v0[None]
        plane = np.einsum("nmk,mk->nm", w, unit)
        a = np.einsum("nmk,mk->nm", w, e1)
        b = np.einsum("nmk,mk->nm", w, e2)
        bu = (d22 * a - d12 * b) / denom
        bv = (d11 * b - d12 * a) / denom
        inside = good & (bu >= 0) & (bv >= 0) & (bu + bv <= 1)
        best = np.where(inside, np.abs(plane), np.inf)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            a0 = corners[:, i]
            seg = corners[:, j] - a0
            slen = np.einsum("ij,ij->i", seg, seg)
            rel = p[:, None, :] - a0[None]
            tt = np.clip(np.einsum("nmk,mk->nm", rel, seg) / np.where(slen > 0, slen, 1.0), 0.0, 1.0)
            diff = rel - tt[..., None] * seg[None]
            best = np.minimum(best, np.sqrt(np.einsum("nmk,nmk->nm", diff, diff)))
        out[s:s + chunk] = best.min(axis=1)
    return out


# silhouettes


def render_silhouette(mesh, pose, resolution=None):
    """Rasterize the mesh's silhouette; foreground where a pixel's ray meets the mesh.

    Pixel centers on a projected triangle edge count as covered, matching the
    inclusive barycentric test of the ray caster.
    """
    if resolution is not None:
        pose = pose.with_resolution(resolution)
    if min(pose.width, pose.height) < 8:
        raise InvalidInputError("silhouette resolution must be at least 8 pixels")
    xy, depth = pose.project(mesh.vertices)
    tri_depth = depth[mesh.triangles]
    if np.all(tri_depth <= 0):
        warnings.warn("mesh lies entirely behind the camera; silhouette is empty", stacklevel=2)
        return MaskRaster(np.zeros((pose.height, pose.width), bool), warning="empty-frustum")
    if np.any(tri_depth <= 1e-9):
        pixels = _raycast_silhouette(mesh, pose)
    else:
        pixels = _rasterize(xy[mesh.triangles], pose.width, pose.height, mesh.watertight)
    mask = MaskRaster(pixels)
    if mask.empty:
        warnings.warn("mesh falls outside the view frustum; silhouette is empty", stacklevel=2)
        mask.warning = "empty-frustum"
    return mask


def _raycast_silhouette(mesh, pose):
    from .camera import camera_directions

    dirs = camera_directions(pose, pose.pixel_centers()) @ pose.rotation.T
    hit = np.zeros(len(dirs), bool)
    for s in range(0, len(dirs), 4096):
        hit[s:s + 4096] = np.isfinite(hits_shared_origin(mesh, pose.center, dirs[s:s + 4096])).any(axis=1)
    return hit.reshape(pose.height, pose.width)


def _rasterize(tri_xy, width, height, front_only):
    out = np.zeros((height, width), bool)
    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    # image y points down, so outward-facing triangles come out clockwise (area < 0)
    keep = area < 0 if front_only else area != 0
    lo = np.floor(tri_xy.min(axis=1) - 0.5).astype(np.int64) + 1
    hi = np.floor(tri_xy.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    keep &= (hi[:, 0] >= lo[:, 0]) & (hi[:, 1] >= lo[:, 1])
    for i in np.flatnonzero(keep):
        xs = np.arange(lo[i, 0], hi[i, 0] + 1) + 0.5
        ys = np.arange(lo[i, 1], hi[i, 1] + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        p0, p1, p2 = a[i], b[i], c[i]
        w0 = (p1[0] - p0[0]) * (py - p0[1]) - (p1[1] - p0[1]) * (px - p0[0])
        w1 = (p2[0] - p1[0]) * (py - p1[1]) - (p2[1] - p1[1]) * (px - p1[0])
        w2 = (p0[0] - p2[0]) * (py - p2[1]) - (p0[1] - p2[1]) * (px - p2[0])
        if area[i] > 0:
            cover = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            cover = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        out[lo[i, 1]:hi[i, 1] + 1, lo[i, 0]:hi[i, 0] + 1] |= cover
    return out
