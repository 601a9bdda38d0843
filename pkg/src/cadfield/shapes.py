"""Parametric closed meshes for building libraries without external data."""

import math

import numpy as np

from .mesh import TriangleMesh, normalize_vertices


def _finish(vertices, faces, name, normalize=True):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if _signed_volume(v, f) < 0:
        f = f[:, ::-1]
    if normalize:
        v = normalize_vertices(v)
    return TriangleMesh(v, f, name=name)


def _signed_volume(v, f):
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def _merge(*parts):
    verts, faces, offset = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(np.asarray(f) + offset)
        offset += len(v)
    return np.concatenate(verts), np.concatenate(faces)


def _prism(polygon, z0, z1, fan_from=0):
    """Extrude a counter-clockwise polygon; caps are fanned from ``fan_from``."""
    poly = np.asarray(polygon, dtype=np.float64)
    n = len(poly)
    bottom = np.column_stack([poly, np.full(n, z0)])
    top = np.column_stack([poly, np.full(n, z1)])
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [(i, j, n + j), (i, n + j, n + i)]
    order = [(fan_from + k) % n for k in range(n)]
    for k in range(1, n - 1):
        a, b, c = order[0], order[k], order[k + 1]
        faces.append((n + a, n + b, n + c))
        faces.append((a, c, b))
    return np.vstack([bottom, top]), np.array(faces)


def _frustum(r0, r1, z0, z1, segments):
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([np.cos(ang), np.sin(ang)])
    verts = np.vstack([
        np.column_stack([r0 * ring, np.full(segments, z0)]),
        np.column_stack([r1 * ring, np.full(segments, z1)]),
        [[0.0, 0.0, z0], [0.0, 0.0, z1]],
    ])
    n = segments
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [(i, j, n + j), (i, n + j, n + i), (2 * n, j, i), (2 * n + 1, n + i, n + j)]
    return verts, np.array(faces)


def cuboid(size=(1.0, 0.6, 0.4), normalize=True):
    sx, sy, sz = (s / 2.0 for s in size)
    rect = [(-sx, -sy), (sx, -sy), (sx, sy), (-sx, sy)]
    v, f = _prism(rect, -sz, sz)
    return _finish(v, f, "cuboid", normalize)


def icosphere(subdivisions=3, normalize=True):
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return _finish(np.array(verts) * 0.5, faces, "sphere", normalize)


def cylinder(segments=32, radius=0.5, height=1.0, normalize=True):
    ang = 2 * np.pi * np.arange(segments) / segments
    v, f = _prism(np.column_stack([radius * np.cos(ang), radius * np.sin(ang)]), -height / 2, height / 2)
    return _finish(v, f, "cylinder", normalize)


def torus(major=0.35, minor=0.15, segments=32, rings=16, normalize=True):
    phi = 2 * np.pi * np.arange(segments) / segments
    theta = 2 * np.pi * np.arange(rings) / rings
    p, t = np.meshgrid(phi, theta, indexing="ij")
    rad = major + minor * np.cos(t)
    verts = np.stack([rad * np.cos(p), rad * np.sin(p), minor * np.sin(t)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(segments):
        for j in range(rings):
            a = i * rings + j
            b = ((i + 1) % segments) * rings + j
            c = ((i + 1) % segments) * rings + (j + 1) % rings
            d = i * rings + (j + 1) % rings
            faces += [(a, b, c), (a, c, d)]
    return _finish(verts, faces, "torus", normalize)


def lblock(normalize=True):
    """Extruded L: no rotational symmetry about the vertical axis."""
    outline = [(0.0, 0.0), (1.0, 0.0), (1.0, 0.35), (0.4, 0.35), (0.4, 0.8), (0.0, 0.8)]
    v, f = _prism(outline, 0.0, 0.5, fan_from=3)
    return _finish(v, f, "lblock", normalize)


def lamp(normalize=True):
    """Base disc, off-center pole, side arm and conical shade as disjoint closed parts."""
    base = _frustum(0.35, 0.3, 0.0, 0.08, 24)
    pole_v, pole_f = _prism([(-0.03, -0.03), (0.03, -0.03), (0.03, 0.03), (-0.03, 0.03)], 0.1, 0.7)
    pole_v = pole_v + np.array([0.12, 0.0, 0.0])
    shade_v, shade_f = _frustum(0.32, 0.12, 0.72, 1.0, 24)
    shade_v = shade_v + np.array([0.12, 0.0, 0.0])
    arm_v, arm_f = _prism([(0.0, -0.02), (0.25, -0.02), (0.25, 0.02), (0.0, 0.02)], 0.5, 0.55)
    arm_v = arm_v + np.array([0.17, 0.0, 0.0])
    v, f = _merge(base, (pole_v, pole_f), (shade_v, shade_f), (arm_v, arm_f))
    return _finish(v, f, "lamp", normalize)


SHAPES = {
    "cuboid": cuboid,
    "sphere": icosphere,
    "cylinder": cylinder,
    "torus": torus,
    "lblock": lblock,
    "lamp": lamp,
}


def make_shape(name, **kwargs):
    try:
        return SHAPES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}") from None
