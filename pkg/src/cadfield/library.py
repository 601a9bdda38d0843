"""The shape library: per-model silhouettes rendered from a fixed pose lattice."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import load_poses, sample_library_poses, save_poses
from .errors import CorruptLibraryError, LibraryBuildError, NotWatertightError
from .masks import read_mask, write_mask
from .mesh import TriangleMesh, load_mesh, render_silhouette, save_obj

FORMAT_VERSION = 1


@dataclass(eq=False)
class LibraryEntry:
    model_id: str
    mesh: TriangleMesh
    poses: list
    masks: list
    _normalized: dict = field(default_factory=dict, repr=False)

    def normalized_masks(self, canonical):
        """(P, canonical, canonical) bool stack, computed once per size."""
        if canonical not in self._normalized:
            from .retrieval import normalize_mask

            self._normalized[canonical] = np.stack(
                [normalize_mask(m, canonical).pixels for m in self.masks]
            )
        return self._normalized[canonical]


@dataclass(eq=False)
class Library:
    entries: list
    pose_count: int
    radius: float
    resolution: int

    def __post_init__(self):
        ids = [e.model_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise LibraryBuildError(f"duplicate model ids in {ids}")

    @property
    def model_ids(self):
        return [e.model_id for e in self.entries]

    def entry(self, model_id):
        for e in self.entries:
            if e.model_id == model_id:
                return e
        raise KeyError(model_id)

    def __len__(self):
        return len(self.entries)


def build_entry(mesh, model_id, poses, resolution):
    if not mesh.watertight:
        raise NotWatertightError(f"model {model_id!r} is not watertight")
    masks = []
    for i, pose in enumerate(poses):
        mask = render_silhouette(mesh, pose, resolution)
        if mask.empty:
            raise LibraryBuildError(f"model {model_id!r}: empty silhouette at pose {i}")
        masks.append(mask)
    return LibraryEntry(model_id, mesh, list(poses), masks)


def build_library(meshes, pose_count=100, radius=2.0, resolution=128):
    """Render every model from ``pose_count`` lattice poses.

    ``meshes`` holds OBJ paths or already-loaded ``TriangleMesh`` objects;
    a model's id is its file stem (or the mesh's ``name``).
    """
    poses = sample_library_poses(pose_count, radius, resolution)
    entries = []
    for item in meshes:
        if isinstance(item, TriangleMesh):
            mesh, model_id = item, item.name
        else:
            mesh = load_mesh(item)
            model_id = mesh.name
        if not model_id:
            raise LibraryBuildError("every library mesh needs a name")
        entries.append(build_entry(mesh, model_id, poses, resolution))
    return Library(entries, pose_count, float(radius), int(resolution))


def save_library(library, root):
    os.makedirs(root, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "models": library.model_ids,
        "pose_count": library.pose_count,
        "radius": library.radius,
        "resolution": library.resolution,
    }
    for entry in library.entries:
        model_dir = os.path.join(root, entry.model_id)
        os.makedirs(os.path.join(model_dir, "masks"), exist_ok=True)
        save_obj(entry.mesh, os.path.join(model_dir, "model.obj"))
        save_poses(os.path.join(model_dir, "poses.json"), entry.poses)
        for i, mask in enumerate(entry.masks):
            write_mask(os.path.join(model_dir, "masks", f"{i}.png"), mask)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_library(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.isfile(path):
        raise CorruptLibraryError(f"missing manifest {path}")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        models = manifest["models"]
        count = int(manifest["pose_count"])
        radius = float(manifest["radius"])
        resolution = int(manifest["resolution"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptLibraryError(f"bad manifest {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorruptLibraryError(f"unsupported library format {manifest.get('format_version')!r}")
    entries = []
    for model_id in models:
        model_dir = os.path.join(root, model_id)
        obj = os.path.join(model_dir, "model.obj")
        pose_file = os.path.join(model_dir, "poses.json")
        for required in (obj, pose_file):
            if not os.path.isfile(required):
                raise CorruptLibraryError(f"missing file {required}")
        mesh = load_mesh(obj, normalize=False, weld=False)
        mesh.name = model_id
        poses = load_poses(pose_file)
        if len(poses) != count:
            raise CorruptLibraryError(
                f"{pose_file}: {len(poses)} pose records but manifest says pose_count={count}"
            )
        masks = []
        for i in range(count):
            mask_path = os.path.join(model_dir, "masks", f"{i}.png")
            if not os.path.isfile(mask_path):
                raise CorruptLibraryError(f"missing mask file {mask_path}")
            masks.append(read_mask(mask_path))
        extra = set(os.listdir(os.path.join(model_dir, "masks"))) - {f"{i}.png" for i in range(count)}
        if extra:
            raise CorruptLibraryError(f"{model_id}: unexpected mask files {sorted(extra)}")
        entries.append(LibraryEntry(model_id, mesh, poses, masks))
    return Library(entries, count, radius, resolution)


def library_equal(a, b, atol=1e-12):
    """Field-for-field comparison (bit-exact masks, pose matrices within ``atol``)."""
    if (a.model_ids != b.model_ids or a.pose_count != b.pose_count or a.radius != b.radius
            or a.resolution != b.resolution):
        return False
    for ea, eb in zip(a.entries, b.entries):
        if not (np.array_equal(ea.mesh.vertices, eb.mesh.vertices)
                and np.array_equal(ea.mesh.triangles, eb.mesh.triangles)):
            return False
        if len(ea.poses) != len(eb.poses) or len(ea.masks) != len(eb.masks):
            return False
        for pa, pb in zip(ea.poses, eb.poses):
            if not np.allclose(pa.matrix(), pb.matrix(), atol=atol, rtol=0) or pa.focal != pb.focal:
                return False
        if not all(ma == mb for ma, mb in zip(ea.masks, eb.masks)):
            return False
    return True

