"""Silhouette matching against the library and order-constrained pose retrieval."""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import poses_to_json
from .errors import DimensionError, EmptySilhouetteError, InvalidInputError, TooManyDiscardsError
from .masks import MaskRaster

CANONICAL = 64


@dataclass
class RetrievalResult:
    model_id: str
    assignments: list
    total_score: float
    discarded_views: list = field(default_factory=list)

    @property
    def pose_indices(self):
        return [p for _, p, _ in self.assignments]


def normalize_mask(mask, canonical=CANONICAL):
    """Crop to the bounding box, scale the longer side to ``canonical``, center it."""
    if not isinstance(mask, MaskRaster):
        mask = MaskRaster(mask)
    box = mask.bbox
    if box is None:
        raise EmptySilhouetteError("mask has no foreground pixels")
    r0, c0, r1, c1 = box
    crop = mask.pixels[r0:r1, c0:c1]
    h, w = crop.shape
    scale = canonical / max(h, w)
    nh = min(canonical, max(1, int(round(h * scale))))
    nw = min(canonical, max(1, int(round(w * scale))))
    if (nh, nw) == (h, w):
        resized = crop
    else:
        img = Image.fromarray(crop.astype(np.float32), mode="F")
        resized = np.asarray(img.resize((nw, nh), Image.BILINEAR)) >= 0.5
        if not resized.any():
            resized = np.asarray(Image.fromarray(crop.astype(np.uint8)).resize((nw, nh), Image.NEAREST)) > 0
    out = np.zeros((canonical, canonical), bool)
    top, left = (canonical - nh) // 2, (canonical - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    return MaskRaster(out, normalized=True)


def mask_iou(a, b):
    pa = a.pixels if isinstance(a, MaskRaster) else np.asarray(a, bool)
    pb = b.pixels if isinstance(b, MaskRaster) else np.asarray(b, bool)
    if pa.shape != pb.shape:
        raise DimensionError(f"mask grids differ: {pa.shape} vs {pb.shape}")
    union = np.count_nonzero(pa | pb)
    if union == 0:
        raise EmptySilhouetteError("IoU of two empty masks is undefined")
    return np.count_nonzero(pa & pb) / union


def _iou_against(stack, query):
    """IoU of one (c, c) mask against a (P, c, c) stack."""
    inter = np.count_nonzero(stack & query, axis=(1, 2))
    union = np.count_nonzero(stack | query, axis=(1, 2))
    return inter / union


def _normalized_inputs(inputs, canonical):
    return [normalize_mask(m, canonical).pixels for m in inputs]


def rank_candidates(inputs, entry, k=10, canonical=CANONICAL):
    """Top-``k`` library poses per view by IoU; ties go to the lower pose index."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    stack = entry.normalized_masks(canonical)
    table = {}
    for view, query in enumerate(_normalized_inputs(inputs, canonical)):
        iou = _iou_against(stack, query)
        order = np.lexsort((np.arange(len(iou)), -iou))[:k]
        table[view] = [(int(i), float(iou[i])) for i in order]
    return table


def model_votes(inputs, library, canonical=CANONICAL):
    """Per-model (votes, summed best IoU) from each view's single best match."""
    queries = _normalized_inputs(inputs, canonical)
    tally = {}
    for query in queries:
        best_id, best = None, -1.0
        for model_id in sorted(library.model_ids):
            score = float(_iou_against(library.entry(model_id).normalized_masks(canonical), query).max())
            if score > best:
                best_id, best = model_id, score
        votes, total = tally.get(best_id, (0, 0.0))
        tally[best_id] = (votes + 1, total + best)
    return tally


def pick_winner(tally):
    """Most votes, then higher summed IoU, then the lexicographically first id."""
    return min(tally, key=lambda m: (-tally[m][0], -tally[m][1], m))


def vote_model(inputs, library, k=10, canonical=CANONICAL):
    if len(inputs) == 0:
        raise InvalidInputError("need at least one view")
    return pick_winner(model_votes(inputs, library, canonical))


def backtrack_assign(table):
    """Order-respecting selection with the largest summed IoU.

    Each view contributes at most one candidate, chosen pose indices must
    strictly increase in view order, and any view may be skipped. The search
    follows the recursive explore-then-skip scheme and keeps the first
    strictly-better total; subtrees that cannot beat the incumbent even with
    every remaining view at its best IoU are pruned. Returns ``None`` when
    no view can be assigned.
    """
    if not table:
        raise InvalidInputError("candidate table is empty")
    keys = list(table)
    cands = [list(table[k]) for k in keys]
    n = len(keys)
    rest = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        rest[i] = rest[i + 1] + max((s for _, s in cands[i]), default=0.0)
    best_seq, best_score = [], 0.0
    chosen = []

    def search(i, score):
        nonlocal best_seq, best_score
        if i == n:
            if score > best_score:
                best_seq, best_score = list(chosen), score
            return
        if score + rest[i] + 1e-9 <= best_score:
            return
        for idx, s in cands[i]:
            if not chosen or idx > chosen[-1][1]:
                chosen.append((keys[i], idx, s))
                search(i + 1, score + s)
                chosen.pop()
        search(i + 1, score)

    search(0, 0.0)
    if not best_seq:
        return None
    used = {key for key, _, _ in best_seq}
    return RetrievalResult(None, best_seq, best_score, [key for key in keys if key not in used])


def retrieve(inputs, library, k=10, max_discard=2, canonical=CANONICAL):
    """Vote for a model, rank its poses per view, then assign poses in view order."""
    if max_discard < 0:
        raise InvalidInputError("max_discard must be >= 0")
    model_id = vote_model(inputs, library, k, canonical)
    table = rank_candidates(inputs, library.entry(model_id), k, canonical)
    result = backtrack_assign(table)
    if result is None:
        raise TooManyDiscardsError("no view could be assigned", list(table))
    result.model_id = model_id
    if len(result.discarded_views) > max_discard:
        raise TooManyDiscardsError(
            f"{len(result.discarded_views)} views conflict with the view order "
            f"(max_discard={max_discard}): {result.discarded_views}",
            result.discarded_views,
        )
    return result


def assigned_poses(result, library, width=None, height=None):
    """Library poses of the assigned views, rescaled to the input image size."""
    entry = library.entry(result.model_id)
    poses = []
    for _, idx, _ in result.assignments:
        pose = entry.poses[idx]
        if width is not None:
            pose = pose.with_resolution(width, height)
        poses.append(pose)
    return poses


def result_to_json(result, library, width=None, height=None, names=None):
    poses = assigned_poses(result, library, width, height)
    records = poses_to_json(poses)
    views = []
    for (view, idx, iou), rec in zip(result.assignments, records):
        views.append({
            "view": names[view] if names else view,
            "pose_index": idx,
            "iou": iou,
            "camera_to_world": rec["camera_to_world"],
            "focal": rec["focal"],
            "width": rec["width"],
            "height": rec["height"],
        })
    return {
        "model_id": result.model_id,
        "views": views,
        "discarded_views": [names[v] if names else v for v in result.discarded_views],
        "total_score": result.total_score,
    }
