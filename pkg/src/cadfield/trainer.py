"""Three-phase optimization of the fields and camera poses.

Iterations are counted globally: phase 1 (density pretraining against the
retrieved mesh) occupies ``[0, p1)``, phase 2 (silhouette-driven deformation
and pose refinement) ``[p1, p1 + p2)`` and phase 3 (color plus fine-tuning)
the rest. The pose window and the encoding anneal are absolute ranges.
"""

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import (
    PoseUpdate,
    apply_pose_update,
    camera_directions,
    exp_so3_tensor,
    load_poses,
    save_poses,
)
from .errors import DivergenceError, FormatError, InvalidInputError, NonFiniteError, NotWatertightError
from .fields import EncodingConfig, FieldConfig, density_eval, init_fields
from .masks import MaskRaster, dilate, write_image
from .mesh import occupancy_batch
from .render import (
    loss_color,
    loss_density,
    loss_regularizers,
    loss_silhouette,
    make_batch,
    render_image,
    render_rays,
)


@dataclass
class TrainConfig:
    """Defaults follow a nominal 20k-iteration run; see ``desk`` for the small preset."""

    phase1_iters: int = 5000
    phase2_iters: int = 5000
    phase3_iters: int = 10000
    pose_start: int = 7500
    pose_end: int = 10000
    anneal_start: int = 5000
    anneal_end: int = 7500
    background_boundary: int = 5000
    lr: float = 5e-4
    lambda_a: float = 10.0
    lambda_b: float = 0.1
    batch_rays: int = 1024
    occupancy_batch: int = 4096
    occupancy_pool: int = 60000
    n_samples: int = 128
    eval_samples: int = 128
    density_scale: float = 50.0
    width: int = 128
    feature_width: int = 128
    pos_freqs: int = 10
    dir_freqs: int = 4
    near: float = 1.0
    far: float = 3.0
    scene_half: float = 1.6
    dilation: float = 0.1
    seed: int = 0
    use_init: bool = True
    use_pose_opt: bool = True
    use_deformation: bool = True
    background_mode: bool = False

    @property
    def total_iters(self):
        return self.phase1_iters + self.phase2_iters + self.phase3_iters

    def validate(self):
        for name in ("phase2_iters", "phase3_iters", "batch_rays", "occupancy_batch",
                     "occupancy_pool", "n_samples", "eval_samples", "width", "feature_width"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.phase1_iters < 0:
            raise InvalidInputError("phase1_iters must be >= 0")
        if not self.phase1_iters <= self.pose_start <= self.pose_end <= self.total_iters:
            raise InvalidInputError(
                f"pose window [{self.pose_start}, {self.pose_end}) must lie inside "
                f"[{self.phase1_iters}, {self.total_iters}]"
            )
        if not 0 <= self.anneal_start <= self.anneal_end:
            raise InvalidInputError("need 0 <= anneal_start <= anneal_end")
        if not 0 <= self.background_boundary <= self.total_iters:
            raise InvalidInputError("background_boundary outside the run")
        if not self.near < self.far or self.near <= 0:
            raise InvalidInputError("need 0 < near < far")
        if self.lr <= 0 or self.lambda_a < 0 or self.lambda_b < 0 or self.density_scale <= 0:
            raise InvalidInputError("lr and density_scale must be positive, loss weights >= 0")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def desk_preset(total=2000, **overrides):
    """Proportional rescaling of the nominal schedule to ``total`` iterations."""
    scale = total / 20000.0
    base = dict(
        phase1_iters=round(5000 * scale), phase2_iters=round(5000 * scale),
        phase3_iters=total - 2 * round(5000 * scale),
        pose_start=round(7500 * scale), pose_end=round(10000 * scale),
        anneal_start=round(5000 * scale), anneal_end=round(7500 * scale),
        background_boundary=round(5000 * scale),
        batch_rays=128, occupancy_batch=1024, occupancy_pool=30000,
        n_samples=48, eval_samples=96, width=64, feature_width=64,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


PRESETS = {"paper": lambda: TrainConfig().validate(), "desk": desk_preset}


def _coerce(name, kind, text):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise FormatError(f"{name}: expected {kind.__name__}, got {text!r}") from None


CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text, base=None):
    """``key = value`` lines (``#`` comments); the optional ``preset`` key picks the base."""
    values, preset = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError("expected 'key = value'", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            preset = value
            continue
        if key not in CONFIG_TYPES:
            raise FormatError(f"unknown config key {key!r}", lineno)
        values[key] = _coerce(key, CONFIG_TYPES[key], value)
    if preset is not None:
        if preset not in PRESETS:
            raise FormatError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]()
    base = base or TrainConfig()
    return dataclasses.replace(base, **values).validate()


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def config_to_text(config):
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in dataclasses.fields(config))


@dataclass
class Views:
    """Ordered training views: images (V, H, W, 3), masks (V, H, W), initial poses."""

    images: np.ndarray
    masks: np.ndarray
    poses: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray([m.pixels if isinstance(m, MaskRaster) else m for m in self.masks], bool)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InvalidInputError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if self.masks.shape != self.images.shape[:3] or len(self.poses) != len(self.images):
            raise InvalidInputError("images, masks and poses disagree in count or size")
        for pose, img in zip(self.poses, self.images):
            if (pose.height, pose.width) != img.shape[:2]:
                raise InvalidInputError("pose resolution differs from its image")


@dataclass
class TrainState:
    params: object
    init_poses: list
    pose_w: list
    pose_t: list
    optimizer: ad.OptimizerState
    config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)
    checkpoint: dict = None

    def pose_updates(self):
        return [PoseUpdate(w.data, t.data) for w, t in zip(self.pose_w, self.pose_t)]

    def current_poses(self):
        return [apply_pose_update(u, p) for u, p in zip(self.pose_updates(), self.init_poses)]

    def encoding(self, alpha=None):
        return EncodingConfig(self.config.pos_freqs, self.config.dir_freqs,
                              anneal_alpha(self.config, self.iteration) if alpha is None else alpha)

    def arrays(self):
        out = {f"field.{k}": v for k, v in self.params.arrays().items()}
        for i, (w, t) in enumerate(zip(self.pose_w, self.pose_t)):
            out[f"pose.{i}.w"] = w.data
            out[f"pose.{i}.t"] = t.data
        return out

    def load_arrays(self, arrays):
        self.params.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("field.")})
        for i, (w, t) in enumerate(zip(self.pose_w, self.pose_t)):
            w.data = np.array(arrays[f"pose.{i}.w"], copy=True)
            t.data = np.array(arrays[f"pose.{i}.t"], copy=True)

    @property
    def deformation_mode(self):
        return "learned" if self.config.use_deformation else "off"

    def render(self, pose, samples=None):
        return render_image(self.params, pose, self.encoding(), (self.config.near, self.config.far),
                            samples or self.config.eval_samples, self.deformation_mode,
                            self.config.density_scale)


def anneal_alpha(config, iteration):
    """Encoding progress: 0 before ``anneal_start``, ``pos_freqs`` from ``anneal_end`` on."""
    if config.anneal_end == config.anneal_start:
        frac = 1.0 if iteration >= config.anneal_end else 0.0
    else:
        frac = (iteration - config.anneal_start) / (config.anneal_end - config.anneal_start)
    return config.pos_freqs * min(max(frac, 0.0), 1.0)


def init_state(init_poses, config):
    config.validate()
    fc = FieldConfig(width=config.width, feature_width=config.feature_width,
                     pos_freqs=config.pos_freqs, dir_freqs=config.dir_freqs)
    params = init_fields(fc, config.seed)
    pose_w = [ad.parameter(np.zeros(3), f"pose.{i}.w") for i in range(len(init_poses))]
    pose_t = [ad.parameter(np.zeros(3), f"pose.{i}.t") for i in range(len(init_poses))]
    return TrainState(params, list(init_poses), pose_w, pose_t, ad.OptimizerState(lr=config.lr), config)


HISTORY_COLUMNS = ("iteration", "phase", "L_color", "L_density", "L_offset", "L_correction", "total")


def _record(state, phase, total, color=None, density=None, offset=None, correction=None):
    state.history.append({
        "iteration": state.iteration, "phase": phase,
        "L_color": color, "L_density": density, "L_offset": offset,
        "L_correction": correction, "total": total,
    })


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                "" if row[c] is None else (repr(float(row[c])) if c.startswith(("L_", "total")) else row[c])
                for c in HISTORY_COLUMNS
            ])


def save_state(state, path, phase):
    meta = {"phase": phase, "iteration": state.iteration, "views": len(state.init_poses)}
    ad.save_checkpoint(path, state.arrays(), step=state.iteration, meta=meta)


def _snapshot(state):
    state.checkpoint = {k: np.array(v, copy=True) for k, v in state.arrays().items()}


def _checkpoint(state, out_dir, phase):
    _snapshot(state)
    if out_dir:
        save_state(state, os.path.join(out_dir, f"phase{phase}.ckpt"), phase)


def _step(state, loss, trainable):
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    for p in state.params.tensors.values():
        p.grad = None
    for p in state.pose_w + state.pose_t:
        p.grad = None
    ad.zero_grad(trainable)
    loss.backward()
    ad.adam_step(trainable, state.optimizer)


def _guarded(state, body):
    """Run one iteration; on a non-finite value roll back to the last snapshot."""
    try:
        body()
    except NonFiniteError as exc:
        if state.checkpoint is not None:
            state.load_arrays(state.checkpoint)
        raise DivergenceError(f"training diverged ({exc})", state.iteration) from None


def _field_group(state, *prefixes):
    out = {}
    for prefix in prefixes:
        out.update({f"field.{k}": v for k, v in state.params.group(prefix).items()})
    return out


# phase 1


def sample_occupancy_points(mesh, count, scene_half, rng):
    """Uniform points over the render volume, near the object and near its surface."""
    n_wide = count // 3
    n_box = count // 3
    n_surf = count - n_wide - n_box
    wide = rng.uniform(-scene_half, scene_half, (n_wide, 3))
    box = rng.uniform(-0.6, 0.6, (n_box, 3))
    v = mesh.vertices[mesh.triangles]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    tri = rng.choice(len(area), size=n_surf, p=area / area.sum())
    r1, r2 = rng.random(n_surf), rng.random(n_surf)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    surf = np.einsum("nk,nkd->nd", bary, v[tri]) + rng.normal(0.0, 0.02, (n_surf, 3))
    points = np.concatenate([wide, box, surf])
    return points, occupancy_batch(mesh, points)


def phase1_pretrain(mesh, state, rng, out_dir=None):
    """Fit the template density to the mesh occupancy with cross-entropy."""
    cfg = state.config
    if not mesh.watertight:
        raise NotWatertightError("phase 1 needs a watertight mesh")
    if not cfg.use_init or cfg.phase1_iters == 0:
        state.iteration = cfg.phase1_iters
        _checkpoint(state, out_dir, 1)
        return state
    points, occ = sample_occupancy_points(mesh, cfg.occupancy_pool, cfg.scene_half, rng)
    occ = occ.astype(np.float64)
    trainable = _field_group(state, "density")
    encoding = state.encoding(alpha=0.0)

    def body():
        idx = rng.integers(0, len(points), cfg.occupancy_batch)
        sigma, _ = density_eval(state.params, points[idx], encoding)
        loss = loss_density(sigma, occ[idx])
        _step(state, loss, trainable)
        _record(state, 1, loss.item(), density=loss.item())

    _snapshot(state)
    while state.iteration < cfg.phase1_iters:
        _guarded(state, body)
        state.iteration += 1
    _checkpoint(state, out_dir, 1)
    return state


# rays


class RayPool:
    """Candidate training pixels with their colors and mask labels."""

    def __init__(self, views, mode="dilated", dilation=0.1):
        cols, rows, ids = [], [], []
        for v, mask in enumerate(views.masks):
            if mode == "full":
                keep = np.ones_like(mask)
            elif mode == "dilated":
                box = MaskRaster(mask).bbox
                if box is None:
                    keep = np.ones_like(mask)
                else:
                    radius = int(math.ceil(dilation * max(box[2] - box[0], box[3] - box[1])))
                    keep = dilate(mask, radius)
            else:
                raise InvalidInputError(f"unknown ray pool mode {mode!r}")
            r, c = np.nonzero(keep)
            rows.append(r)
            cols.append(c)
            ids.append(np.full(len(r), v))
        self.view = np.concatenate(ids)
        self.row = np.concatenate(rows)
        self.col = np.concatenate(cols)
        self.color = views.images[self.view, self.row, self.col]
        self.mask = views.masks[self.view, self.row, self.col].astype(np.float64)
        self.pixel = np.stack([self.col + 0.5, self.row + 0.5], axis=1)

    def __len__(self):
        return len(self.view)

    def draw(self, rng, count):
        idx = rng.integers(0, len(self), count)
        return idx[np.argsort(self.view[idx], kind="stable")]


def _pose_tensors(state, v):
    init = state.init_poses[v]
    rot = exp_so3_tensor(state.pose_w[v])
    center = ad.reshape(rot @ init.center.reshape(3, 1), (3,)) + state.pose_t[v]
    return rot @ init.rotation, center


def ray_batch(state, pool, idx, pose_grad, rng):
    """Sample points for the drawn pixels; differentiable in the poses when ``pose_grad``."""
    cfg = state.config
    views = pool.view[idx]
    origins, dirs = [], []
    current = None if pose_grad else state.current_poses()
    for v in np.unique(views):
        sel = idx[views == v]
        local = camera_directions(state.init_poses[v], pool.pixel[sel])
        if pose_grad:
            rot, center = _pose_tensors(state, v)
            dirs.append(local @ ad.transpose(rot))
            origins.append(ad.broadcast_to(center, (len(sel), 3)))
        else:
            pose = current[v]
            dirs.append(local @ pose.rotation.T)
            origins.append(np.broadcast_to(pose.center, (len(sel), 3)))
    if pose_grad:
        o, d = ad.concatenate(origins), ad.concatenate(dirs)
    else:
        o, d = np.concatenate(origins), np.concatenate(dirs)
    return make_batch(o, d, cfg.n_samples, cfg.near, cfg.far, stratified=True, rng=rng)


def _pose_group(state):
    out = {}
    for i, (w, t) in enumerate(zip(state.pose_w, state.pose_t)):
        out[f"pose.{i}.w"] = w
        out[f"pose.{i}.t"] = t
    return out


def _in_pose_window(state):
    cfg = state.config
    return cfg.use_pose_opt and cfg.pose_start <= state.iteration < cfg.pose_end


def _regularizers(out):
    if out.offsets is None:
        return ad.Tensor(0.0), ad.Tensor(0.0)
    return loss_regularizers(out.offsets, out.corrections)


def _render_step(state, pool, rng, phase, use_color, field_prefixes, train_poses=True):
    cfg = state.config
    idx = pool.draw(rng, cfg.batch_rays)
    pose_grad = train_poses and _in_pose_window(state)
    batch = ray_batch(state, pool, idx, pose_grad, rng)
    out = render_rays(batch, state.params, state.encoding(), state.deformation_mode,
                      cfg.density_scale, with_color=use_color)
    if use_color:
        data = loss_color(out, pool.color[idx])
    else:
        data = loss_silhouette(out, pool.mask[idx])
    offset, corr = _regularizers(out)
    total = data + cfg.lambda_a * offset + cfg.lambda_b * corr
    trainable = _field_group(state, *field_prefixes)
    if pose_grad:
        trainable.update(_pose_group(state))
    _step(state, total, trainable)
    _record(state, phase, total.item(), color=data.item(), offset=offset.item(), correction=corr.item())


def _field_prefixes(state, color):
    prefixes = ["density"]
    if state.config.use_deformation:
        prefixes.append("deform")
    if color:
        prefixes.append("color")
    return prefixes


def phase2_deform_and_pose(views, state, rng, out_dir=None):
    """Silhouette re-rendering loss on density, deformation and (in the window) poses."""
    cfg = state.config
    pool = RayPool(views, "full" if cfg.background_mode else "dilated", cfg.dilation)
    end = cfg.phase1_iters + cfg.phase2_iters
    prefixes = _field_prefixes(state, color=False)
    while state.iteration < end:
        _guarded(state, lambda: _render_step(state, pool, rng, 2, False, prefixes))
        state.iteration += 1
    _checkpoint(state, out_dir, 2)
    return state


def phase3_joint(views, state, rng, out_dir=None):
    """Color loss plus deformation regularizers over every field parameter."""
    cfg = state.config
    pool = RayPool(views, "full" if cfg.background_mode else "dilated", cfg.dilation)
    prefixes = _field_prefixes(state, color=True)
    while state.iteration < cfg.total_iters:
        _guarded(state, lambda: _render_step(state, pool, rng, 3, True, prefixes))
        state.iteration += 1
    _checkpoint(state, out_dir, 3)
    return state


def optimize_poses(views, state, iterations, rng, ray_mode="full", lr=None, final_lr=None):
    """Pose-only refinement against frozen fields with the silhouette loss.

    ``lr`` defaults to the config rate; with ``final_lr`` the rate decays
    geometrically to it over the run.
    """
    pool = RayPool(views, ray_mode, state.config.dilation)
    cfg = state.config
    start_lr = cfg.lr if lr is None else lr
    end_lr = start_lr if final_lr is None else final_lr
    if start_lr <= 0 or end_lr <= 0:
        raise InvalidInputError("learning rates must be positive")
    saved = cfg.pose_start, cfg.pose_end, cfg.use_pose_opt, state.optimizer.lr
    cfg.pose_start, cfg.pose_end, cfg.use_pose_opt = state.iteration, state.iteration + iterations, True
    try:
        for k in range(iterations):
            state.optimizer.lr = start_lr * (end_lr / start_lr) ** (k / max(iterations - 1, 1))
            _guarded(state, lambda: _render_step(state, pool, rng, 2, False, []))
            state.iteration += 1
    finally:
        cfg.pose_start, cfg.pose_end, cfg.use_pose_opt, state.optimizer.lr = saved
    return state


def train_object(mesh, views, config, out_dir=None):
    """Phases 1-3 on background-removed views."""
    rng = np.random.default_rng(config.seed)
    state = init_state(views.poses, config)
    phase1_pretrain(mesh, state, rng, out_dir)
    phase2_deform_and_pose(views, state, rng, out_dir)
    phase3_joint(views, state, rng, out_dir)
    return state


def train_with_background(mesh, views, config, out_dir=None):
    """Two-stage schedule for full-frame images.

    Before ``background_boundary`` only the object density is supervised by
    the mesh occupancy; afterwards rays from whole images drive the color
    loss plus regularizers, with poses free inside the window.
    """
    config = config.replace(background_mode=True)
    rng = np.random.default_rng(config.seed)
    state = init_state(views.poses, config)
    boundary = config.background_boundary
    cfg1 = config.replace(phase1_iters=boundary, pose_start=max(config.pose_start, boundary),
                          pose_end=max(config.pose_end, boundary))
    state.config = cfg1
    phase1_pretrain(mesh, state, rng, out_dir)
    state.config = config
    pool = RayPool(views, "full")
    prefixes = _field_prefixes(state, color=True)
    while state.iteration < config.total_iters:
        _guarded(state, lambda: _render_step(state, pool, rng, 3, True, prefixes))
        state.iteration += 1
    _checkpoint(state, out_dir, 3)
    return state


def write_outputs(state, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_history(os.path.join(out_dir, "loss_history.csv"), state.history)
    save_poses(os.path.join(out_dir, "poses.json"), state.current_poses())
    save_poses(os.path.join(out_dir, "init_poses.json"), state.init_poses)
    with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
        fh.write(config_to_text(state.config))


def load_run(run_dir, checkpoint=None):
    """Rebuild a trained state from a run directory written by ``run_full``."""
    for name in ("config.cfg", "init_poses.json"):
        if not os.path.isfile(os.path.join(run_dir, name)):
            raise FormatError(f"{run_dir}: missing {name}; not a run directory")
    config = load_config(os.path.join(run_dir, "config.cfg"))
    state = init_state(load_poses(os.path.join(run_dir, "init_poses.json")), config)
    if checkpoint is None:
        found = [p for p in (3, 2, 1) if os.path.isfile(os.path.join(run_dir, f"phase{p}.ckpt"))]
        if not found:
            raise FormatError(f"{run_dir}: no checkpoint found")
        checkpoint = os.path.join(run_dir, f"phase{found[0]}.ckpt")
    arrays, header = ad.load_checkpoint(checkpoint)
    state.load_arrays(arrays)
    state.iteration = int(header["step"])
    return state


def run_full(images, masks, library, config, out_dir=None, k=10, max_discard=2, names=None):
    """Retrieval, then the training phases; returns ``(state, report)``."""
    from .evalkit import psnr
    from .retrieval import assigned_poses, result_to_json, retrieve

    images = np.asarray(images, dtype=np.float64)
    masks = [m if isinstance(m, MaskRaster) else MaskRaster(m) for m in masks]
    result = retrieve(masks, library, k, max_discard)
    height, width = images.shape[1:3]
    kept = [view for view, _, _ in result.assignments]
    poses = assigned_poses(result, library, width, height)
    views = Views(images[kept], [masks[v] for v in kept], poses)
    mesh = library.entry(result.model_id).mesh
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if config.background_mode:
        state = train_with_background(mesh, views, config, out_dir)
    else:
        state = train_object(mesh, views, config, out_dir)
    train_psnr = []
    renders = []
    for pose, image in zip(state.current_poses(), views.images):
        color, _ = state.render(pose)
        renders.append(color)
        train_psnr.append(psnr(color, image))
    report = {
        "retrieval": result_to_json(result, library, width, height, names),
        "kept_views": kept,
        "train_psnr": train_psnr,
        "iterations": state.iteration,
    }
    if out_dir:
        write_outputs(state, out_dir)
        for view, color in zip(kept, renders):
            write_image(os.path.join(out_dir, f"train_render_{view}.png"), color)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    return state, report

