"""Command-line entry point: build-library, retrieve, train, render, eval.

Failures print one ``error: <category>: <message>`` line on stderr. Exit
codes: 2 usage, 3 data, 4 training divergence.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import CadFieldError, DivergenceError

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


def _split(value):
    return [v for v in (s.strip() for s in value.split(",")) if v]


def _read_masks(paths):
    """Single-channel files are masks; RGB files are matted on luminance."""
    from PIL import Image

    from .errors import FormatError
    from .masks import luminance_matte, read_image, read_mask

    out = []
    for path in paths:
        try:
            with Image.open(path) as img:
                mode = img.mode
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from None
        out.append(read_mask(path) if mode in ("1", "L", "LA", "I", "I;16") else luminance_matte(read_image(path)))
    return out


def _add_config_flags(parser):
    from .trainer import TrainConfig

    group = parser.add_argument_group("training config keys (override --config)")
    for f in dataclasses.fields(TrainConfig):
        kind = f.type
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        help_text = f"{kind.__name__}, default {f.default}"
        if kind is bool:
            group.add_argument(*flags, dest=f"cfg_{f.name}", metavar="BOOL", help=help_text)
        else:
            group.add_argument(*flags, dest=f"cfg_{f.name}", type=kind, metavar=kind.__name__.upper(),
                               help=help_text)


def _config_from_args(args):
    from .trainer import CONFIG_TYPES, _coerce, desk_preset, load_config, TrainConfig

    base = desk_preset() if args.preset == "desk" else TrainConfig()
    config = load_config(args.config, base) if args.config else base
    changes = {}
    for name, kind in CONFIG_TYPES.items():
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            changes[name] = _coerce(name, bool, value) if kind is bool else value
    if args.seed is not None:
        changes["seed"] = args.seed
    return config.replace(**changes)


def cmd_build_library(args):
    from .library import build_library, save_library
    from .shapes import make_shape

    meshes = []
    if args.meshes:
        for item in _split(args.meshes):
            if os.path.isdir(item):
                meshes += sorted(os.path.join(item, f) for f in os.listdir(item) if f.lower().endswith(".obj"))
            else:
                meshes.append(item)
    if args.builtin:
        meshes += [make_shape(name) for name in _split(args.builtin)]
    if not meshes:
        raise _Usage("build-library needs --meshes or --builtin")
    library = build_library(meshes, args.poses, args.radius, args.resolution)
    save_library(library, args.out)
    print(json.dumps({"library": args.out, "models": library.model_ids, "pose_count": library.pose_count}))


def cmd_retrieve(args):
    from .library import load_library
    from .retrieval import result_to_json, retrieve

    library = load_library(args.library)
    paths = _split(args.images)
    masks = _read_masks(_split(args.masks) if args.masks else paths)
    if len(masks) != len(paths):
        raise _Usage("--masks must list one file per image")
    result = retrieve(masks, library, args.k, args.max_discard)
    h, w = masks[0].shape
    doc = result_to_json(result, library, w, h, paths)
    text = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)


def cmd_train(args):
    from .library import load_library
    from .masks import read_image
    from .trainer import run_full

    config = _config_from_args(args)
    library = load_library(args.library)
    paths = _split(args.images)
    images = np.stack([read_image(p) for p in paths])
    masks = _read_masks(_split(args.masks) if args.masks else paths)
    if len(masks) != len(paths):
        raise _Usage("--masks must list one file per image")
    _, report = run_full(images, masks, library, config, args.out, args.k, args.max_discard, paths)
    print(json.dumps({"out": args.out, "train_psnr": report["train_psnr"],
                      "model_id": report["retrieval"]["model_id"]}))


def _heldout_poses(args):
    from .camera import load_poses

    return load_poses(args.poses)


def cmd_render(args):
    from .masks import write_image
    from .trainer import load_run

    state = load_run(args.run, args.checkpoint)
    poses = _heldout_poses(args) if args.poses else state.current_poses()
    os.makedirs(args.out, exist_ok=True)
    for i, pose in enumerate(poses):
        color, _ = state.render(pose, args.samples)
        write_image(os.path.join(args.out, f"render_{i}.png"), color)
    print(json.dumps({"out": args.out, "rendered": len(poses)}))


def cmd_eval(args):
    from .camera import load_poses
    from .evalkit import evaluate_run, read_lpips_csv, summarize
    from .masks import read_image
    from .trainer import load_run

    state = load_run(args.run, args.checkpoint)
    paths = _split(args.images)
    poses = _heldout_poses(args)
    if len(poses) != len(paths):
        raise _Usage("--poses must hold one record per held-out image")
    images = [read_image(p) for p in paths]
    reference = load_poses(args.train_poses) if args.train_poses else None
    lpips = read_lpips_csv(args.lpips) if args.lpips else None
    names = [os.path.basename(p) for p in paths]
    rows, pose_errors, _ = evaluate_run(state, images, poses, reference, lpips, args.out, names,
                                        align=not args.no_align)
    doc = {"mean": summarize(rows), "views": [dataclasses.asdict(r) for r in rows]}
    if pose_errors is not None:
        doc["pose_errors"] = {"rotation_deg": pose_errors[0], "translation_x100": pose_errors[1]}
    print(json.dumps(doc, indent=1))


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="cadfield", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-library", help="render silhouettes of meshes from a pose lattice")
    p.add_argument("--meshes", help="comma-separated OBJ files or directories of OBJ files")
    p.add_argument("--builtin", help="comma-separated built-in shapes (cuboid, sphere, ...)")
    p.add_argument("--out", required=True, help="library directory to write")
    p.add_argument("--poses", type=int, default=100, help="poses per model (default 100)")
    p.add_argument("--radius", type=float, default=2.0, help="camera distance (default 2)")
    p.add_argument("--resolution", type=int, default=128, help="mask size in pixels (default 128)")
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("retrieve", help="pick a model and per-view poses for ordered masks")
    p.add_argument("--library", required=True, help="library directory")
    p.add_argument("--images", required=True, help="comma-separated images in view order")
    p.add_argument("--masks", help="comma-separated masks matching --images")
    p.add_argument("--k", type=int, default=10, help="candidates per view (default 10)")
    p.add_argument("--max-discard", "--max_discard", dest="max_discard", type=int, default=2,
                   help="largest number of views that may be dropped (default 2)")
    p.add_argument("--out", help="also write the JSON here")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="retrieval followed by the three training phases")
    p.add_argument("--library", required=True, help="library directory")
    p.add_argument("--images", required=True, help="comma-separated RGB images in view order")
    p.add_argument("--masks", help="comma-separated masks (default: luminance matte of the images)")
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="base schedule before --config and flags (default desk)")
    p.add_argument("--k", type=int, default=10, help="candidates per view (default 10)")
    p.add_argument("--max-discard", "--max_discard", dest="max_discard", type=int, default=2,
                   help="largest number of views that may be dropped (default 2)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("render", cmd_render, "render views from a trained run"),
                             ("eval", cmd_eval, "score held-out views of a trained run")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run", required=True, help="run directory written by train")
        p.add_argument("--checkpoint", help="checkpoint file (default: latest phase)")
        p.add_argument("--out", required=(name == "render"), help="output directory")
        if name == "render":
            p.add_argument("--poses", help="poses JSON (default: the optimized training poses)")
            p.add_argument("--samples", type=int, default=None, help="samples per ray")
        else:
            p.add_argument("--images", required=True, help="comma-separated held-out images")
            p.add_argument("--poses", required=True, help="poses JSON of the held-out images")
            p.add_argument("--train-poses", "--train_poses", dest="train_poses",
                           help="reference poses of the training views, for alignment and pose errors")
            p.add_argument("--lpips", help="CSV of externally computed per-view LPIPS")
            p.add_argument("--no-align", "--no_align", dest="no_align", action="store_true",
                           help="render held-out poses as given instead of mapping them through the "
                                "training-pose alignment")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            threadpool_limits(args.threads)
        args.func(args)
    except _Usage as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CadFieldError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
