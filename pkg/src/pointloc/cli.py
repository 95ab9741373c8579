"""Command-line interface.

Subcommands: gen-data, train, eval, teach, find, dump-attention.
Exit codes: 0 success, 1 usage error, 2 data/validation error.
Configuration is flags-only; every artifact echoes the flags that made it.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError, ValidationError
from .model import PRESETS, receptive_field
from .scenegen import Dataset, SceneConfig, build_dataset, load_image_chw
from .training import (
    Localizer,
    ObjectStore,
    TrainConfig,
    evaluate_accuracy,
    find,
    load_checkpoint,
    save_checkpoint,
    teach,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _preset(args):
    return PRESETS[args.preset]


def _load_sized_image(path, preset):
    p = Path(path)
    if not p.exists():
        raise DataError(f"image not found: {p}")
    img = load_image_chw(p)
    s = preset.image_size
    if img.shape != (3, s, s):
        raise DataError(
            f"image {p} has shape {img.shape[1]}x{img.shape[2]}, preset "
            f"'{preset.name}' needs {s}x{s}; resize it to {s}x{s} first"
        )
    return img


def write_pgm(path, arr):
    """8-bit binary PGM, min-max normalized per map."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        q = ((a - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    else:
        q = np.zeros_like(a, dtype=np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _condition_of(config):
    if config.baseline:
        return f"baseline-{config.baseline}"
    if config.ablation_no_modulation:
        return "ablation-no-modulation"
    return "proposed"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty; pass --force to overwrite")
    preset = _preset(args)
    config = SceneConfig(
        canvas=preset.image_size,
        n_train=args.train,
        n_test=args.test,
        min_distractors=args.min_distractors,
        max_distractors=args.max_distractors,
    )
    manifest = build_dataset(out, config, args.seed)
    print(
        f"dataset written to {out}: {manifest['splits']['train']['count']} train / "
        f"{manifest['splits']['test']['count']} test samples, canvas "
        f"{manifest['canvas']}px, sprite {manifest['sprite_size']}px, seed {manifest['seed']}"
    )
    return 0


def cmd_train(args):
    dataset = Dataset(args.data)
    config = TrainConfig(
        preset=args.preset,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        ablation_no_modulation=args.ablation == "no-modulation",
        baseline=args.baseline,
        eval_every=args.eval_every,
        early_stop_patience=args.early_stop,
        max_steps=args.max_steps,
    )
    resume_state = None
    if args.resume:
        resume_state = load_checkpoint(args.resume)
        for key in ("preset", "learning_rate", "weight_decay", "batch_size", "seed", "baseline", "ablation_no_modulation"):
            if getattr(resume_state.config, key) != getattr(config, key):
                raise DataError(
                    f"--resume checkpoint was trained with {key}="
                    f"{getattr(resume_state.config, key)!r}, current flags say {getattr(config, key)!r}"
                )
        resume_state.config = config  # epochs may extend the run

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        acc = ""
        if row["exemplar_acc"] is not None:
            acc = f"  exemplar_acc={row['exemplar_acc']:.4f}"
            if row["search_acc"] is not None:
                acc += f"  search_acc={row['search_acc']:.4f}"
        print(
            f"epoch {row['epoch']:4d}  train_loss={row['train_loss']:.6f}{acc}"
            f"  ({row['seconds']:.1f}s)",
            flush=True,
        )

    result = train(dataset, config, resume_state=resume_state, log=log)
    ckpt_path = out / "checkpoint.ptat"
    save_checkpoint(ckpt_path, result.state)
    csv_path = out / "metrics.csv"
    new_file = not (args.resume and csv_path.exists())
    with open(csv_path, "w" if new_file else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "train_loss", "exemplar_acc", "search_acc"])
        for row in result.metrics:
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['train_loss']:.8f}",
                    "" if row["exemplar_acc"] is None else f"{row['exemplar_acc']:.6f}",
                    "" if row["search_acc"] is None else f"{row['search_acc']:.6f}",
                ]
            )
    last = result.metrics[-1] if result.metrics else {}
    print(
        f"condition={_condition_of(config)} epochs={result.state.epoch} "
        f"final_train_loss={last.get('train_loss', float('nan')):.6f} "
        f"exemplar_acc={last.get('exemplar_acc')} search_acc={last.get('search_acc')} "
        f"checkpoint={ckpt_path}"
    )
    return 0


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.data)
    preset = state.config.resolve_preset()
    if dataset.canvas != preset.image_size:
        raise DataError(
            f"dataset canvas {dataset.canvas} does not match checkpoint preset "
            f"'{preset.name}' ({preset.image_size})"
        )
    localizer = Localizer.for_params(
        state.params, ablation_no_modulation=state.config.ablation_no_modulation
    )
    acc = evaluate_accuracy(localizer, dataset, args.split, baseline=state.config.baseline, limit=args.limit)
    payload = {
        "condition": _condition_of(state.config),
        "preset": preset.name,
        "split": args.split,
        "n": acc["n"],
        "iou_threshold": 0.5,
        "exemplar_accuracy": acc["exemplar"],
        "search_accuracy": acc["search"],
    }
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(f"condition          : {payload['condition']}")
        print(f"preset / split / n : {preset.name} / {args.split} / {acc['n']}")
        print(f"exemplar accuracy  : {acc['exemplar']:.4f} (IOU@0.5)")
        if acc["search"] is not None:
            print(f"search accuracy    : {acc['search']:.4f} (IOU@0.5)")
    return 0


def _open_store(path):
    p = Path(path)
    return ObjectStore.load(p) if p.exists() else ObjectStore()


def cmd_teach(args):
    state = load_checkpoint(args.checkpoint)
    preset = state.config.resolve_preset()
    localizer = Localizer.for_params(
        state.params, ablation_no_modulation=state.config.ablation_no_modulation
    )
    image = _load_sized_image(args.image, preset)
    store = _open_store(args.store)
    out = teach(localizer, image, args.name, store, overwrite=args.force)
    store.save(args.store)
    print(
        f"stored {args.name!r}: {out.f.data.size}-d feature vector "
        f"(exemplar localization at {out.p.data[0]:.1f}, {out.p.data[1]:.1f}); store={args.store}"
    )
    return 0


def cmd_find(args):
    state = load_checkpoint(args.checkpoint)
    preset = state.config.resolve_preset()
    localizer = Localizer.for_params(
        state.params, ablation_no_modulation=state.config.ablation_no_modulation
    )
    image = _load_sized_image(args.image, preset)
    store = _open_store(args.store)
    (x, y), confidence = find(localizer, image, args.name, store)
    if args.json:
        print(json.dumps({"name": args.name, "x": x, "y": y, "confidence": confidence}, sort_keys=True))
    else:
        print(f"{args.name}: x={x:.1f} y={y:.1f} confidence={confidence:.4f}")
    if args.annotate:
        _write_annotated(args.annotate, image, (x, y))
        print(f"annotated image written to {args.annotate}")
    return 0


def _write_annotated(path, image_chw, center, box=24):
    img = (image_chw.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8).copy()
    h, w = img.shape[:2]
    x0, x1 = int(round(center[0] - box / 2)), int(round(center[0] + box / 2))
    y0, y1 = int(round(center[1] - box / 2)), int(round(center[1] + box / 2))
    red = np.array([255, 0, 0], dtype=np.uint8)
    xs = slice(max(x0, 0), min(x1 + 1, w))
    ys = slice(max(y0, 0), min(y1 + 1, h))
    for yy in (y0, y1):
        if 0 <= yy < h:
            img[yy, xs] = red
    for xx in (x0, x1):
        if 0 <= xx < w:
            img[ys, xx] = red
    cx, cy = int(round(center[0])), int(round(center[1]))
    if 0 <= cy < h and 0 <= cx < w:
        img[cy, cx] = red
    Image.fromarray(img, "RGB").save(path, optimize=False)


def cmd_dump_attention(args):
    state = load_checkpoint(args.checkpoint)
    preset = state.config.resolve_preset()
    if state.config.baseline:
        raise DataError("dump-attention needs a proposed/ablation checkpoint, not a baseline head")
    localizer = Localizer.for_params(
        state.params, ablation_no_modulation=state.config.ablation_no_modulation
    )
    image = _load_sized_image(args.image, preset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ex = localizer.exemplar(image)
    write_pgm(out_dir / "x_o.pgm", ex.diagnostics["x_o"])
    write_pgm(out_dir / "x_m.pgm", ex.diagnostics["x_m"])
    write_pgm(out_dir / "x_ostar.pgm", ex.diagnostics["x_ostar"])
    result = {
        "p": [float(ex.p.data[0]), float(ex.p.data[1])],
        "p_hat": None,
        "hand_pose_argmax": None,
        "receptive_field_px": receptive_field()[0],
    }
    if "pos_dist" in ex.diagnostics:
        write_pgm(out_dir / "pos_dist.pgm", ex.diagnostics["pos_dist"])
        pos = ex.diagnostics["pos_dist"]
        r, c = np.unravel_index(int(pos.argmax()), pos.shape)
        orient = int(ex.diagnostics["orient_dist"].argmax())
        result["hand_pose_argmax"] = {
            "cell": [int(c), int(r)],
            "orientation_deg": orient * preset.orient_step_deg,
        }
    if args.search:
        search_img = _load_sized_image(args.search, preset)
        found = localizer.search(search_img, ex.f.data)
        write_pgm(out_dir / "x_ostar_hat.pgm", found.diagnostics["x_ostar_hat"])
        result["p_hat"] = [float(found.p.data[0]), float(found.p.data[1])]
    with open(out_dir / "result.json", "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    print(f"attention maps written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="pointloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset", parents=[])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=5000)
    g.add_argument("--test", type=int, default=1000)
    g.add_argument("--preset", choices=sorted(PRESETS), default="default")
    g.add_argument("--min-distractors", type=int, default=1)
    g.add_argument("--max-distractors", type=int, default=3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="default")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=0, help="0 = preset default")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-8)
    t.add_argument("--ablation", choices=["no-modulation"], default=None)
    t.add_argument("--baseline", choices=["fc", "conv"], default=None)
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--early-stop", type=int, default=0, help="patience in epochs, 0 = off")
    t.add_argument("--max-steps", type=int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("teach", help="store the feature vector of a pointed-at object")
    th.add_argument("--checkpoint", required=True)
    th.add_argument("--store", required=True)
    th.add_argument("--image", required=True)
    th.add_argument("--name", required=True)
    th.add_argument("--force", action="store_true", help="overwrite an existing name")
    th.set_defaults(func=cmd_teach)

    f = sub.add_parser("find", help="locate a taught object in a new scene")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--store", required=True)
    f.add_argument("--image", required=True)
    f.add_argument("--name", required=True)
    f.add_argument("--json", action="store_true")
    f.add_argument("--annotate", default=None, help="write an annotated copy of the scene")
    f.set_defaults(func=cmd_find)

    d = sub.add_parser("dump-attention", help="export attention heatmaps as PGM")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--search", default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValidationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
