"""Command-line entry point: train, eval, predict, profile, gen-synthetic."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from oreyolo.config import ABLATIONS, TrainConfig, load_config, save_config
from oreyolo.errors import OreYOLOError

log = logging.getLogger("oreyolo")


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    from oreyolo.data import load_split
    from oreyolo.train import overfit_one_batch, train

    cfg = _load_cfg(args)
    root = args.data or cfg.data
    if not root:
        raise OreYOLOError("no dataset given: set 'data' in the config or pass --data")
    train_samples = load_split(root, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    if args.overfit_one_batch:
        trace = overfit_one_batch(cfg, train_samples, steps=args.steps)
        with open(out / "overfit.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "total_loss"])
            w.writerows((i, f"{v:.6f}") for i, v in enumerate(trace))
        print(f"initial_loss = {trace[0]:.6f}")
        print(f"final_loss = {trace[-1]:.6f}")
        print(f"ratio = {trace[-1] / trace[0]:.6f}")
        return 0
    val_path = Path(root) / "val.txt"
    val_samples = load_split(root, "val") if val_path.exists() else []
    history = train(cfg, train_samples, val_samples, out_dir=out, progress=True)
    last = history[-1]
    print(f"epochs = {len(history)}")
    print(f"final_total_loss = {last.total_loss:.6f}")
    print(f"val_map50 = {last.val_map50:.6f}")
    print(f"val_map50_95 = {last.val_map50_95:.6f}")
    return 0


def cmd_eval(args) -> int:
    from oreyolo.data import load_split
    from oreyolo.train import evaluate, load_checkpoint

    model, cfg, _ = load_checkpoint(args.checkpoint)
    root = args.data or cfg.data
    if not root:
        raise OreYOLOError("no dataset given: pass --data")
    result = evaluate(model, load_split(root, args.split), cfg)
    sys.stdout.write(result.to_report())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.csv").write_text(result.to_csv())
        (out / f"eval_{args.split}.txt").write_text(result.to_report())
    return 0


def cmd_predict(args) -> int:
    from oreyolo.train import predict_files

    results = predict_files(args.checkpoint, args.images, args.out, args.conf, args.iou)
    for name, dets in results.items():
        print(f"{name}: {len(dets)} detections")
    return 0


def cmd_profile(args) -> int:
    from oreyolo.profile import profile_model

    if args.ablation:
        model_cfg = ABLATIONS[args.ablation]
    else:
        model_cfg = _load_cfg(args).model
    report = profile_model(model_cfg, args.input_size, fps_runs=args.fps_runs)
    print(report.format())
    return 0


def cmd_gen_synthetic(args) -> int:
    from oreyolo.data import AugmentPolicy, expand_dataset, generate_synthetic, save_dataset, split_dataset, write_manifest

    samples = generate_synthetic(args.n, args.seed, args.image_size)
    splits = split_dataset(samples, (7, 2, 1), seed=args.seed)
    out = Path(args.out)
    if args.augment_copies:
        policy = AugmentPolicy(copies=args.augment_copies)
        splits = tuple(expand_dataset(s, policy, seed=args.seed + i) for i, s in enumerate(splits))
    for name, part in zip(("train", "val", "test"), splits):
        save_dataset(part, out)
        write_manifest([s.id for s in part], out / f"{name}.txt")
    print(f"train = {len(splits[0])}")
    print(f"val = {len(splits[1])}")
    print(f"test = {len(splits[2])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oreyolo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, help="dataset root (overrides the config's data key)")
    t.add_argument("--out", type=Path, default=Path("runs/train"))
    t.add_argument("--seed", type=int)
    t.add_argument("--overfit-one-batch", action="store_true")
    t.add_argument("--steps", type=int, default=200, help="steps for --overfit-one-batch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="draw detections onto images")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--out", type=Path, default=Path("runs/predict"))
    pr.add_argument("--conf", type=float)
    pr.add_argument("--iou", type=float)
    pr.add_argument("images", nargs="+", type=Path)
    pr.set_defaults(func=cmd_predict)

    f = sub.add_parser("profile", help="parameter count, GFLOPs and FPS")
    f.add_argument("--config", type=Path)
    f.add_argument("--ablation", choices=sorted(ABLATIONS))
    f.add_argument("--input-size", type=int)
    f.add_argument("--fps-runs", type=int, default=10)
    f.set_defaults(func=cmd_profile)

    g = sub.add_parser("gen-synthetic", help="write a synthetic two-class ore dataset with 7:2:1 manifests")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=320)
    g.add_argument("--augment-copies", type=int, default=0, help="offline augmented copies per image")
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OreYOLOError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
