"""Training loop, evaluation, prediction and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from oreyolo.config import TrainConfig, dump_config, parse_config
from oreyolo.data import (
    FILL_VALUE,
    BoxLabel,
    DatasetSample,
    load_split,
    mixup,
    mosaic,
    read_image,
)
from oreyolo.errors import DataError, InvalidConfigError
from oreyolo.head import Detection, postprocess, write_detections
from oreyolo.loss import LossBreakdown, total_loss
from oreyolo.metrics import EvalResult, GroundTruth, map_range
from oreyolo.model import OreYOLO, build_model

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "box_loss", "obj_loss", "cls_loss", "total_loss", "val_map50", "val_map50_95")
CLASS_COLORS = ((230, 170, 30), (40, 120, 230), (220, 60, 60), (60, 200, 90))


# ---------------------------------------------------------------- tensors


def letterbox(sample: DatasetSample, size: int) -> tuple[np.ndarray, list[BoxLabel], float, tuple[int, int]]:
    """Resize keeping aspect ratio and pad to ``size x size``.

    Returns the padded image, labels normalised to the padded frame, the scale
    and the (left, top) padding.
    """
    h, w = sample.height, sample.width
    r = size / max(h, w)
    nw, nh = max(1, round(w * r)), max(1, round(h * r))
    img = sample.image
    if (nw, nh) != (w, h):
        img = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
    left, top = (size - nw) // 2, (size - nh) // 2
    out = np.full((size, size, 3), FILL_VALUE, dtype=np.uint8)
    out[top:top + nh, left:left + nw] = img
    labels = []
    for l in sample.labels:
        x1, y1, x2, y2 = l.to_xyxy(nw, nh)
        labels.append(BoxLabel.from_xyxy(l.class_id, x1 + left, y1 + top, x2 + left, y2 + top, size, size))
    return out, labels, r, (left, top)


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def targets_tensor(label_lists: Sequence[Sequence[BoxLabel]]) -> torch.Tensor:
    rows = [[i, l.class_id, l.cx, l.cy, l.w, l.h] for i, ls in enumerate(label_lists) for l in ls]
    return torch.tensor(rows, dtype=torch.float32).reshape(-1, 6)


class TrainSet:
    """Training samples with online mosaic/mixup, seeded per (epoch, index)."""

    def __init__(self, samples: Sequence[DatasetSample], input_size: int, mosaic_prob: float = 0.0,
                 mixup_prob: float = 0.0, seed: int = 0):
        self.samples = list(samples)
        self.input_size = input_size
        self.mosaic_prob = mosaic_prob
        self.mixup_prob = mixup_prob
        self.seed = seed

    def __len__(self) -> int:
        return len(self.samples)

    def _base(self, index: int, rng: np.random.Generator) -> DatasetSample:
        if len(self.samples) >= 4 and rng.random() < self.mosaic_prob:
            others = rng.integers(0, len(self.samples), 3)
            group = [self.samples[index], *(self.samples[int(i)] for i in others)]
            return mosaic(group, rng, self.input_size)
        return self.samples[index]

    def get(self, index: int, epoch: int) -> tuple[np.ndarray, list[BoxLabel]]:
        rng = np.random.default_rng([self.seed, epoch, index])
        s = self._base(index, rng)
        if len(self.samples) >= 2 and rng.random() < self.mixup_prob:
            other = self._base(int(rng.integers(0, len(self.samples))), rng)
            a_img, a_lab, _, _ = letterbox(s, self.input_size)
            b_img, b_lab, _, _ = letterbox(other, self.input_size)
            s = mixup(DatasetSample(a_img, a_lab, s.id), DatasetSample(b_img, b_lab, other.id),
                      float(rng.beta(32.0, 32.0)))
        img, labels, _, _ = letterbox(s, self.input_size)
        return img, labels

    def batches(self, batch_size: int, epoch: int):
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))
        for start in range(0, len(order), batch_size):
            items = [self.get(int(i), epoch) for i in order[start:start + batch_size]]
            yield to_tensor([im for im, _ in items]), targets_tensor([lb for _, lb in items])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: OreYOLO, cfg: TrainConfig, epoch: int, path: str | Path, **extra) -> None:
    torch.save({"state_dict": model.state_dict(), "config": dump_config(cfg), "epoch": epoch, **extra}, path)


def load_checkpoint(path: str | Path) -> tuple[OreYOLO, TrainConfig, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = parse_config(ckpt["config"])
    model = build_model(cfg.model)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, cfg, ckpt


# ---------------------------------------------------------------- training


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate,
        betas=(cfg.momentum, 0.999),
    )


def compute_loss(model: OreYOLO, images: torch.Tensor, targets: torch.Tensor, cfg: TrainConfig) -> LossBreakdown:
    preds = model(images)
    return total_loss(preds, targets, model.anchors, images.shape[-1], cfg.loss, cfg.label_smoothing)


@dataclass
class EpochStats:
    epoch: int
    box_loss: float
    obj_loss: float
    cls_loss: float
    total_loss: float
    val_map50: float
    val_map50_95: float

    def row(self) -> list:
        return [self.epoch, f"{self.box_loss:.6f}", f"{self.obj_loss:.6f}", f"{self.cls_loss:.6f}",
                f"{self.total_loss:.6f}", f"{self.val_map50:.6f}", f"{self.val_map50_95:.6f}"]


def check_classes(samples: Sequence[DatasetSample], num_classes: int) -> None:
    for s in samples:
        for l in s.labels:
            if l.class_id >= num_classes:
                raise InvalidConfigError(
                    f"sample {s.id!r} has class {l.class_id} but the model has {num_classes} classes"
                )


def train(cfg: TrainConfig, train_samples: Sequence[DatasetSample], val_samples: Sequence[DatasetSample] = (),
          out_dir: str | Path | None = None, input_size: int | None = None, progress: bool = False) -> list[EpochStats]:
    """Train from scratch; writes ``last.pt``, ``best.pt`` and ``log.csv`` into ``out_dir`` if given."""
    if not train_samples:
        raise DataError("training split is empty")
    size = input_size or cfg.model.input_size
    check_classes(train_samples, cfg.model.num_classes)
    seed_everything(cfg.seed)
    model = build_model(cfg.model)
    model.head.init_biases(size)
    opt = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)
    data = TrainSet(train_samples, size, cfg.mosaic_prob, cfg.mixup_prob, cfg.seed)

    out = Path(out_dir) if out_dir else None
    writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    history: list[EpochStats] = []
    best = -1.0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            sums = np.zeros(4)
            n = 0
            for images, targets in data.batches(cfg.batch_size, epoch):
                loss = compute_loss(model, images, targets, cfg)
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
                opt.step()
                if sched:
                    sched.step()
                sums += [v.item() for v in (loss.box_loss, loss.obj_loss, loss.cls_loss, loss.total)]
                n += 1
            means = sums / max(n, 1)
            m50, m5095 = float("nan"), float("nan")
            if val_samples:
                res = evaluate(model, val_samples, cfg, size)
                m50, m5095 = res.overall.map50, res.overall.map50_95
            stats = EpochStats(epoch, *means.tolist(), m50, m5095)
            history.append(stats)
            if progress:
                log.info("epoch %d loss %.4f mAP50 %.4f mAP50-95 %.4f", epoch, means[3], m50, m5095)
            if out:
                writer.writerow(stats.row())
                fh.flush()
                save_checkpoint(model, cfg, epoch, out / "last.pt")
                score = m5095 if not math.isnan(m5095) else -means[3]
                if score > best:
                    best = score
                    save_checkpoint(model, cfg, epoch, out / "best.pt")
    finally:
        if writer:
            fh.close()
    return history


def overfit_one_batch(cfg: TrainConfig, samples: Sequence[DatasetSample], steps: int = 200,
                      input_size: int | None = None) -> list[float]:
    """Fit one fixed, un-augmented batch; returns the total loss before every step."""
    size = input_size or cfg.model.input_size
    seed_everything(cfg.seed)
    model = build_model(cfg.model)
    opt = make_optimizer(model, cfg)
    batch = list(samples[: cfg.batch_size])
    boxes = [letterbox(s, size) for s in batch]
    images = to_tensor([b[0] for b in boxes])
    targets = targets_tensor([b[1] for b in boxes])
    model.train()
    trace = []
    for _ in range(steps):
        loss = compute_loss(model, images, targets, cfg)
        trace.append(loss.total.item())
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        opt.step()
    return trace


@torch.no_grad()
def recalibrate_batchnorm(model: OreYOLO, images: torch.Tensor) -> None:
    """Replace BatchNorm running statistics with the exact statistics of ``images`` under the current weights."""
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    saved = [b.momentum for b in bns]
    for b in bns:
        b.reset_running_stats()
        b.momentum = None  # cumulative average: a single pass gives the batch statistics
    model.train()
    model(images)
    for b, m in zip(bns, saved):
        b.momentum = m
    model.eval()


# ---------------------------------------------------------------- inference


@torch.no_grad()
def detect(model: OreYOLO, samples: Sequence[DatasetSample], size: int, conf_thr: float, iou_thr: float,
           batch_size: int = 8) -> list[list[Detection]]:
    """Detections per sample in the sample's own pixel coordinates."""
    model.eval()
    results: list[list[Detection]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        boxed = [letterbox(s, size) for s in chunk]
        raw = model(to_tensor([b[0] for b in boxed]))
        for s, (_, _, r, (left, top)), dets in zip(chunk, boxed, postprocess(raw, model.anchors, size, conf_thr, iou_thr)):
            mapped = []
            for d in dets:
                x1 = min(max((d.x1 - left) / r, 0.0), s.width)
                x2 = min(max((d.x2 - left) / r, 0.0), s.width)
                y1 = min(max((d.y1 - top) / r, 0.0), s.height)
                y2 = min(max((d.y2 - top) / r, 0.0), s.height)
                if x2 > x1 and y2 > y1:
                    mapped.append(Detection(x1, y1, x2, y2, d.class_id, d.confidence))
            results.append(mapped)
    return results


def ground_truths(sample: DatasetSample) -> list[GroundTruth]:
    return [GroundTruth(*l.to_xyxy(sample.width, sample.height), l.class_id) for l in sample.labels]


def evaluate(model: OreYOLO, samples: Sequence[DatasetSample], cfg: TrainConfig, input_size: int | None = None) -> EvalResult:
    if not samples:
        raise DataError("evaluation split has no images")
    check_classes(samples, cfg.model.num_classes)
    size = input_size or cfg.model.input_size
    dets = detect(model, samples, size, cfg.confidence, cfg.nms_iou)
    return map_range(dets, [ground_truths(s) for s in samples], conf_thr=cfg.confidence,
                     num_classes=cfg.model.num_classes)


def evaluate_checkpoint(checkpoint: str | Path, root: str | Path, split: str) -> EvalResult:
    model, cfg, _ = load_checkpoint(checkpoint)
    samples = load_split(root, split)
    return evaluate(model, samples, cfg)


def annotate(image: np.ndarray, dets: Sequence[Detection], class_names: dict[int, str] | None = None) -> Image.Image:
    im = Image.fromarray(image).copy()
    draw = ImageDraw.Draw(im)
    w, h = im.size
    for d in dets:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        x1, y1 = max(0, int(d.x1)), max(0, int(d.y1))
        x2, y2 = min(w - 1, int(math.ceil(d.x2)) - 1), min(h - 1, int(math.ceil(d.y2)) - 1)
        if x2 < x1 or y2 < y1:
            continue
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        name = (class_names or {}).get(d.class_id, str(d.class_id))
        caption = f"{name} {d.confidence:.2f}"
        tx, ty = x1 + 2, max(0, y1 - 11) if y1 >= 11 else y1 + 2
        draw.text((tx, ty), caption, fill=color)
    return im


def predict_files(checkpoint: str | Path, image_paths: Sequence[str | Path], out_dir: str | Path,
                  conf_thr: float | None = None, iou_thr: float | None = None) -> dict[str, list[Detection]]:
    """Annotate each image into ``out_dir`` and write ``<stem>.txt`` detection lines next to it."""
    model, cfg, _ = load_checkpoint(checkpoint)
    conf_thr = cfg.confidence if conf_thr is None else conf_thr
    iou_thr = cfg.nms_iou if iou_thr is None else iou_thr
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, list[Detection]] = {}
    for p in map(Path, image_paths):
        try:
            image = read_image(p)
        except Exception as exc:  # unreadable or not an image
            log.warning("skipping %s: %s", p, exc)
            continue
        dets = detect(model, [DatasetSample(image, [], p.stem)], cfg.model.input_size, conf_thr, iou_thr)[0]
        if dets:
            annotate(image, dets).save(out / f"{p.stem}.png")
        else:
            shutil.copyfile(p, out / p.name)
        write_detections(dets, out / f"{p.stem}.txt")
        results[p.name] = dets
    return results
