"""Decoding raw head outputs into boxes, greedy per-class NMS, and detection I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from oreyolo.boxes import box_iou_matrix
from oreyolo.config import STRIDES
from oreyolo.errors import ShapeError


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    confidence: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_line(self) -> str:
        return (f"{self.class_id} {self.confidence:.4f} "
                f"{self.x1:.4f} {self.y1:.4f} {self.x2:.4f} {self.y2:.4f}")

    @classmethod
    def from_line(cls, line: str) -> "Detection":
        c, conf, x1, y1, x2, y2 = line.split()
        return cls(float(x1), float(y1), float(x2), float(y2), int(c), float(conf))


def write_detections(dets: list[Detection], path: str | Path) -> None:
    Path(path).write_text("".join(d.to_line() + "\n" for d in dets))


def read_detections(path: str | Path) -> list[Detection]:
    return [Detection.from_line(l) for l in Path(path).read_text().splitlines() if l.strip()]


def _grid(h: int, w: int, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    gy, gx = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    return gx, gy


def decode_boxes(raw: torch.Tensor, anchors: torch.Tensor, stride: int) -> torch.Tensor:
    """Pixel-space centre/size boxes for one level.

    ``raw`` is (N, A, H, W, 5 + C); ``anchors`` is (A, 2) in pixels. Returns
    (N, A, H, W, 4) as ``cx, cy, w, h``:
    centre = (cell + 2*sigmoid(t_xy) - 0.5) * stride, size = (2*sigmoid(t_wh))**2 * anchor.
    """
    n, a, h, w, _ = raw.shape
    gx, gy = _grid(h, w, raw.dtype, raw.device)
    s = raw[..., :4].sigmoid()
    cx = (s[..., 0] * 2 - 0.5 + gx) * stride
    cy = (s[..., 1] * 2 - 0.5 + gy) * stride
    anc = anchors.to(raw.dtype).view(1, a, 1, 1, 2)
    wh = (s[..., 2:4] * 2) ** 2 * anc
    return torch.stack([cx, cy, wh[..., 0], wh[..., 1]], dim=-1)


def decode_predictions(raw: list[torch.Tensor], anchors, input_size: int) -> torch.Tensor:
    """All candidate boxes of a batch.

    Returns (N, M, 6) with columns ``x1, y1, x2, y2, confidence, class_id``, boxes
    clipped to ``[0, input_size]``. M = 3 * sum(H*W) over levels.
    """
    anchors = torch.as_tensor(anchors, dtype=torch.float32)
    out = []
    for level, (p, stride) in enumerate(zip(raw, STRIDES)):
        if p.dim() != 5 or p.shape[1] != anchors.shape[1]:
            raise ShapeError(f"level {level}: expected (N, {anchors.shape[1]}, H, W, 5+C), got {tuple(p.shape)}")
        if p.shape[-1] < 6:
            raise ShapeError(f"level {level}: last dim must be 5 + num_classes, got {p.shape[-1]}")
        box = decode_boxes(p, anchors[level], stride)
        xy1 = (box[..., :2] - box[..., 2:] / 2).clamp(0, input_size)
        xy2 = (box[..., :2] + box[..., 2:] / 2).clamp(0, input_size)
        cls_prob, cls_id = p[..., 5:].sigmoid().max(dim=-1)
        conf = p[..., 4].sigmoid() * cls_prob
        cand = torch.cat([xy1, xy2, conf[..., None], cls_id[..., None].to(p.dtype)], dim=-1)
        out.append(cand.reshape(p.shape[0], -1, 6))
    return torch.cat(out, dim=1)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy per-class suppression; returns kept indices in keep order.

    Candidates are visited by descending score with ties going to the earlier index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[(~suppressed[rest]) & (classes[rest] == classes[i])]
        if len(rest):
            ious = box_iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            suppressed[rest[ious > iou_thr]] = True
    return keep


def nms(candidates: list[Detection], iou_thr: float = 0.45, conf_thr: float = 0.25) -> list[Detection]:
    cands = [d for d in candidates if d.confidence >= conf_thr]
    if not cands:
        return []
    boxes = np.array([d.box for d in cands])
    scores = np.array([d.confidence for d in cands])
    classes = np.array([d.class_id for d in cands])
    return [cands[i] for i in nms_indices(boxes, scores, classes, iou_thr)]


def postprocess(raw: list[torch.Tensor], anchors, input_size: int, conf_thr: float = 0.25,
                iou_thr: float = 0.45, max_det: int = 300, max_candidates: int = 3000) -> list[list[Detection]]:
    """Decode, threshold and NMS a batch of raw outputs into per-image detections."""
    cand = decode_predictions([p.detach().float() for p in raw], anchors, input_size)
    results = []
    for c in cand:
        c = c[c[:, 4] >= conf_thr]
        c = c[(c[:, 2] > c[:, 0]) & (c[:, 3] > c[:, 1])]
        if len(c) > max_candidates:
            c = c[torch.argsort(-c[:, 4], stable=True)[:max_candidates]]
        arr = c.cpu().numpy().astype(np.float64)
        keep = nms_indices(arr[:, :4], arr[:, 4], arr[:, 5].astype(int), iou_thr)[:max_det]
        results.append([Detection(*map(float, arr[i, :4]), int(arr[i, 5]), float(arr[i, 4])) for i in keep])
    return results
