"""Target assignment and the composite detection loss (MPDIoU box + BCE objectness + BCE class)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from oreyolo.boxes import box_iou_elementwise
from oreyolo.config import STRIDES, LossWeights
from oreyolo.errors import DataError

ANCHOR_RATIO_THRESHOLD = 4.0

# own cell, then right/down/left/up neighbours (scaled by 0.5 below)
_OFFSETS = torch.tensor([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=torch.float32)


def mpdiou(pred: torch.Tensor, gt: torch.Tensor, img_w: float, img_h: float) -> torch.Tensor:
    """IoU minus the squared top-left and bottom-right corner distances over ``img_w**2 + img_h**2``.

    Boxes are (..., 4) corner tensors. The result lies in (-2, 1] and equals 1
    only for identical boxes.
    """
    pred = torch.as_tensor(pred, dtype=torch.float64 if not torch.is_tensor(pred) else None)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    norm = float(img_w) ** 2 + float(img_h) ** 2
    d1 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2
    d2 = (pred[..., 2] - gt[..., 2]) ** 2 + (pred[..., 3] - gt[..., 3]) ** 2
    return box_iou_elementwise(pred, gt) - d1 / norm - d2 / norm


def mpdiou_loss(pred: torch.Tensor, gt: torch.Tensor, img_w: float, img_h: float) -> torch.Tensor:
    return 1.0 - mpdiou(pred, gt, img_w, img_h)


def bce_cls(pred_logits: torch.Tensor, targets: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean BCE over categories; one-hot targets are squeezed into ``[s, 1 - s]``."""
    targets = targets.to(pred_logits.dtype)
    smoothed = targets * (1 - 2 * label_smoothing) + label_smoothing
    return F.binary_cross_entropy_with_logits(pred_logits, smoothed, reduction="mean")


def bce_obj(pred_conf_logits: torch.Tensor, target_conf: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(pred_conf_logits, target_conf.to(pred_conf_logits.dtype),
                                              reduction="mean")


@dataclass
class ScaleTargets:
    """Matches at one output scale; all tensors have one row per match."""

    image: torch.Tensor  # long
    anchor: torch.Tensor  # long
    gj: torch.Tensor  # grid row
    gi: torch.Tensor  # grid column
    box: torch.Tensor  # (K, 4) ground-truth corners in input pixels
    cls: torch.Tensor  # long
    gt_index: torch.Tensor  # row of the ground-truth in the input targets

    def __len__(self) -> int:
        return len(self.image)


def assign_targets(targets: torch.Tensor, anchors, grids, input_size: int) -> list[ScaleTargets]:
    """Match ground truths to anchors and cells at every scale.

    ``targets`` is (T, 6): ``image, class, cx, cy, w, h`` with normalised
    coordinates. A ground truth matches anchor ``a`` when its width and height
    are both within a factor of 4 of the anchor's; it is then assigned to its
    own cell plus the two neighbouring cells nearest to its centre.
    """
    targets = torch.as_tensor(targets).reshape(-1, 6)
    if not targets.is_floating_point():
        targets = targets.float()
    dt = targets.dtype
    if len(targets) and ((targets[:, 2:] < 0).any() or (targets[:, 2:] > 1).any()):
        raise DataError("ground-truth coordinates must lie in [0, 1]")
    anchors = torch.as_tensor(anchors, dtype=dt)
    out = []
    for level, ((gh, gw), stride) in enumerate(zip(grids, STRIDES)):
        anc = anchors[level] / stride  # grid units
        scale = torch.tensor([gw, gh, gw, gh], dtype=dt)
        t_all = targets[:, 2:6] * scale
        gt_idx = torch.arange(len(targets))
        # (na, T)
        ratio = t_all[None, :, 2:4] / anc[:, None, :]
        worst = torch.maximum(ratio, 1 / ratio).max(dim=2).values
        a_idx, t_idx = (worst < ANCHOR_RATIO_THRESHOLD).nonzero(as_tuple=True)
        t = t_all[t_idx]
        gxy = t[:, :2]
        gxi = torch.tensor([gw, gh], dtype=dt) - gxy
        g = 0.5
        j, k = ((gxy % 1 < g) & (gxy > 1)).T
        l, m = ((gxi % 1 < g) & (gxi > 1)).T
        sel = torch.stack([torch.ones_like(j), j, k, l, m])  # (5, K)
        off = (_OFFSETS.to(dt) * g)[:, None, :].expand(5, len(t), 2)
        reps = sel.nonzero(as_tuple=True)
        o_idx, m_idx = reps
        cxy = gxy[m_idx] - off[o_idx, m_idx]
        gij = cxy.long()
        gi = gij[:, 0].clamp(0, gw - 1)
        gj = gij[:, 1].clamp(0, gh - 1)
        rows = t_idx[m_idx]
        tb = targets[rows, 2:6] * input_size
        box = torch.cat([tb[:, :2] - tb[:, 2:] / 2, tb[:, :2] + tb[:, 2:] / 2], dim=1)
        out.append(ScaleTargets(
            image=targets[rows, 0].long(),
            anchor=a_idx[m_idx],
            gj=gj,
            gi=gi,
            box=box,
            cls=targets[rows, 1].long(),
            gt_index=gt_idx[rows],
        ))
    return out


@dataclass
class LossBreakdown:
    box_loss: torch.Tensor
    obj_loss: torch.Tensor
    cls_loss: torch.Tensor
    total: torch.Tensor

    def items(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("box_loss", "obj_loss", "cls_loss", "total")}


def total_loss(preds: list[torch.Tensor], targets: torch.Tensor, anchors, input_size: int,
               weights: LossWeights | None = None, label_smoothing: float = 0.0) -> LossBreakdown:
    """Balance-weighted sum over scales of box, objectness and class terms.

    Per scale: box = mean MPDIoU loss over matches, obj = mean BCE over every
    anchor of every cell (matched anchors target 1, the rest 0), cls = mean BCE
    over matches and classes. Box/cls vanish at a scale without matches.
    """
    w = weights or LossWeights()
    anchors = torch.as_tensor(anchors, dtype=preds[0].dtype)
    targets = torch.as_tensor(targets, dtype=preds[0].dtype)
    grids = [(p.shape[2], p.shape[3]) for p in preds]
    assigned = assign_targets(targets, anchors, grids, input_size)
    ref = preds[0]
    zero = ref.new_zeros(())
    lbox, lobj, lcls = zero, zero, zero
    for level, (p, st) in enumerate(zip(preds, assigned)):
        bal = w.alpha_balance[level]
        tobj = torch.zeros(p.shape[:4], dtype=p.dtype, device=p.device)
        if len(st):
            ps = p[st.image, st.anchor, st.gj, st.gi]  # (K, 5 + C)
            cell = torch.stack([st.gi, st.gj], 1).to(p.dtype)
            s = ps[:, :4].sigmoid()
            stride = STRIDES[level]
            cxy = (s[:, :2] * 2 - 0.5 + cell) * stride
            wh = (s[:, 2:4] * 2) ** 2 * anchors[level][st.anchor].to(p.dtype)
            pbox = torch.cat([cxy - wh / 2, cxy + wh / 2], dim=1)
            lbox = lbox + bal * w.alpha_box * mpdiou_loss(pbox, st.box.to(p.dtype), input_size, input_size).mean()
            tobj[st.image, st.anchor, st.gj, st.gi] = 1.0
            onehot = F.one_hot(st.cls, p.shape[-1] - 5)
            lcls = lcls + bal * w.alpha_cls * bce_cls(ps[:, 5:], onehot, label_smoothing)
        lobj = lobj + bal * w.alpha_obj * bce_obj(p[..., 4], tobj)
    return LossBreakdown(lbox, lobj, lcls, lbox + lobj + lcls)
