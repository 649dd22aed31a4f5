"""Training objectives: focal classification, box regression, the dual
Hungarian loss with the class-agnostic binary term, cross-view
consistency, distillation terms, and the stage totals that combine them.

Every function returns an autodiff Tensor so gradients reach the
detector parameters. Targets, masks, and teacher outputs enter as plain
numpy and are treated as constants.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import Assignment

_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_b_cls: float = 1.0
    lambda_con: float = 1.0
    lambda_feat: float = 1.0
    lambda_cls: float = 1.0
    lambda_feat_aug: float = 1.0
    lambda_cls_aug: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


def sigmoid_focal_loss(logits, positives, alpha=0.25, gamma=2.0):
    """Sum over entries of -alpha_t (1-p_t)^gamma log(p_t).

    ``positives`` marks entries with a positive binary target (1) versus
    negative (0), same shape as ``logits``. ``alpha=None`` drops the
    alpha_t factor entirely (then gamma=0 gives plain cross-entropy).
    """
    logits = ad.as_tensor(logits)
    y = np.asarray(positives, dtype=np.float64)
    if y.shape != logits.values.shape:
        raise ValueError(f"labels shape {y.shape} vs logits {logits.values.shape}")
    p = ad.sigmoid(logits)
    yt = Tensor(y)
    # p_t = p on positives, 1-p on negatives
    pt = ad.add(ad.mul(p, yt), ad.mul(ad.sub(Tensor(np.ones_like(y)), p),
                                      Tensor(1.0 - y)))
    term = ad.mul(ad.pow_const(ad.sub(Tensor(np.ones_like(y)), pt), gamma),
                  ad.log(pt))
    if alpha is not None:
        a = float(alpha)
        alpha_t = a * y + (1.0 - a) * (1.0 - y)
        term = ad.mul(term, Tensor(alpha_t))
    return ad.scale(ad.tsum(term), -1.0)


def _rows_col(t, col, rows):
    return ad.take_flat(t, 4 * np.arange(rows) + col, (rows,))


def giou_rows(pred_boxes, target_boxes):
    """Differentiable per-row GIoU between (M, 4) cxcywh boxes.

    Predictions are Tensors; targets are constants. Assumes positive
    widths and heights (sigmoid-parameterized boxes guarantee this).
    """
    pred_boxes = ad.as_tensor(pred_boxes)
    tgt = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    m = tgt.shape[0]
    if pred_boxes.values.shape != (m, 4):
        raise ValueError(f"pred {pred_boxes.values.shape} vs targets {tgt.shape}")
    cx, cy = _rows_col(pred_boxes, 0, m), _rows_col(pred_boxes, 1, m)
    w, h = _rows_col(pred_boxes, 2, m), _rows_col(pred_boxes, 3, m)
    half_w, half_h = ad.scale(w, 0.5), ad.scale(h, 0.5)
    px1, px2 = ad.sub(cx, half_w), ad.add(cx, half_w)
    py1, py2 = ad.sub(cy, half_h), ad.add(cy, half_h)

    tx1 = tgt[:, 0] - tgt[:, 2] / 2
    ty1 = tgt[:, 1] - tgt[:, 3] / 2
    tx2 = tgt[:, 0] + tgt[:, 2] / 2
    ty2 = tgt[:, 1] + tgt[:, 3] / 2

    ix1 = ad.maximum(px1, Tensor(tx1))
    iy1 = ad.maximum(py1, Tensor(ty1))
    ix2 = ad.minimum(px2, Tensor(tx2))
    iy2 = ad.minimum(py2, Tensor(ty2))
    iw = ad.relu(ad.sub(ix2, ix1))
    ih = ad.relu(ad.sub(iy2, iy1))
    inter = ad.mul(iw, ih)

    area_p = ad.mul(w, h)
    area_t = Tensor(tgt[:, 2] * tgt[:, 3])
    union = ad.sub(ad.add(area_p, area_t), inter)
    iou = ad.div(inter, union)

    hx1 = ad.minimum(px1, Tensor(tx1))
    hy1 = ad.minimum(py1, Tensor(ty1))
    hx2 = ad.maximum(px2, Tensor(tx2))
    hy2 = ad.maximum(py2, Tensor(ty2))
    hull = ad.mul(ad.sub(hx2, hx1), ad.sub(hy2, hy1))
    return ad.sub(iou, ad.div(ad.sub(hull, union), hull))


def box_loss(target_box, pred_box, w_l1=5.0, w_giou=2.0):
    """w_l1 * L1 + w_giou * (1 - GIoU) for one box pair."""
    pred = ad.as_tensor(pred_box)
    pred = ad.reshape(pred, (1, 4)) if pred.values.shape == (4,) else pred
    tgt = np.asarray(target_box, dtype=np.float64).reshape(1, 4)
    l1 = ad.tsum(ad.absolute(ad.sub(pred, Tensor(tgt))))
    g = ad.tsum(giou_rows(pred, tgt))
    return ad.add(ad.scale(l1, w_l1), ad.scale(ad.sub(Tensor(np.array(1.0)), g), w_giou))


def _check_assignment(assignment, n_targets, n_preds, name):
    seen_t, seen_p = set(), set()
    for t, p in assignment.pairs:
        if not (0 <= t < n_targets and 0 <= p < n_preds):
            raise ValueError(f"{name}: pair ({t},{p}) out of range")
        if t in seen_t or p in seen_p:
            raise ValueError(f"{name}: duplicate index in pairs")
        seen_t.add(t)
        seen_p.add(p)


def hungarian_loss_bin(targets, class_logits, binary_logits, pred_boxes,
                       sigma: Assignment, sigma_star: Assignment,
                       weights: Optional[LossWeights] = None, normalize=True):
    """Set-prediction loss over one image with both classification heads.

    Matched queries (via sigma) take their target's class as the positive
    focal entry and pay the box cost; every other query is all-negative.
    The binary head gets foreground positives at sigma_star's queries.
    Normalization divides by max(1, number of targets).
    """
    lw = weights or LossWeights()
    class_logits = ad.as_tensor(class_logits)
    binary_logits = ad.as_tensor(binary_logits)
    pred_boxes = ad.as_tensor(pred_boxes)
    n_preds, n_classes = class_logits.values.shape
    n_targets = len(targets)
    _check_assignment(sigma, n_targets, n_preds, "sigma")
    _check_assignment(sigma_star, n_targets, n_preds, "sigma_star")

    onehot = np.zeros((n_preds, n_classes))
    for t, p in sigma.pairs:
        col = targets[t].label - 1
        if not 0 <= col < n_classes:
            raise ValueError(f"label {targets[t].label} outside head width {n_classes}")
        onehot[p, col] = 1.0
    cls_term = sigmoid_focal_loss(class_logits, onehot)

    fg = np.zeros(n_preds)
    for _, p in sigma_star.pairs:
        fg[p] = 1.0
    bin_term = sigmoid_focal_loss(binary_logits, fg)

    if sigma.pairs:
        order = sorted(sigma.pairs)
        matched = ad.gather_rows(pred_boxes, [p for _, p in order])
        tgt = np.stack([targets[t].box for t, _ in order])
        l1 = ad.tsum(ad.absolute(ad.sub(matched, Tensor(tgt))))
        ones = Tensor(np.ones(len(order)))
        g = ad.tsum(ad.sub(ones, giou_rows(matched, tgt)))
        box_term = ad.add(ad.scale(l1, lw.w_l1), ad.scale(g, lw.w_giou))
    else:
        box_term = Tensor(np.array(0.0))

    total = ad.add(ad.add(cls_term, box_term), ad.scale(bin_term, lw.lambda_b_cls))
    if normalize:
        total = ad.scale(total, 1.0 / max(1, n_targets))
    return total


def consistency_loss(q, q_aug, sigma: Assignment, sigma_aug: Assignment,
                     eligible_pairs):
    """Sum of L1 distances between matched query features across views.

    ``eligible_pairs`` lists (target index in view I, target index in the
    augmented view) for targets that denote the same physical box and are
    annotated or selective-search sourced. Each side is mapped to its
    query via the corresponding assignment.
    """
    q = ad.as_tensor(q)
    q_aug = ad.as_tensor(q_aug)
    if q.values.shape[1] != q_aug.values.shape[1]:
        raise ValueError("query feature dimensions differ between views")
    if not eligible_pairs:
        return Tensor(np.array(0.0))
    t2p = sigma.pred_for_target()
    t2p_aug = sigma_aug.pred_for_target()
    rows, rows_aug = [], []
    for ti, tj in eligible_pairs:
        if ti in t2p and tj in t2p_aug:
            rows.append(t2p[ti])
            rows_aug.append(t2p_aug[tj])
    if not rows:
        return Tensor(np.array(0.0))
    a = ad.gather_rows(q, rows)
    b = ad.gather_rows(q_aug, rows_aug)
    return ad.tsum(ad.absolute(ad.sub(a, b)))


@dataclass
class ViewBundle:
    """Everything one view contributes to the open-world loss."""

    targets: list
    class_logits: Tensor
    binary_logits: Tensor
    boxes: Tensor
    query_features: Tensor
    sigma: Assignment
    sigma_star: Assignment


def total_owl_loss(view: ViewBundle, view_aug: ViewBundle, eligible_pairs,
                   weights: Optional[LossWeights] = None):
    """Both views' Hungarian losses plus the weighted consistency term."""
    lw = weights or LossWeights()
    main = hungarian_loss_bin(view.targets, view.class_logits, view.binary_logits,
                              view.boxes, view.sigma, view.sigma_star, lw)
    aug = hungarian_loss_bin(view_aug.targets, view_aug.class_logits,
                             view_aug.binary_logits, view_aug.boxes,
                             view_aug.sigma, view_aug.sigma_star, lw)
    con = consistency_loss(view.query_features, view_aug.query_features,
                           view.sigma, view_aug.sigma, eligible_pairs)
    return ad.add(ad.add(main, aug), ad.scale(con, lw.lambda_con))


def feat_distill_masked(f_cur, f_pre, mask):
    """Mean squared feature gap outside current-known ground-truth boxes.

    (1 / 2N) * sum over pixels and channels of (1 - mask) * (cur - pre)^2,
    N = number of unmasked pixels. All-masked grids contribute 0.
    """
    f_cur = ad.as_tensor(f_cur)
    pre = np.asarray(f_pre, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if f_cur.values.shape != pre.shape:
        raise ValueError(f"feature shapes differ: {f_cur.values.shape} vs {pre.shape}")
    if m.shape != pre.shape[:2]:
        raise ValueError(f"mask shape {m.shape} vs grid {pre.shape[:2]}")
    keep = 1.0 - m
    n = keep.sum()
    if n == 0:
        return Tensor(np.array(0.0))
    weight = np.broadcast_to(keep[:, :, None], pre.shape).copy()
    sq = ad.square(ad.sub(f_cur, Tensor(pre)))
    return ad.scale(ad.tsum(ad.mul(sq, Tensor(weight))), 1.0 / (2.0 * n))


def kl_class_distill(p_cur, p_pre):
    """Mean over rows of KL(teacher row || student row).

    Rows must each sum to 1 within 1e-6. Gradient flows only through the
    student probabilities.
    """
    p_cur = ad.as_tensor(p_cur)
    pre = np.asarray(p_pre, dtype=np.float64)
    if p_cur.values.shape != pre.shape:
        raise ValueError("distribution shapes differ")
    if pre.size == 0:
        return Tensor(np.array(0.0))
    if np.abs(pre.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("teacher rows must sum to 1")
    if np.abs(p_cur.values.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("student rows must sum to 1")
    rows = pre.shape[0]
    ref_entropy = np.where(pre > 0, pre * np.log(np.maximum(pre, _EPS)), 0.0).sum()
    cross = ad.tsum(ad.mul(Tensor(pre), ad.log(p_cur)))
    return ad.add(ad.scale(cross, -1.0 / rows), float(ref_entropy) / rows)


@dataclass
class DistillInputs:
    """Teacher-vs-student tensors for one view's distillation terms."""

    f_cur: Tensor
    f_pre: np.ndarray
    mask: np.ndarray
    p_cur: Optional[Tensor]  # None when the teacher matched nothing
    p_pre: Optional[np.ndarray]

    def losses(self):
        feat = feat_distill_masked(self.f_cur, self.f_pre, self.mask)
        if self.p_cur is None or self.p_pre is None or np.size(self.p_pre) == 0:
            cls = Tensor(np.array(0.0))
        else:
            cls = kl_class_distill(self.p_cur, self.p_pre)
        return feat, cls


def total_pretrain_loss(view: ViewBundle, distill: Optional[DistillInputs],
                        weights: Optional[LossWeights] = None):
    """Hungarian loss plus (from the second task on) distillation terms."""
    lw = weights or LossWeights()
    total = hungarian_loss_bin(view.targets, view.class_logits, view.binary_logits,
                               view.boxes, view.sigma, view.sigma_star, lw)
    if distill is not None:
        feat, cls = distill.losses()
        total = ad.add(total, ad.add(ad.scale(feat, lw.lambda_feat),
                                     ad.scale(cls, lw.lambda_cls)))
    return total


def total_owl_loss_with_kd(view: ViewBundle, view_aug: ViewBundle, eligible_pairs,
                           distill: Optional[DistillInputs],
                           distill_aug: Optional[DistillInputs],
                           weights: Optional[LossWeights] = None):
    """Open-world total with distillation on both views."""
    lw = weights or LossWeights()
    total = total_owl_loss(view, view_aug, eligible_pairs, lw)
    if distill is not None:
        feat, cls = distill.losses()
        total = ad.add(total, ad.add(ad.scale(feat, lw.lambda_feat),
                                     ad.scale(cls, lw.lambda_cls)))
    if distill_aug is not None:
        feat, cls = distill_aug.losses()
        total = ad.add(total, ad.add(ad.scale(feat, lw.lambda_feat_aug),
                                     ad.scale(cls, lw.lambda_cls_aug)))
    return total
