"""Box math: format conversion, IoU/GIoU, pairwise matrices, NMS.

Boxes travel in two layouts. Model space and annotations use
(cx, cy, w, h) normalized to the image. Overlap math uses corner form
(x1, y1, x2, y2). Everything here is plain numpy and side-effect free;
no clipping happens in conversions.
"""

import numpy as np


def cxcywh_to_xyxy(boxes):
    """(..., 4) center form to corner form."""
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    return np.maximum(b[..., 2] - b[..., 0], 0) * np.maximum(b[..., 3] - b[..., 1], 0)


def iou(a, b):
    """Scalar IoU of two xyxy boxes; 0 when the union has zero area."""
    return float(iou_matrix(np.asarray(a)[None, :], np.asarray(b)[None, :])[0, 0])


def giou(a, b):
    """Scalar generalized IoU of two xyxy boxes; 0 on a degenerate hull."""
    return float(giou_matrix(np.asarray(a)[None, :], np.asarray(b)[None, :])[0, 0])


def iou_matrix(a, b):
    """(N, 4) x (M, 4) xyxy boxes -> (N, M) IoU."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(x2 - x1, 0) * np.maximum(y2 - y1, 0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a, b):
    """(N, 4) x (M, 4) xyxy boxes -> (N, M) GIoU = IoU - (C - U)/C."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(x2 - x1, 0) * np.maximum(y2 - y1, 0)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    ious = np.zeros_like(inter)
    np.divide(inter, union, out=ious, where=union > 0)

    hx1 = np.minimum(a[:, None, 0], b[None, :, 0])
    hy1 = np.minimum(a[:, None, 1], b[None, :, 1])
    hx2 = np.maximum(a[:, None, 2], b[None, :, 2])
    hy2 = np.maximum(a[:, None, 3], b[None, :, 3])
    hull = np.maximum(hx2 - hx1, 0) * np.maximum(hy2 - hy1, 0)
    out = np.zeros_like(ious)
    np.divide(hull - union, hull, out=out, where=hull > 0)
    return np.where(hull > 0, ious - out, 0.0)


def nms(boxes, scores, iou_threshold):
    """Greedy NMS on xyxy boxes.

    Keeps the highest-score box, drops everything with IoU strictly above
    the threshold against it, repeats. Equal scores break toward the lower
    index. Returns kept indices in descending score order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores length mismatch")
    if boxes.shape[0] == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(scores), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        alive &= ~(overlaps[i] > iou_threshold)
        alive[i] = False
    return kept
