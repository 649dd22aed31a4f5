"""Open-world evaluation: per-class AP at IoU 0.5 with all-point
interpolation, unknown recall, wilderness impact, and the count of
unknown objects reported as known classes.

Detections carry either an integer class id or the string "unknown".
Ground truth keeps integer labels; the caller says which ids count as
previously known, currently known, and unknown.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .geometry import cxcywh_to_xyxy, iou_matrix

UNKNOWN = "unknown"
IOU_MATCH = 0.5


@dataclass
class Detection:
    image_id: int
    label: Union[int, str]
    score: float
    box: np.ndarray  # cxcywh

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        self.score = float(self.score)
        if not (0.0 <= self.score <= 1.0 and np.isfinite(self.score)):
            raise ValueError(f"score {self.score} outside [0, 1]")


def _rank(detections):
    """Deterministic ordering: score desc, then image id, then list index."""
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].score, detections[i].image_id, i))


def _greedy_flags(detections, gt_boxes_by_image):
    """Per-detection TP flag under one-to-one greedy matching at IoU 0.5.

    ``gt_boxes_by_image`` maps image id to an (M, 4) xyxy array. Each GT
    box matches at most once; among candidates the highest IoU wins,
    ties to the lowest GT index.
    """
    matched = {img: np.zeros(len(b), dtype=bool)
               for img, b in gt_boxes_by_image.items()}
    flags = []
    for i in _rank(detections):
        det = detections[i]
        gt = gt_boxes_by_image.get(det.image_id)
        hit = False
        if gt is not None and len(gt):
            ious = iou_matrix(cxcywh_to_xyxy(det.box)[None], gt)[0]
            ious[matched[det.image_id]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= IOU_MATCH:
                matched[det.image_id][j] = True
                hit = True
        flags.append(hit)
    return flags


def _gt_xyxy_by_image(gt, label_filter):
    out = {}
    for img, targets in gt.items():
        boxes = [t.box for t in targets if label_filter(t.label)]
        if boxes:
            out[img] = cxcywh_to_xyxy(np.stack(boxes))
    return out


def voc_ap50(detections, gt, class_id):
    """Average precision for one class; None when the class has no GT.

    All-point interpolation: area under the precision envelope over the
    recall axis.
    """
    gt_boxes = _gt_xyxy_by_image(gt, lambda lab: lab == class_id)
    npos = sum(len(b) for b in gt_boxes.values())
    if npos == 0:
        return None
    dets = [d for d in detections if d.label == class_id]
    if not dets:
        return 0.0
    flags = np.array(_greedy_flags(dets, gt_boxes), dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / npos
    precision = tp / (tp + fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def u_recall(detections, gt, unknown_ids):
    """Fraction of unknown GT boxes hit by unknown-labeled detections.

    None when the split contains no unknown GT (nothing to recall).
    """
    gt_boxes = _gt_xyxy_by_image(gt, lambda lab: lab in unknown_ids)
    total = sum(len(b) for b in gt_boxes.values())
    if total == 0:
        return None
    dets = [d for d in detections if d.label == UNKNOWN]
    if not dets:
        return 0.0
    flags = _greedy_flags(dets, gt_boxes)
    return float(sum(flags)) / total


def a_ose(detections, gt, unknown_ids, score_floor=0.05):
    """Count of known-class detections sitting on unknown GT boxes."""
    gt_boxes = _gt_xyxy_by_image(gt, lambda lab: lab in unknown_ids)
    count = 0
    for d in detections:
        if d.label == UNKNOWN or d.score < score_floor:
            continue
        boxes = gt_boxes.get(d.image_id)
        if boxes is None:
            continue
        if iou_matrix(cxcywh_to_xyxy(d.box)[None], boxes).max() >= IOU_MATCH:
            count += 1
    return count


def wilderness_impact(detections, gt, known_ids, unknown_ids, recall_level=0.8):
    """P_closed / P_open - 1 at the first point where known recall
    reaches ``recall_level``.

    Walking the ranked known-class detections: true positives match GT
    of their own class; false positives that land on an unknown GT count
    against open-set precision only (closed-set precision ignores them).
    None when the recall level is never reached.
    """
    if not 0 < recall_level <= 1:
        raise ValueError("recall_level must be in (0, 1]")
    known_gt = {}
    for img, targets in gt.items():
        for j, t in enumerate(targets):
            if t.label in known_ids:
                known_gt.setdefault((img, t.label), []).append(t.box)
    total = sum(len(v) for v in known_gt.values())
    if total == 0:
        return None
    known_xyxy = {k: cxcywh_to_xyxy(np.stack(v)) for k, v in known_gt.items()}
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in known_gt.items()}
    unknown_boxes = _gt_xyxy_by_image(gt, lambda lab: lab in unknown_ids)

    dets = [d for d in detections if d.label != UNKNOWN and d.label in known_ids]
    tp = fp_plain = fp_wild = 0
    for i in _rank(dets):
        det = dets[i]
        key = (det.image_id, det.label)
        hit = False
        if key in known_xyxy:
            ious = iou_matrix(cxcywh_to_xyxy(det.box)[None], known_xyxy[key])[0]
            ious[matched[key]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= IOU_MATCH:
                matched[key][j] = True
                hit = True
        if hit:
            tp += 1
        else:
            wild = det.image_id in unknown_boxes and iou_matrix(
                cxcywh_to_xyxy(det.box)[None],
                unknown_boxes[det.image_id]).max() >= IOU_MATCH
            if wild:
                fp_wild += 1
            else:
                fp_plain += 1
        if tp / total >= recall_level:
            p_closed = tp / (tp + fp_plain)
            p_open = tp / (tp + fp_plain + fp_wild)
            return p_closed / p_open - 1.0
    return None


@dataclass
class EvalReport:
    per_class_ap: dict
    map_prev: Optional[float]
    map_cur: Optional[float]
    map_both: Optional[float]
    u_recall: Optional[float]
    wi: Optional[float]
    a_ose: int
    counts: dict = field(default_factory=dict)

    def to_json(self):
        d = {"per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
             "map_prev": self.map_prev, "map_cur": self.map_cur,
             "map_both": self.map_both, "u_recall": self.u_recall,
             "wi": self.wi, "a_ose": self.a_ose, "counts": self.counts}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(per_class_ap={int(k): v for k, v in d["per_class_ap"].items()},
                   map_prev=d["map_prev"], map_cur=d["map_cur"],
                   map_both=d["map_both"], u_recall=d["u_recall"],
                   wi=d["wi"], a_ose=d["a_ose"], counts=d.get("counts", {}))

    def to_table(self, task_label=""):
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"

        header = ("operating point: WI at recall 0.8, A-OSE score floor 0.05, "
                  "matching at IoU 0.5")
        cols = ["task", "U-Recall", "WI", "A-OSE", "mAP-prev", "mAP-cur", "mAP-both"]
        row = [task_label or "-", fmt(self.u_recall), fmt(self.wi),
               str(self.a_ose), fmt(self.map_prev), fmt(self.map_cur),
               fmt(self.map_both)]
        widths = [max(len(c), len(r)) for c, r in zip(cols, row)]
        line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([header, line(cols), line(row)]) + "\n"


def evaluate_split(detections, gt, prev_known, cur_known, unknown_ids,
                   recall_level=0.8, score_floor=0.05):
    """Aggregate every metric over one eval split.

    ``gt`` maps image id to Targets with true labels; ids in
    ``unknown_ids`` are treated as unknown throughout.
    """
    if not gt or all(not targets for targets in gt.values()):
        raise ValueError("empty evaluation split")
    prev_known, cur_known = set(prev_known), set(cur_known)
    unknown_ids = set(unknown_ids)
    known = prev_known | cur_known
    if known & unknown_ids:
        raise ValueError("known and unknown class sets overlap")

    per_class = {}
    for cid in sorted(known):
        ap = voc_ap50(detections, gt, cid)
        if ap is not None:
            per_class[cid] = ap

    def mean_over(ids):
        vals = [per_class[c] for c in sorted(ids) if c in per_class]
        return float(np.mean(vals)) if vals else None

    n_known_gt = sum(1 for ts in gt.values() for t in ts if t.label in known)
    n_unknown_gt = sum(1 for ts in gt.values() for t in ts if t.label in unknown_ids)
    return EvalReport(
        per_class_ap=per_class,
        map_prev=mean_over(prev_known),
        map_cur=mean_over(cur_known),
        map_both=mean_over(known),
        u_recall=u_recall(detections, gt, unknown_ids),
        wi=wilderness_impact(detections, gt, known, unknown_ids, recall_level),
        a_ose=a_ose(detections, gt, unknown_ids, score_floor),
        counts={"images": len(gt), "known_gt": n_known_gt,
                "unknown_gt": n_unknown_gt},
    )
