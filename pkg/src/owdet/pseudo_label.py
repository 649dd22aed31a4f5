"""Multi-view self-labeling: pick unknown-object pseudo targets from the
objectness head, supplement them with region proposals, and swap them
across crop-resize views so each view is supervised by the other's
discoveries.

All pseudo targets carry the unknown label (known-class count + 1) and
are guaranteed not to overlap annotated boxes of the view they supervise
beyond the configured threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from .dataset import AffineCrop, transfer_box
from .geometry import cxcywh_to_xyxy, iou_matrix, nms
from .structures import ANNOTATED, PSEUDO_BINARY, PSEUDO_SS, Target


@dataclass
class PseudoConfig:
    delta: float = 0.5        # objectness confidence gate
    k: int = 5                # max binary-head pseudo boxes per view
    k_ss: int = 5             # max supplementary proposals per view
    nms_iou: float = 0.5
    overlap_iou: float = 0.05  # max tolerated IoU against protected boxes
    min_retention: float = 0.25


def _max_iou_against(boxes_cxcywh, protected_targets):
    if len(boxes_cxcywh) == 0 or not protected_targets:
        return np.zeros(len(boxes_cxcywh))
    protected = np.stack([t.box for t in protected_targets])
    m = iou_matrix(cxcywh_to_xyxy(np.asarray(boxes_cxcywh)), cxcywh_to_xyxy(protected))
    return m.max(axis=1)


def select_binary_pseudo(preds, known_gt, unknown_label, delta=0.5, k=5,
                         nms_iou=0.5, overlap_iou=0.05):
    """NMS -> confidence gate -> annotated-overlap filter -> top-k.

    Scores are objectness probabilities. Returns unknown-labeled targets
    in descending score order.
    """
    if k <= 0 or not preds:
        return []
    boxes = np.stack([p.box for p in preds])
    scores = np.array([p.objectness for p in preds])
    keep = nms(cxcywh_to_xyxy(boxes), scores, nms_iou)
    keep = [i for i in keep if scores[i] > delta]
    if keep:
        overlaps = _max_iou_against(boxes[keep], known_gt)
        keep = [i for i, ov in zip(keep, overlaps) if ov <= overlap_iou]
    return [Target(label=unknown_label, box=boxes[i].copy(), source=PSEUDO_BINARY)
            for i in keep[:k]]


def supplement_selective_search(ss_props, known_gt, binary_pseudo, unknown_label,
                                overlap_iou=0.05, k_ss=5, tracks=None):
    """Add ranked proposals that avoid annotations and binary pseudo boxes.

    ``tracks`` optionally names each proposal for cross-view identity;
    defaults to the proposal's position in the ranked list.
    """
    props = np.asarray(ss_props, dtype=np.float64).reshape(-1, 4)
    if k_ss <= 0 or props.shape[0] == 0:
        return []
    if tracks is None:
        tracks = list(range(props.shape[0]))
    protected = list(known_gt) + list(binary_pseudo)
    overlaps = _max_iou_against(props, protected)
    out = []
    for i in range(props.shape[0]):
        if overlaps[i] <= overlap_iou:
            out.append(Target(label=unknown_label, box=props[i].copy(),
                              source=PSEUDO_SS, track_id=int(tracks[i])))
            if len(out) == k_ss:
                break
    return out


@dataclass
class SwappedTargets:
    y_u: list                 # unified targets for the original view
    y_u_aug: list             # unified targets for the augmented view
    binary_u: np.ndarray      # per-row binary labels, 0 = foreground
    binary_u_aug: np.ndarray
    eligible_pairs: list = field(default_factory=list)
    audit_max_iou: float = 0.0  # worst pseudo-vs-annotation IoU, both views


def _transfer_pseudo(pseudo, transform, dest_gt, overlap_iou, min_retention):
    """Carry pseudo targets into the destination frame and re-screen them
    against that view's annotations."""
    moved = []
    for t in pseudo:
        box = transfer_box(t.box, transform, min_retention)
        if box is not None:
            moved.append(Target(label=t.label, box=box, source=t.source,
                                track_id=t.track_id))
    if moved:
        overlaps = _max_iou_against(np.stack([t.box for t in moved]), dest_gt)
        moved = [t for t, ov in zip(moved, overlaps) if ov <= overlap_iou]
    return moved


def build_swapped_targets(transform: AffineCrop, preds_view, preds_aug,
                          gt_view, gt_aug, ss_view, ss_aug,
                          unknown_label, config: PseudoConfig = None,
                          ss_view_tracks=None, ss_aug_tracks=None,
                          protected_view=None, protected_aug=None):
    """Each view's selections supervise the other view.

    Pseudo boxes chosen from the original view's predictions and
    proposals are mapped through ``transform`` into the augmented frame
    (and vice versa through its inverse), dropped below the retention
    threshold, and re-screened against the destination's annotations.
    Consistency eligibility pairs link annotated and proposal-sourced
    targets that share a track id across views.

    ``protected_view``/``protected_aug`` are extra targets (teacher-sourced
    previous-class boxes) that join the screening set and the unified
    target lists but are never candidates for unknown labeling.
    """
    cfg = config or PseudoConfig()
    inverse = transform.invert()
    protected_view = list(protected_view or [])
    protected_aug = list(protected_aug or [])
    screen_view = list(gt_view) + protected_view
    screen_aug = list(gt_aug) + protected_aug

    def select(preds, screen, ss, tracks):
        binary = select_binary_pseudo(preds, screen, unknown_label, cfg.delta,
                                      cfg.k, cfg.nms_iou, cfg.overlap_iou)
        ss_sel = supplement_selective_search(ss, screen, binary, unknown_label,
                                             cfg.overlap_iou, cfg.k_ss, tracks)
        return binary + ss_sel

    pseudo_view = select(preds_view, screen_view, ss_view, ss_view_tracks)
    pseudo_aug = select(preds_aug, screen_aug, ss_aug, ss_aug_tracks)

    into_aug = _transfer_pseudo(pseudo_view, transform, screen_aug,
                                cfg.overlap_iou, cfg.min_retention)
    into_view = _transfer_pseudo(pseudo_aug, inverse, screen_view,
                                 cfg.overlap_iou, cfg.min_retention)

    y_u = list(gt_view) + protected_view + into_view
    y_u_aug = list(gt_aug) + protected_aug + into_aug

    def audit(targets, gt):
        pseudo = [t for t in targets if t.source != ANNOTATED]
        if not pseudo:
            return 0.0
        return float(_max_iou_against(np.stack([t.box for t in pseudo]), gt).max())

    worst = max(audit(y_u, gt_view), audit(y_u_aug, gt_aug))

    pairs = []
    for i, ti in enumerate(y_u):
        if ti.source == PSEUDO_BINARY or ti.track_id is None:
            continue
        for j, tj in enumerate(y_u_aug):
            if tj.source == ti.source and tj.track_id == ti.track_id:
                pairs.append((i, j))
                break
    return SwappedTargets(y_u=y_u, y_u_aug=y_u_aug,
                          binary_u=np.zeros(len(y_u)),
                          binary_u_aug=np.zeros(len(y_u_aug)),
                          eligible_pairs=pairs, audit_max_iou=worst)
