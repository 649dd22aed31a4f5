"""Two-stage training engine: closed-world pre-training with the dual
matchers, open-world learning with swapped multi-view pseudo targets,
incremental class expansion with teacher distillation, and exemplar
replay. Single sequential state machine; every random draw is seeded.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import augment_view, transfer_box
from .detector import Adam, Detector, FreezePolicy, SGD, STAGE2_FROZEN
from .geometry import cxcywh_to_xyxy, iou_matrix, nms
from .losses import (DistillInputs, consistency_loss, hungarian_loss_bin)
from .matching import dual_match
from .metrics import Detection, UNKNOWN, evaluate_split
from .pseudo_label import build_swapped_targets
from .selective_search import propose
from .structures import ANNOTATED, PSEUDO_TEACHER, Target, sigmoid_np

_PRETRAIN, _OWL, _REPLAY = 1, 2, 3  # rng stream tags per stage


@dataclass
class TaskSchedule:
    """Ordered disjoint class groups; task t knows groups 1..t."""

    groups: tuple

    def __post_init__(self):
        self.groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        if not self.groups:
            raise ValueError("schedule needs at least one group")
        seen = set()
        for g in self.groups:
            if not g:
                raise ValueError("empty class group")
            if seen & set(g):
                raise ValueError("class groups overlap")
            seen |= set(g)

    @property
    def n_tasks(self):
        return len(self.groups)

    def _check(self, t):
        if not 1 <= t <= self.n_tasks:
            raise ValueError(f"task {t} outside 1..{self.n_tasks}")

    def known_at(self, t):
        self._check(t)
        return set().union(*self.groups[:t])

    def known_before(self, t):
        self._check(t)
        return set().union(*self.groups[:t - 1]) if t > 1 else set()

    def current(self, t):
        self._check(t)
        return set(self.groups[t - 1])

    def unknown_at(self, t):
        self._check(t)
        return set().union(*self.groups[t:]) if t < self.n_tasks else set()

    def all_classes(self):
        return set().union(*self.groups)


@dataclass
class ExemplarStore:
    """Class-balanced replay memory: at most ``cap`` instances per class."""

    cap: int
    scenes: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)  # class -> [(image_id, ann_idx)]

    def class_counts(self):
        return {c: len(v) for c, v in sorted(self.per_class.items())}

    def image_ids(self):
        return [s.image_id for s in self.scenes]


def exemplar_select_balanced(scenes, classes, cap, seed=0):
    if cap < 1:
        raise ValueError("exemplar cap must be >= 1")
    store = ExemplarStore(cap=cap)
    return extend_exemplars(store, scenes, classes, seed)


def extend_exemplars(store: ExemplarStore, scenes, classes, seed=0):
    """New store with up to ``cap`` seeded-sampled instances per new class.

    Existing entries are kept untouched; an image holding several classes
    is stored once but counts toward each.
    """
    new = ExemplarStore(cap=store.cap, scenes=list(store.scenes),
                        per_class={c: list(v) for c, v in store.per_class.items()})
    held = {s.image_id for s in new.scenes}
    by_id = {}
    for c in sorted(set(classes)):
        if c in new.per_class:
            raise ValueError(f"class {c} already stored")
        instances = []
        for s in scenes:
            by_id[s.image_id] = s
            for idx, t in enumerate(s.annotations):
                if t.label == c:
                    instances.append((s.image_id, idx))
        if len(instances) > new.cap:
            rng = np.random.default_rng((seed, c))
            pick = sorted(rng.choice(len(instances), size=new.cap, replace=False))
            instances = [instances[i] for i in pick]
        new.per_class[c] = instances
        for img, _ in instances:
            if img not in held:
                held.add(img)
                new.scenes.append(by_id[img])
    return new


def select_teacher_pseudo_gt(teacher_preds, known_gt, threshold=0.5, nms_iou=0.5):
    """Previous-class pseudo ground truths from a frozen teacher.

    A prediction survives when its best known-class probability exceeds
    the threshold and its box has zero IoU with every current ground
    truth; duplicates are removed by NMS. Returns the targets plus the
    teacher's full class distribution (softmax) per kept row, for the
    distillation term.
    """
    if not teacher_preds:
        return [], np.zeros((0, 0))
    logits = np.stack([p.class_logits for p in teacher_preds])
    probs = sigmoid_np(logits[:, :-1])  # known slots only
    best = probs.max(axis=1)
    labels = probs.argmax(axis=1) + 1
    cand = [i for i in range(len(teacher_preds)) if best[i] > threshold]
    if not cand:
        return [], np.zeros((0, logits.shape[1]))
    boxes = np.stack([teacher_preds[i].box for i in cand])
    keep = nms(cxcywh_to_xyxy(boxes), best[np.array(cand)], nms_iou)
    kept = [cand[i] for i in keep]
    if known_gt:
        gt_xy = cxcywh_to_xyxy(np.stack([t.box for t in known_gt]))
        det_xy = cxcywh_to_xyxy(np.stack([teacher_preds[i].box for i in kept]))
        overlap = iou_matrix(det_xy, gt_xy).max(axis=1)
        kept = [i for i, ov in zip(kept, overlap) if ov == 0.0]
    targets = [Target(label=int(labels[i]), box=teacher_preds[i].box.copy(),
                      source=PSEUDO_TEACHER) for i in kept]
    rows = logits[kept] if kept else np.zeros((0, logits.shape[1]))
    shifted = rows - rows.max(axis=1, keepdims=True) if len(rows) else rows
    exp = np.exp(shifted)
    p_pre = exp / exp.sum(axis=1, keepdims=True) if len(rows) else rows
    return targets, p_pre


def _grid_mask(targets, grid):
    """1 inside any ground-truth box at grid-cell centers, else 0."""
    m = np.zeros((grid, grid))
    if not targets:
        return m
    centers = (np.arange(grid) + 0.5) / grid
    for x0, y0, x1, y1 in cxcywh_to_xyxy(np.stack([t.box for t in targets])):
        rows = (centers >= y0) & (centers <= y1)
        cols = (centers >= x0) & (centers <= x1)
        m[np.ix_(rows, cols)] = 1.0
    return m


def _aligned_student_probs(class_logits, rows, old_width):
    """Student class distribution over the teacher's slot layout.

    Old class columns sit at the same indices; the unknown column is
    always last on both sides.
    """
    g = ad.gather_rows(class_logits, rows)
    width = class_logits.values.shape[1]
    cols = list(range(old_width - 1)) + [width - 1]
    flat = np.array([[r * width + c for c in cols] for r in range(len(rows))])
    return ad.softmax_lastdim(ad.take_flat(g, flat, (len(rows), old_width)))


def _distill_inputs(result, teacher_result, annotations, grid,
                    tp_offset, n_tp, p_pre, sigma):
    """Feature and class distillation tensors for one view."""
    mask = _grid_mask(annotations, grid)
    p_cur = p_rows = None
    if n_tp:
        t2p = sigma.pred_for_target()
        rows = [t2p[tp_offset + j] for j in range(n_tp)]
        p_cur = _aligned_student_probs(result.class_logits, rows, p_pre.shape[1])
        p_rows = p_pre[:n_tp]
    return DistillInputs(f_cur=result.feature_grid,
                         f_pre=teacher_result.feature_grid.values,
                         mask=mask, p_cur=p_cur, p_pre=p_rows)


@dataclass
class StageResult:
    detector: Detector
    lines: list
    history: list
    extras: dict = field(default_factory=dict)


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _perm(seed, task, stage, epoch, n):
    return list(np.random.default_rng((seed, task, stage, epoch)).permutation(n))


def _stage_seed(seed, task, stage, epoch):
    rng = np.random.default_rng((seed, task, stage, epoch, 99))
    return int(rng.integers(2 ** 31 - 1))


def _mean_of(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(tensors))


def _make_optimizer(params, lr, cfg):
    clip = cfg.clip_norm if cfg.clip_norm > 0 else None
    if cfg.optimizer == "adam":
        return Adam(params, lr, clip_norm=clip)
    if cfg.optimizer == "sgd":
        return SGD(params, lr, momentum=cfg.momentum, clip_norm=clip)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def run_pretrain_stage(task, scenes, schedule: TaskSchedule, cfg,
                       detector=None, teacher=None):
    """Closed-world stage: full model, dual-matcher loss, optional
    teacher distillation from the second task on."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty dataset")
    known = schedule.known_at(task)
    det = detector or Detector(len(known), cfg.detector_config(), seed=cfg.seed)
    if det.n_known != len(known):
        raise ValueError(f"detector knows {det.n_known} classes, task {task} "
                         f"expects {len(known)}")
    det.apply_freeze(FreezePolicy.none())
    opt = _make_optimizer(det.params, cfg.lr, cfg)
    lw, cw = cfg.loss_weights(), cfg.cost_weights()
    lines, history = [], []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        opt.lr = cfg.lr * (0.1 if epoch >= cfg.pretrain_decay_epoch else 1.0)
        sums = {"loss": 0.0, "hg": 0.0, "feat": 0.0, "cls": 0.0}
        for batch in _chunks(_perm(cfg.seed, task, _PRETRAIN, epoch, len(scenes)),
                             cfg.batch_size):
            ad.reset_tape()
            losses = []
            for i in batch:
                loss, comps = _pretrain_image_loss(det, teacher, scenes[i], cfg,
                                                   lw, cw)
                losses.append(loss)
                for key, v in comps.items():
                    sums[key] += v
            ad.backward(_mean_of(losses))
            opt.step()
            opt.zero_grad()
        n = len(scenes)
        mean = {key: v / n for key, v in sums.items()}
        line = (f"stage=pretrain task={task} epoch={epoch:03d} "
                f"lr={opt.lr:.6f} loss={mean['loss']:.6f} hg={mean['hg']:.6f}")
        if teacher is not None:
            line += f" feat={mean['feat']:.6f} cls={mean['cls']:.6f}"
        lines.append(line)
        history.append({"epoch": epoch, "lr": opt.lr, **mean})
    ad.reset_tape()
    return StageResult(det, lines, history)


def _pretrain_image_loss(det, teacher, scene, cfg, lw, cw):
    res = det.forward(scene.raster)
    targets = list(scene.annotations)
    if teacher is None:
        sigma, sigma_star = dual_match(targets, res.predictions, cw)
        hg = hungarian_loss_bin(targets, res.class_logits, res.binary_logits,
                                res.boxes, sigma, sigma_star, lw)
        v = float(hg.values)
        return hg, {"loss": v, "hg": v, "feat": 0.0, "cls": 0.0}

    tres = teacher.predict(scene.raster)
    tp, p_pre = select_teacher_pseudo_gt(tres.predictions, scene.annotations,
                                         cfg.kd_threshold, cfg.nms_iou)
    room = max(0, det.config.n_queries - len(targets))
    tp = tp[:room]
    offset = len(targets)
    targets = targets + tp
    sigma, sigma_star = dual_match(targets, res.predictions, cw)
    hg = hungarian_loss_bin(targets, res.class_logits, res.binary_logits,
                            res.boxes, sigma, sigma_star, lw)
    distill = _distill_inputs(res, tres, scene.annotations, det.grid2,
                              offset, len(tp), p_pre, sigma)
    feat, cls = distill.losses()
    total = ad.add(hg, ad.add(ad.scale(feat, lw.lambda_feat),
                              ad.scale(cls, lw.lambda_cls)))
    return total, {"loss": float(total.values), "hg": float(hg.values),
                   "feat": float(feat.values), "cls": float(cls.values)}


def run_owl_stage(task, scenes, schedule: TaskSchedule, cfg, detector,
                  teacher=None):
    """Open-world stage: frozen backbone/decoder/regression, two views per
    image, swapped pseudo targets, per-batch hygiene audit."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty dataset")
    det = detector
    unknown_label = det.n_known + 1
    det.apply_freeze(FreezePolicy.stage2())
    frozen_before = {k: v for k, v in det.param_hashes().items()
                     if k.split(".")[0] in STAGE2_FROZEN}
    opt = _make_optimizer(det.params, cfg.owl_lr, cfg)
    lw, cw, pcfg = cfg.loss_weights(), cfg.cost_weights(), cfg.pseudo_config()
    ss_cache = {s.image_id: propose(s.raster, cfg.ss_k, cfg.ss_min_size,
                                    seed=cfg.seed) for s in scenes}
    lines, history = [], []
    worst_audit = 0.0
    for epoch in range(1, cfg.owl_epochs + 1):
        opt.lr = cfg.owl_lr * (0.1 if epoch >= cfg.owl_decay_epoch else 1.0)
        aug_seed = _stage_seed(cfg.seed, task, _OWL, epoch)
        sums = {"loss": 0.0, "hg": 0.0, "hg_aug": 0.0, "con": 0.0,
                "feat": 0.0, "cls": 0.0}
        audit_max, pseudo_total = 0.0, 0
        for batch in _chunks(_perm(cfg.seed, task, _OWL, epoch, len(scenes)),
                             cfg.batch_size):
            ad.reset_tape()
            losses = []
            for i in batch:
                scene = scenes[i]
                loss, comps, audit, n_pseudo = _owl_image_loss(
                    det, teacher, scene, ss_cache[scene.image_id], aug_seed,
                    unknown_label, cfg, lw, cw, pcfg)
                if audit > cfg.overlap_iou + 1e-9:
                    raise RuntimeError(f"pseudo-label hygiene violated on image "
                                       f"{scene.image_id}: worst IoU {audit:.4f}")
                audit_max = max(audit_max, audit)
                pseudo_total += n_pseudo
                losses.append(loss)
                for key, v in comps.items():
                    sums[key] += v
            ad.backward(_mean_of(losses))
            opt.step()
            opt.zero_grad()
        n = len(scenes)
        mean = {key: v / n for key, v in sums.items()}
        worst_audit = max(worst_audit, audit_max)
        line = (f"stage=owl task={task} epoch={epoch:03d} lr={opt.lr:.6f} "
                f"loss={mean['loss']:.6f} hg={mean['hg']:.6f} "
                f"hg_aug={mean['hg_aug']:.6f} con={mean['con']:.6f}")
        if teacher is not None:
            line += f" feat={mean['feat']:.6f} cls={mean['cls']:.6f}"
        line += f" audit={audit_max:.6f} pseudo={pseudo_total / n:.2f}"
        lines.append(line)
        history.append({"epoch": epoch, "lr": opt.lr, "audit": audit_max,
                        "pseudo": pseudo_total / n, **mean})
    ad.reset_tape()
    frozen_after = {k: v for k, v in det.param_hashes().items()
                    if k.split(".")[0] in STAGE2_FROZEN}
    if frozen_after != frozen_before:
        raise RuntimeError("frozen parameters changed during the open-world stage")
    return StageResult(det, lines, history,
                       extras={"worst_audit": worst_audit,
                               "frozen_hashes": frozen_after})


def _transfer_proposals(boxes, transform, min_retention):
    moved, tracks = [], []
    for idx, b in enumerate(boxes):
        out = transfer_box(b, transform, min_retention)
        if out is not None:
            moved.append(out)
            tracks.append(idx)
    return (np.stack(moved) if moved else np.zeros((0, 4))), tracks


def _cap_targets(swapped, n_queries):
    """Hungarian matching needs as many queries as targets; drop the
    lowest-priority tail (transferred pseudo boxes come last)."""
    if len(swapped.y_u) > n_queries:
        swapped.y_u = swapped.y_u[:n_queries]
        swapped.binary_u = swapped.binary_u[:n_queries]
    if len(swapped.y_u_aug) > n_queries:
        swapped.y_u_aug = swapped.y_u_aug[:n_queries]
        swapped.binary_u_aug = swapped.binary_u_aug[:n_queries]
    swapped.eligible_pairs = [(i, j) for i, j in swapped.eligible_pairs
                              if i < len(swapped.y_u) and j < len(swapped.y_u_aug)]
    return swapped


def _owl_image_loss(det, teacher, scene, ss_boxes, aug_seed, unknown_label,
                    cfg, lw, cw, pcfg):
    aug_scene, transform = augment_view(scene, aug_seed, cfg.min_side,
                                        cfg.min_retention)
    tracks = list(range(len(ss_boxes)))
    ss_aug, tracks_aug = _transfer_proposals(ss_boxes, transform,
                                             cfg.min_retention)
    res_v = det.forward(scene.raster)
    res_a = det.forward(aug_scene.raster)

    tp_v, pp_v, tp_a, pp_a = [], None, [], None
    if teacher is not None:
        tres_v = teacher.predict(scene.raster)
        tres_a = teacher.predict(aug_scene.raster)
        tp_v, pp_v = select_teacher_pseudo_gt(tres_v.predictions,
                                              scene.annotations,
                                              cfg.kd_threshold, cfg.nms_iou)
        tp_a, pp_a = select_teacher_pseudo_gt(tres_a.predictions,
                                              aug_scene.annotations,
                                              cfg.kd_threshold, cfg.nms_iou)

    swapped = build_swapped_targets(
        transform, res_v.predictions, res_a.predictions,
        scene.annotations, aug_scene.annotations, ss_boxes, ss_aug,
        unknown_label, pcfg, tracks, tracks_aug,
        protected_view=tp_v, protected_aug=tp_a)
    swapped = _cap_targets(swapped, det.config.n_queries)

    sigma_v, sigstar_v = dual_match(swapped.y_u, res_v.predictions, cw)
    sigma_a, sigstar_a = dual_match(swapped.y_u_aug, res_a.predictions, cw)
    hg_v = hungarian_loss_bin(swapped.y_u, res_v.class_logits,
                              res_v.binary_logits, res_v.boxes,
                              sigma_v, sigstar_v, lw)
    hg_a = hungarian_loss_bin(swapped.y_u_aug, res_a.class_logits,
                              res_a.binary_logits, res_a.boxes,
                              sigma_a, sigstar_a, lw)
    con = consistency_loss(res_v.query_features, res_a.query_features,
                           sigma_v, sigma_a, swapped.eligible_pairs)
    total = ad.add(ad.add(hg_v, hg_a), ad.scale(con, lw.lambda_con))
    comps = {"loss": 0.0, "hg": float(hg_v.values), "hg_aug": float(hg_a.values),
             "con": float(con.values), "feat": 0.0, "cls": 0.0}

    if teacher is not None:
        n_tp_v = max(0, min(len(tp_v), len(swapped.y_u) - len(scene.annotations)))
        n_tp_a = max(0, min(len(tp_a),
                            len(swapped.y_u_aug) - len(aug_scene.annotations)))
        d_v = _distill_inputs(res_v, tres_v, scene.annotations, det.grid2,
                              len(scene.annotations), n_tp_v, pp_v, sigma_v)
        d_a = _distill_inputs(res_a, tres_a, aug_scene.annotations, det.grid2,
                              len(aug_scene.annotations), n_tp_a, pp_a, sigma_a)
        feat_v, cls_v = d_v.losses()
        feat_a, cls_a = d_a.losses()
        kd = ad.add(ad.add(ad.scale(feat_v, lw.lambda_feat),
                           ad.scale(cls_v, lw.lambda_cls)),
                    ad.add(ad.scale(feat_a, lw.lambda_feat_aug),
                           ad.scale(cls_a, lw.lambda_cls_aug)))
        total = ad.add(total, kd)
        comps["feat"] = float(feat_v.values) + float(feat_a.values)
        comps["cls"] = float(cls_v.values) + float(cls_a.values)

    comps["loss"] = float(total.values)
    n_pseudo = sum(1 for t in swapped.y_u
                   if t.source not in (ANNOTATED, PSEUDO_TEACHER))
    return total, comps, swapped.audit_max_iou, n_pseudo


def run_replay_finetune(detector, store: ExemplarStore, cfg, task):
    """Plain dual-matcher fine-tuning on the balanced exemplar set."""
    if not store.scenes:
        raise ValueError("empty exemplar store")
    det = detector
    policy = FreezePolicy.stage2() if cfg.replay_freeze else FreezePolicy.none()
    det.apply_freeze(policy)
    opt = _make_optimizer(det.params, cfg.replay_lr, cfg)
    lw, cw = cfg.loss_weights(), cfg.cost_weights()
    lines, history = [], []
    scenes = store.scenes
    for epoch in range(1, cfg.replay_epochs + 1):
        sums = 0.0
        for batch in _chunks(_perm(cfg.seed, task, _REPLAY, epoch, len(scenes)),
                             cfg.batch_size):
            ad.reset_tape()
            losses = []
            for i in batch:
                scene = scenes[i]
                res = det.forward(scene.raster)
                targets = list(scene.annotations)
                sigma, sigma_star = dual_match(targets, res.predictions, cw)
                loss = hungarian_loss_bin(targets, res.class_logits,
                                          res.binary_logits, res.boxes,
                                          sigma, sigma_star, lw)
                sums += float(loss.values)
                losses.append(loss)
            ad.backward(_mean_of(losses))
            opt.step()
            opt.zero_grad()
        mean = sums / len(scenes)
        lines.append(f"stage=replay task={task} epoch={epoch:03d} "
                     f"lr={opt.lr:.6f} loss={mean:.6f}")
        history.append({"epoch": epoch, "lr": opt.lr, "loss": mean})
    ad.reset_tape()
    return StageResult(det, lines, history)


def run_incremental_step(task, new_scenes, schedule: TaskSchedule, cfg,
                         detector: Detector, store: ExemplarStore,
                         use_kd=True, use_replay=True):
    """Absorb one new class group: widen the head, retrain on the new
    data (optionally with teacher distillation), refresh the exemplar
    store, and (optionally) fine-tune on it."""
    new_known = schedule.known_at(task)
    if len(new_known) <= detector.n_known:
        raise ValueError(f"task {task} does not add classes "
                         f"({detector.n_known} -> {len(new_known)})")
    teacher = detector.snapshot_teacher() if use_kd else None
    detector.expand_class_head(len(new_known), seed=cfg.seed)
    pre = run_pretrain_stage(task, new_scenes, schedule, cfg, detector, teacher)
    owl = run_owl_stage(task, new_scenes, schedule, cfg, detector, teacher)
    new_store = extend_exemplars(store, new_scenes, schedule.current(task),
                                 seed=cfg.seed)
    lines = pre.lines + owl.lines
    history = pre.history + owl.history
    if use_replay:
        rep = run_replay_finetune(detector, new_store, cfg, task)
        lines += rep.lines
        history += rep.history
    return StageResult(detector, lines, history,
                       extras={"store": new_store, "owl": owl.extras})


def inference_postprocess(preds, n_known, top_k=50, image_id=0):
    """Slot argmax per query (last slot reads out as "unknown"), then the
    top ``top_k`` by score."""
    dets = []
    for p in preds:
        probs = sigmoid_np(p.class_logits)
        slot = int(np.argmax(probs))
        label = UNKNOWN if slot == n_known else slot + 1
        dets.append(Detection(image_id=image_id, label=label,
                              score=float(probs[slot]), box=p.box.copy()))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order[:top_k]]


def evaluate_detector(detector, scenes, schedule: TaskSchedule, task, cfg):
    """Run inference over a split and score it with true labels."""
    detections, gt = [], {}
    for scene in scenes:
        res = detector.predict(scene.raster)
        detections += inference_postprocess(res.predictions, detector.n_known,
                                            cfg.top_k, scene.image_id)
        gt[scene.image_id] = list(scene.annotations)
    return evaluate_split(detections, gt, schedule.known_before(task),
                          schedule.current(task), schedule.unknown_at(task),
                          cfg.recall_level, cfg.score_floor)
