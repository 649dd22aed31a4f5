"""Command-line pipeline: pretrain, owl, incr, eval, report.

Artifacts live under one output root (flag --out, else the OWDET_OUT
environment variable, else ./runs). Every artifact embeds the config
hash and seed, carries no timestamps, and is byte-identical across
reruns with the same config. Exit codes: 0 success, 1 user error
(bad arguments, missing prerequisite, hash mismatch), 2 internal error.
"""

import argparse
import dataclasses
import json
import os
import sys

from .config import RunConfig
from .dataset import generate_synthetic
from .detector import load_checkpoint, save_checkpoint
from .engine import (TaskSchedule, evaluate_detector, exemplar_select_balanced,
                     extend_exemplars, run_incremental_step, run_owl_stage,
                     run_pretrain_stage)
from .metrics import EvalReport

ENV_OUT = "OWDET_OUT"


class UserError(Exception):
    """Invalid request: bad flag value, missing prerequisite, mismatch."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for bugs
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path, seed):
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _out_root(args):
    root = args.out or os.environ.get(ENV_OUT) or "runs"
    os.makedirs(root, exist_ok=True)
    return root


def _world(cfg):
    manifest, scenes = generate_synthetic(cfg.train_per_task, cfg.eval_per_task,
                                          cfg.data_seed,
                                          [list(g) for g in cfg.groups])
    schedule = TaskSchedule(cfg.groups)
    train = [[scenes[i] for i in ids] for ids in manifest.train_ids]
    evals = [[scenes[i] for i in ids] for ids in manifest.eval_ids]
    return schedule, train, evals


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_log(root, name, cfg, lines):
    header = f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"
    _write_text(os.path.join(root, name), header + "\n".join(lines) + "\n")


def _save_stage(root, stem, detector, cfg, task, stage):
    save_checkpoint(os.path.join(root, stem + ".owck"), detector,
                    cfg.config_hash(),
                    extra_meta={"seed": cfg.seed, "task": task, "stage": stage})
    cfg.save(os.path.join(root, "config.cfg"))


def _require_checkpoint(root, stem, cfg):
    path = os.path.join(root, stem + ".owck")
    if not os.path.exists(path):
        raise UserError(f"missing prerequisite checkpoint {path}")
    try:
        return load_checkpoint(path, cfg.detector_config(), cfg.config_hash())
    except ValueError as exc:
        raise UserError(str(exc)) from None


def _rebuild_store(schedule, train, cfg, upto_task):
    """Replay memory as it stood after ``upto_task`` (deterministic)."""
    store = exemplar_select_balanced(train[0], schedule.current(1),
                                     cfg.exemplar_cap, cfg.seed)
    for t in range(2, upto_task + 1):
        store = extend_exemplars(store, train[t - 1], schedule.current(t),
                                 cfg.seed)
    return store


# -- commands -----------------------------------------------------------------

def cmd_pretrain(args):
    cfg = _load_config(args.config, args.seed)
    root = _out_root(args)
    if args.task != 1:
        raise UserError("pretrain starts the pipeline and only accepts "
                        "--task 1; later tasks go through incr")
    schedule, train, _ = _world(cfg)
    out = run_pretrain_stage(1, train[0], schedule, cfg)
    _save_stage(root, "pretrain_t1", out.detector, cfg, 1, "pretrain")
    _write_log(root, "pretrain_t1.log", cfg, out.lines)
    return 0


def cmd_owl(args):
    cfg = _load_config(args.config, args.seed)
    root = _out_root(args)
    schedule, train, _ = _world(cfg)
    if not 1 <= args.task <= schedule.n_tasks:
        raise UserError(f"task {args.task} outside 1..{schedule.n_tasks}")
    det, _meta = _require_checkpoint(root, f"pretrain_t{args.task}", cfg)
    out = run_owl_stage(args.task, train[args.task - 1], schedule, cfg, det)
    _save_stage(root, f"owl_t{args.task}", out.detector, cfg, args.task, "owl")
    _write_log(root, f"owl_t{args.task}.log", cfg, out.lines)
    return 0


def cmd_incr(args):
    cfg = _load_config(args.config, args.seed)
    root = _out_root(args)
    schedule, train, _ = _world(cfg)
    if args.task < 2:
        raise UserError("incr absorbs a later task; --task must be >= 2")
    if args.task > schedule.n_tasks:
        raise UserError(f"task {args.task} outside 2..{schedule.n_tasks}")
    prev_stem = "owl_t1" if args.task == 2 else f"incr_t{args.task - 1}"
    det, _meta = _require_checkpoint(root, prev_stem, cfg)
    store = _rebuild_store(schedule, train, cfg, args.task - 1)
    out = run_incremental_step(args.task, train[args.task - 1], schedule,
                               cfg, det, store)
    _save_stage(root, f"incr_t{args.task}", out.detector, cfg, args.task,
                "incr")
    _write_log(root, f"incr_t{args.task}.log", cfg, out.lines)
    return 0


def _coco_rows(detector, scenes, cfg):
    from .engine import inference_postprocess
    rows = []
    size = cfg.image_size
    for scene in scenes:
        res = detector.predict(scene.raster)
        for d in inference_postprocess(res.predictions, detector.n_known,
                                       cfg.top_k, scene.image_id):
            cx, cy, w, h = (float(v) for v in d.box)
            rows.append({
                "image_id": d.image_id,
                "category_id": 0 if d.label == "unknown" else int(d.label),
                "bbox": [round((cx - w / 2) * size, 4),
                         round((cy - h / 2) * size, 4),
                         round(w * size, 4), round(h * size, 4)],
                "score": round(d.score, 6),
            })
    return rows


def cmd_eval(args):
    cfg = _load_config(args.config, args.seed)
    root = _out_root(args)
    if args.split not in ("train", "eval"):
        raise UserError(f"unknown split {args.split!r} (train or eval)")
    path = args.checkpoint
    if not os.path.exists(path):
        raise UserError(f"checkpoint {path} not found")
    try:
        det, meta = load_checkpoint(path, cfg.detector_config(),
                                    cfg.config_hash())
    except ValueError as exc:
        raise UserError(str(exc)) from None
    schedule, train, evals = _world(cfg)
    task = args.task or int(meta.get("extra", {}).get("task", 1))
    if not 1 <= task <= schedule.n_tasks:
        raise UserError(f"task {task} outside 1..{schedule.n_tasks}")
    splits = train if args.split == "train" else evals
    scenes = [s for t in range(1, task + 1) for s in splits[t - 1]]
    report = evaluate_detector(det, scenes, schedule, task, cfg)
    payload = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
               "task": task, "split": args.split,
               "report": json.loads(report.to_json())}
    stem = os.path.join(root, f"eval_t{task}_{args.split}")
    _write_text(stem + ".json",
                json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    _write_text(stem + ".txt", report.to_table(task_label=str(task)))
    if args.coco:
        _write_text(stem + "_coco.json",
                    json.dumps(_coco_rows(det, scenes, cfg),
                               sort_keys=True, separators=(",", ":")) + "\n")
    return 0


_REPORT_COLS = ("task", "U-Recall", "WI", "A-OSE",
                "mAP-prev", "mAP-cur", "mAP-both")


def cmd_report(args):
    root = _out_root(args)
    rows = []
    for name in sorted(os.listdir(root)):
        if not (name.startswith("eval_t") and name.endswith("_eval.json")):
            continue
        with open(os.path.join(root, name), encoding="utf-8") as fh:
            payload = json.load(fh)
        rep = EvalReport.from_json(json.dumps(payload["report"]))
        rows.append((payload["task"], payload["config_hash"],
                     payload["seed"], rep))
    if not rows:
        raise UserError(f"no eval reports under {root}")
    rows.sort(key=lambda r: r[0])

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    csv_lines = [",".join(c.lower().replace("-", "_") for c in _REPORT_COLS)]
    cells = []
    for task, _h, _s, rep in rows:
        vals = (str(task), fmt(rep.u_recall), fmt(rep.wi), str(rep.a_ose),
                fmt(rep.map_prev), fmt(rep.map_cur), fmt(rep.map_both))
        csv_lines.append(",".join(vals))
        cells.append(tuple(v if v else "-" for v in vals))
    widths = [max(len(h), *(len(c[i]) for c in cells))
              for i, h in enumerate(_REPORT_COLS)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))
    text = [f"# config_hash={rows[0][1]} seed={rows[0][2]}",
            line(_REPORT_COLS)] + [line(c) for c in cells]
    _write_text(os.path.join(root, "report.txt"), "\n".join(text) + "\n")
    _write_text(os.path.join(root, "report.csv"), "\n".join(csv_lines) + "\n")
    return 0


# -- entry --------------------------------------------------------------------

def _build_parser():
    p = _Parser(prog="owdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", default=None,
                        help=f"output root (default ${ENV_OUT} or ./runs)")
        if task:
            sp.add_argument("--task", type=int, default=1)

    common(sub.add_parser("pretrain", help="closed-world stage for task 1"))
    common(sub.add_parser("owl", help="open-world self-labeling stage"))
    common(sub.add_parser("incr", help="absorb the next class group"))
    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    common(ev, task=False)
    ev.add_argument("--task", type=int, default=None,
                    help="visibility task (default: stored in checkpoint)")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="eval")
    ev.add_argument("--coco", action="store_true",
                    help="also dump detections in COCO results format")
    rp = sub.add_parser("report", help="aggregate eval reports into a table")
    rp.add_argument("--out", default=None)
    return p


_COMMANDS = {"pretrain": cmd_pretrain, "owl": cmd_owl, "incr": cmd_incr,
             "eval": cmd_eval, "report": cmd_report}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code or 0
    except UserError as exc:
        print(f"owdet: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - contract: internal errors exit 2
        print(f"owdet: internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
