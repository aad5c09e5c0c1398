"""Command-line surface: synth / train / refine / eval / report.

Every subcommand is a pure function of (inputs, flags, seed); re-running with
identical arguments reproduces byte-identical primary outputs. Exit codes:
0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

USAGE_ERROR = 1
DATA_ERROR = 2

_DEFAULTS = {
    "synth": {
        "n": 2000, "seed": 7, "skeleton": "coco17",
        "shift_max": 6.0, "distractor_prob": 0.3, "distractor_amp": 0.7,
        "atten_lo": 0.4, "atten_hi": 0.9, "noise_std": 0.02, "sigma": 2.0,
    },
    "train": {
        "epochs": 210, "batch": 36, "lr": 0.001, "warmup": 5, "seed": 0,
        "group_mode": "per-group", "threads": 1,
    },
    "refine": {
        "delta": 8.0, "steps": 50, "tau": 0.5, "split": "val", "threads": 1,
    },
    "eval": {"skeleton": "coco17"},
    "report": {},
}


class _CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems instead of exiting(2)."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _CliParser(prog="poseloop", description=__doc__)
    sub = p.add_subparsers(dest="command")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file with default flag values; explicit flags win")
        return sp

    sp = add("synth", "generate a synthetic dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--skeleton")
    sp.add_argument("--shift-max", dest="shift_max", type=float)
    sp.add_argument("--distractor-prob", dest="distractor_prob", type=float)
    sp.add_argument("--distractor-amp", dest="distractor_amp", type=float)
    sp.add_argument("--atten-lo", dest="atten_lo", type=float)
    sp.add_argument("--atten-hi", dest="atten_hi", type=float)
    sp.add_argument("--noise-std", dest="noise_std", type=float)
    sp.add_argument("--sigma", type=float)

    sp = add("train", "self-constrained training on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--group-mode", dest="group_mode", choices=["per-group", "shared"])
    sp.add_argument("--threads", type=int)

    sp = add("refine", "search-refine low-confidence terminal keypoints")
    sp.add_argument("--ckpt-dir", dest="ckpt_dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--split", choices=["train", "val", "all"])
    sp.add_argument("--threads", type=int)

    sp = add("eval", "score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--skeleton")
    sp.add_argument("--out")

    sp = add("report", "compare two eval reports; aggregate plot data")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out")
    sp.add_argument("--traces")
    sp.add_argument("--losses")
    return p


def _merge_config(args, command: str):
    """Fill unset flags from --config JSON, then from built-in defaults."""
    values = vars(args)
    file_values = {}
    if values.get("config"):
        with open(values["config"], "r", encoding="utf-8") as f:
            file_values = json.load(f)
        if not isinstance(file_values, dict):
            raise UsageError("--config must hold a JSON object")
    for key, default in _DEFAULTS.get(command, {}).items():
        if values.get(key) is None:
            values[key] = file_values.get(key, default)
    for key, val in file_values.items():
        if key in values and values[key] is None:
            values[key] = val
    return args


def cmd_synth(args) -> int:
    from .heatmap import AmplitudeMode, GaussianParams
    from .skeleton import get_skeleton
    from .synth import CorruptionConfig, GeneratorConfig, build_dataset

    skeleton = get_skeleton(args.skeleton)
    cc = CorruptionConfig(
        terminal_shift_max=args.shift_max,
        distractor_prob=args.distractor_prob,
        distractor_amp=args.distractor_amp,
        attenuation_range=(args.atten_lo, args.atten_hi),
        base_noise_std=args.noise_std,
    )
    g = GaussianParams(sigma=args.sigma, amplitude_mode=AmplitudeMode.UNIT_PEAK)
    manifest = build_dataset(args.n, args.seed, args.out, GeneratorConfig(), cc, g, skeleton)
    print(f"wrote {manifest['n']} samples to {args.out} "
          f"(train {manifest['splits']['train']['count']}, "
          f"val {manifest['splits']['val']['count']})")
    return 0


def cmd_train(args) -> int:
    from .skeleton import get_skeleton
    from .synth import load_dataset
    from .training import GroupMode, TrainConfig, save_models, train

    dataset = load_dataset(args.data)
    skeleton = get_skeleton(dataset.manifest["skeleton"])
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        warmup_epochs=args.warmup,
        seed=args.seed,
        group_mode=GroupMode(args.group_mode),
    )
    print(f"training {len(skeleton.groups)} groups: epochs={cfg.epochs} "
          f"batch={cfg.batch_size} lr={cfg.lr} warmup={cfg.warmup_epochs} "
          f"threads={args.threads}", flush=True)
    models, report = train(dataset, skeleton, cfg, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(models, skeleton, out)
    report.to_csv(out / "loss_report.csv")
    last = [r for r in report.rows if r.epoch == cfg.epochs and r.lpo is not None]
    for r in last:
        print(f"epoch {r.epoch} {r.group}: prediction loss {r.lpo:.6f}")
    print(f"checkpoints and loss_report.csv written to {out}")
    return 0


def cmd_refine(args) -> int:
    import numpy as np

    from .heatmap import GaussianParams
    from .refine import SearchConfig, refine_dataset
    from .skeleton import get_skeleton
    from .synth import load_dataset, pose_bbox
    from .tensorio import AnnotationRecord, write_annotations
    from .training import load_models

    dataset = load_dataset(args.data)
    skeleton = get_skeleton(dataset.manifest["skeleton"])
    models = load_models(skeleton, args.ckpt_dir)
    sc = SearchConfig(delta=args.delta, steps=args.steps, confidence_gate=args.tau)
    g = GaussianParams(sigma=dataset.manifest.get("sigma", 2.0))
    stride = dataset.stride

    if args.split == "train":
        indices = dataset.train_indices
    elif args.split == "val":
        indices = dataset.val_indices
    else:
        indices = range(dataset.n)

    def to_record(points, sample_id):
        arr = [(kp.x * stride, kp.y * stride, 2) for kp in points]
        box = pose_bbox(np.array([[x, y, v] for x, y, v in arr]))
        return AnnotationRecord(
            id=sample_id,
            keypoints=[(float(x), float(y), int(v)) for x, y, v in arr],
            bbox=box,
            skeleton_name=skeleton.name,
            confidences=[float(kp.confidence) for kp in points],
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refined_records, plain_records, ref_rows = [], [], []
    for i, kps, plain, refs in refine_dataset(
        models, dataset, skeleton, sc, g, indices, workers=args.threads
    ):
        sid = f"{i:06d}"
        refined_records.append(to_record(kps, sid))
        plain_records.append(to_record(plain, sid))
        for r in refs:
            ref_rows.append((sid, r))

    write_annotations(out / "predictions.ndjson", refined_records)
    write_annotations(out / "predictions_unrefined.ndjson", plain_records)
    with open(out / "refinements.ndjson", "w", encoding="utf-8") as f:
        for sid, r in ref_rows:
            f.write(json.dumps({
                "sample_id": sid, "group": r.group,
                "init_xy": list(r.init_xy), "refined_xy": list(r.refined_xy),
                "init_obj": r.init_objective, "final_obj": r.final_objective,
                "evals": r.evaluations,
            }, sort_keys=True) + "\n")
    with open(out / "search_traces.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "group", "eval_index", "best_objective"])
        for sid, r in ref_rows:
            for ei, val in enumerate(r.trace.best_so_far()):
                w.writerow([sid, r.group, ei, repr(float(val))])
    print(f"refined {len(ref_rows)} terminals over {len(list(indices))} samples -> {out}")
    return 0


def _pairs_from_records(pred_records, gt_records, skeleton):
    import math

    from .heatmap import Keypoint, Visibility
    from .metrics import EvalPair

    gt_by_id = {r.id: r for r in gt_records}
    pairs = []
    for pr in pred_records:
        gr = gt_by_id.get(pr.id)
        if gr is None:
            continue
        pred = [
            Keypoint(x, y, (pr.confidences[i] if pr.confidences else 1.0), Visibility(v))
            for i, (x, y, v) in enumerate(pr.keypoints)
        ]
        gt = [Keypoint(x, y, 1.0, Visibility(v)) for x, y, v in gr.keypoints]
        _, _, w, h = gr.bbox
        scale = math.sqrt(1.1 * w * h)
        pairs.append(EvalPair(pred, gt, scale, skeleton.oks_k))
    return pairs


def cmd_eval(args) -> int:
    from .metrics import average_precision, per_keypoint_stats, stats_to_csv
    from .skeleton import get_skeleton
    from .tensorio import read_annotations

    skeleton = get_skeleton(args.skeleton)
    pred = read_annotations(args.pred)
    gt = read_annotations(args.gt)
    pairs = _pairs_from_records(pred, gt, skeleton)
    if not pairs:
        raise ValueError("no prediction ids matched the ground truth")
    report = average_precision(pairs, skeleton)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        stats = per_keypoint_stats(pairs, skeleton)
        stats_to_csv(stats, skeleton, out.with_suffix(".keypoints.csv"))
        print(f"report written to {out}")
    print(f"AP {report.ap:.4f}  AP50 {report.ap50:.4f}  AP75 {report.ap75:.4f}  AR {report.ar:.4f}")
    return 0


def cmd_report(args) -> int:
    from .metrics import EvalReport, compare_reports, delta_table_csv, format_delta_table
    from .training import LossReport

    a = EvalReport.from_json(Path(args.a).read_text(encoding="utf-8"))
    b = EvalReport.from_json(Path(args.b).read_text(encoding="utf-8"))
    rows = compare_reports(a, b)
    print(format_delta_table(rows[:4]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        delta_table_csv(rows, out / "delta.csv")
        if args.traces:
            _aggregate_traces(args.traces, out / "search_curve.csv")
        if args.losses:
            report = LossReport.from_csv(args.losses)
            report.to_csv(out / "loss_report.csv")
        print(f"report artifacts written to {out}")
    return 0


def _aggregate_traces(traces_csv, out_path) -> None:
    """Mean best-objective per evaluation index across all traces."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    with open(traces_csv, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            ei = int(row[2])
            val = float(row[3])
            sums[ei] = sums.get(ei, 0.0) + val
            counts[ei] = counts.get(ei, 0) + 1
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["eval_index", "mean_best_objective", "count"])
        for ei in sorted(sums):
            w.writerow([ei, repr(sums[ei] / counts[ei]), counts[ei]])


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
        _merge_config(args, args.command)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return USAGE_ERROR

    threads = getattr(args, "threads", None)
    if threads and threads > 1:
        # workers each get a single BLAS thread; must happen before numpy loads
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")

    from .errors import PoseLoopError

    try:
        return _COMMANDS[args.command](args)
    except PoseLoopError as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
