"""Object keypoint similarity, AP/AR aggregation, per-keypoint diagnostics.

Single-person evaluation: each pair holds one prediction and one ground
truth; the detection score for PR ranking is the mean predicted keypoint
confidence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, NoVisibleKeypointsError, ShapeError, SkeletonMismatchError
from .heatmap import Keypoint
from .skeleton import SkeletonSpec

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalPair:
    """One prediction against one ground truth, with the object scale and the
    per-keypoint falloff constants."""

    predicted: list[Keypoint]
    ground_truth: list[Keypoint]
    scale: float
    k: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.predicted) == len(self.ground_truth) == len(self.k)):
            raise ShapeError(
                f"keypoint list lengths differ: {len(self.predicted)}, "
                f"{len(self.ground_truth)}, {len(self.k)}"
            )
        if not (self.scale > 0):
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @property
    def detection_score(self) -> float:
        return float(np.mean([p.confidence for p in self.predicted]))


def keypoint_similarity(d: float, s: float, k: float) -> float:
    """Single-keypoint similarity term exp(-d^2 / (2 s^2 k^2))."""
    return math.exp(-(d * d) / (2.0 * s * s * k * k))


def oks(pair: EvalPair) -> float:
    """Object keypoint similarity over visible ground-truth keypoints."""
    num = 0.0
    count = 0
    for p, t, k in zip(pair.predicted, pair.ground_truth, pair.k):
        if t.visibility > 0:
            d = math.hypot(p.x - t.x, p.y - t.y)
            num += keypoint_similarity(d, pair.scale, k)
            count += 1
    if count == 0:
        raise NoVisibleKeypointsError("OKS needs at least one visible ground-truth keypoint")
    return num / count


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar: float
    skeleton_name: str
    keypoint_names: tuple[str, ...]
    mean_error: tuple[float, ...]        # per-keypoint mean pixel error
    mean_confidence: tuple[float, ...]   # per-keypoint mean predicted confidence
    mean_similarity: tuple[float, ...]   # per-keypoint mean similarity term
    num_pairs: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "ap": self.ap,
                "ap50": self.ap50,
                "ap75": self.ap75,
                "ar": self.ar,
                "skeleton": self.skeleton_name,
                "keypoints": list(self.keypoint_names),
                "mean_error": list(self.mean_error),
                "mean_confidence": list(self.mean_confidence),
                "mean_similarity": list(self.mean_similarity),
                "num_pairs": self.num_pairs,
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(
            ap=obj["ap"], ap50=obj["ap50"], ap75=obj["ap75"], ar=obj["ar"],
            skeleton_name=obj["skeleton"],
            keypoint_names=tuple(obj["keypoints"]),
            mean_error=tuple(obj["mean_error"]),
            mean_confidence=tuple(obj["mean_confidence"]),
            mean_similarity=tuple(obj["mean_similarity"]),
            num_pairs=obj.get("num_pairs", 0),
        )


def _interpolated_ap(tp_flags: list[bool], total: int) -> float:
    """Area under the interpolated precision-recall curve."""
    precisions = []
    recalls = []
    tp = 0
    for i, flag in enumerate(tp_flags, start=1):
        if flag:
            tp += 1
            precisions.append(tp / i)
            recalls.append(tp / total)
    if not precisions:
        return 0.0
    # monotone envelope from the right
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    area = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        area += (r - prev_r) * p
        prev_r = r
    return area


def average_precision(
    pairs: list[EvalPair],
    skeleton: SkeletonSpec | None = None,
    thresholds=DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Threshold-swept AP/AR plus per-keypoint statistics."""
    if not pairs:
        raise EmptyInputError("average_precision needs at least one pair")
    scores = [p.detection_score for p in pairs]
    similarities = [oks(p) for p in pairs]
    order = sorted(range(len(pairs)), key=lambda i: (-scores[i], i))

    ap_by_t = {}
    ar_by_t = {}
    n = len(pairs)
    for t in thresholds:
        flags = [similarities[i] >= t for i in order]
        ap_by_t[t] = _interpolated_ap(flags, n)
        ar_by_t[t] = sum(flags) / n

    stats = per_keypoint_stats(pairs, skeleton)
    return EvalReport(
        ap=float(np.mean(list(ap_by_t.values()))),
        ap50=ap_by_t.get(0.5, 0.0),
        ap75=ap_by_t.get(0.75, 0.0),
        ar=float(np.mean(list(ar_by_t.values()))),
        skeleton_name=stats["skeleton"],
        keypoint_names=stats["names"],
        mean_error=stats["mean_error"],
        mean_confidence=stats["mean_confidence"],
        mean_similarity=stats["mean_similarity"],
        num_pairs=n,
    )


def per_keypoint_stats(pairs: list[EvalPair], skeleton: SkeletonSpec | None = None) -> dict:
    """Per-keypoint mean pixel error, confidence, and similarity, plus base
    and terminal aggregates when a skeleton is given."""
    if not pairs:
        raise EmptyInputError("per_keypoint_stats needs at least one pair")
    kcount = len(pairs[0].predicted)
    err_sum = np.zeros(kcount)
    sim_sum = np.zeros(kcount)
    conf_sum = np.zeros(kcount)
    seen = np.zeros(kcount)
    for pair in pairs:
        if len(pair.predicted) != kcount:
            raise ShapeError("pairs disagree on keypoint count")
        for i, (p, t, k) in enumerate(zip(pair.predicted, pair.ground_truth, pair.k)):
            if t.visibility > 0:
                d = math.hypot(p.x - t.x, p.y - t.y)
                err_sum[i] += d
                sim_sum[i] += keypoint_similarity(d, pair.scale, k)
                conf_sum[i] += p.confidence
                seen[i] += 1
    denom = np.maximum(seen, 1)
    mean_error = err_sum / denom
    mean_similarity = sim_sum / denom
    mean_confidence = conf_sum / denom

    names = tuple(skeleton.keypoint_names) if skeleton else tuple(
        f"kp{i}" for i in range(kcount)
    )
    out = {
        "skeleton": skeleton.name if skeleton else "unknown",
        "names": names,
        "mean_error": tuple(float(v) for v in mean_error),
        "mean_confidence": tuple(float(v) for v in mean_confidence),
        "mean_similarity": tuple(float(v) for v in mean_similarity),
    }
    if skeleton is not None:
        terminals = list(skeleton.terminal_indices)
        bases = list(skeleton.base_indices)
        for label, idx in (("terminal", terminals), ("base", bases)):
            out[f"{label}_mean_error"] = float(np.mean(mean_error[idx]))
            out[f"{label}_mean_confidence"] = float(np.mean(mean_confidence[idx]))
            out[f"{label}_mean_similarity"] = float(np.mean(mean_similarity[idx]))
    return out


def stats_to_csv(stats: dict, skeleton: SkeletonSpec, path) -> None:
    """Per-keypoint stats in a keypoint-per-row table with aggregate rows."""
    terminals = set(skeleton.terminal_indices)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["keypoint", "role", "mean_error", "mean_confidence", "mean_similarity"])
        for i, name in enumerate(stats["names"]):
            role = "terminal" if i in terminals else "base"
            w.writerow([
                name, role,
                repr(stats["mean_error"][i]),
                repr(stats["mean_confidence"][i]),
                repr(stats["mean_similarity"][i]),
            ])
        for label in ("base", "terminal"):
            w.writerow([
                label.upper(), label,
                repr(stats[f"{label}_mean_error"]),
                repr(stats[f"{label}_mean_confidence"]),
                repr(stats[f"{label}_mean_similarity"]),
            ])


@dataclass
class DeltaRow:
    metric: str
    a: float
    b: float

    @property
    def delta(self) -> float:
        return self.b - self.a

    @property
    def annotated(self) -> str:
        return f"{self.delta:+.4f}"


def compare_reports(a: EvalReport, b: EvalReport) -> list[DeltaRow]:
    """Elementwise differences (b minus a) with signed annotations."""
    if a.skeleton_name != b.skeleton_name or a.keypoint_names != b.keypoint_names:
        raise SkeletonMismatchError(
            f"reports describe different skeletons: {a.skeleton_name} vs {b.skeleton_name}"
        )
    rows = [
        DeltaRow("ap", a.ap, b.ap),
        DeltaRow("ap50", a.ap50, b.ap50),
        DeltaRow("ap75", a.ap75, b.ap75),
        DeltaRow("ar", a.ar, b.ar),
    ]
    for i, name in enumerate(a.keypoint_names):
        rows.append(DeltaRow(f"error/{name}", a.mean_error[i], b.mean_error[i]))
        rows.append(DeltaRow(f"confidence/{name}", a.mean_confidence[i], b.mean_confidence[i]))
        rows.append(DeltaRow(f"similarity/{name}", a.mean_similarity[i], b.mean_similarity[i]))
    return rows


def delta_table_csv(rows: list[DeltaRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["metric", "a", "b", "delta"])
        for r in rows:
            w.writerow([r.metric, repr(r.a), repr(r.b), r.annotated])


def format_delta_table(rows: list[DeltaRow]) -> str:
    width = max(len(r.metric) for r in rows)
    lines = [f"{'metric':<{width}}  {'a':>10}  {'b':>10}  delta"]
    for r in rows:
        lines.append(f"{r.metric:<{width}}  {r.a:>10.4f}  {r.b:>10.4f}  {r.annotated}")
    return "\n".join(lines)
