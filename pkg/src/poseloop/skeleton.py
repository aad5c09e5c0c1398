"""Keypoint taxonomy, structural groups, and the base/terminal split.

A structural group names four keypoints ``{A, B, C | D}``: three base
keypoints ordered from the torso outward and one terminal keypoint at the tip
of the body part. The prediction network consumes the (A, B, C) heatmap stack,
the verification network the (B, C, D) stack.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError


class StackOrder(enum.Enum):
    FOR_PHI = "prediction"     # (H_A, H_B, H_C)
    FOR_GAMMA = "verification"  # (H_B, H_C, H_D)


@dataclass(frozen=True)
class StructuralGroup:
    """One body part: ordered base triple (A, B, C) plus terminal D."""

    name: str
    base: tuple[int, int, int]
    terminal: int

    def __post_init__(self):
        members = self.members
        if len(set(members)) != 4:
            raise ValidationError("duplicate index in group", field=self.name)

    @property
    def a(self) -> int:
        return self.base[0]

    @property
    def b(self) -> int:
        return self.base[1]

    @property
    def c(self) -> int:
        return self.base[2]

    @property
    def members(self) -> tuple[int, int, int, int]:
        return (*self.base, self.terminal)


@dataclass(frozen=True)
class SkeletonSpec:
    name: str
    keypoint_names: tuple[str, ...]
    groups: tuple[StructuralGroup, ...]
    oks_k: tuple[float, ...]
    flip_pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        k = len(self.keypoint_names)
        if len(set(self.keypoint_names)) != k:
            raise ValidationError("duplicate keypoint name")
        if len(self.oks_k) != k:
            raise ValidationError(
                f"oks_k length {len(self.oks_k)} != {k} keypoints", field="oks_k"
            )
        if any(not (v > 0) for v in self.oks_k):
            raise ValidationError("non-positive k_i", field="oks_k")
        covered = set()
        a_slots = set()
        for g in self.groups:
            for i in g.members:
                if not (0 <= i < k):
                    raise ValidationError(f"keypoint index {i} out of range", field=g.name)
            covered.update(g.members)
            a_slots.add(g.a)
        missing = sorted(set(range(k)) - covered)
        if missing:
            raise ValidationError(
                f"uncovered keypoint: {self.keypoint_names[missing[0]]}"
            )
        for g in self.groups:
            if g.terminal in a_slots:
                raise ValidationError(
                    f"terminal {self.keypoint_names[g.terminal]} used as an A-slot",
                    field=g.name,
                )
        for l, r in self.flip_pairs:
            if not (0 <= l < k and 0 <= r < k):
                raise ValidationError(f"flip pair ({l}, {r}) out of range", field="flip_pairs")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def terminal_indices(self) -> tuple[int, ...]:
        return tuple(g.terminal for g in self.groups)

    @property
    def base_indices(self) -> tuple[int, ...]:
        terminals = set(self.terminal_indices)
        return tuple(i for i in range(self.num_keypoints) if i not in terminals)

    def index_of(self, name: str) -> int:
        try:
            return self.keypoint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown keypoint name '{name}'") from None

    def flipped_index(self, i: int) -> int:
        for l, r in self.flip_pairs:
            if i == l:
                return r
            if i == r:
                return l
        return i


_COCO_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Published COCO evaluation falloff constants, by keypoint.
_COCO_OKS_K = (
    0.026, 0.025, 0.025, 0.035, 0.035,
    0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
)

_CROWDPOSE_NAMES = (
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
    "head_top", "neck",
)

_CROWDPOSE_OKS_K = (
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
    0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
    0.079, 0.079,
)


def _pairs(names, spec_names):
    idx = {n: i for i, n in enumerate(spec_names)}
    return tuple((idx[l], idx[r]) for l, r in names)


def coco17_preset() -> SkeletonSpec:
    """The 17-keypoint skeleton partitioned into 6 structural groups.

    Terminals are the ears, wrists, and ankles; the A-slot of each group is
    its most torso-proximal member.
    """
    n = {name: i for i, name in enumerate(_COCO_NAMES)}
    groups = (
        StructuralGroup("head_left", (n["left_shoulder"], n["nose"], n["left_eye"]), n["left_ear"]),
        StructuralGroup("head_right", (n["right_shoulder"], n["nose"], n["right_eye"]), n["right_ear"]),
        StructuralGroup("arm_left", (n["left_hip"], n["left_shoulder"], n["left_elbow"]), n["left_wrist"]),
        StructuralGroup("arm_right", (n["right_hip"], n["right_shoulder"], n["right_elbow"]), n["right_wrist"]),
        StructuralGroup("leg_left", (n["left_shoulder"], n["left_hip"], n["left_knee"]), n["left_ankle"]),
        StructuralGroup("leg_right", (n["right_shoulder"], n["right_hip"], n["right_knee"]), n["right_ankle"]),
    )
    flip = _pairs(
        [("left_eye", "right_eye"), ("left_ear", "right_ear"),
         ("left_shoulder", "right_shoulder"), ("left_elbow", "right_elbow"),
         ("left_wrist", "right_wrist"), ("left_hip", "right_hip"),
         ("left_knee", "right_knee"), ("left_ankle", "right_ankle")],
        _COCO_NAMES,
    )
    return SkeletonSpec("coco17", _COCO_NAMES, groups, _COCO_OKS_K, flip)


def crowdpose14_preset() -> SkeletonSpec:
    """The 14-keypoint skeleton partitioned into 4 structural groups.

    Arm groups anchor on the head top and leg groups on the neck so that all
    14 keypoints are covered by the four groups.
    """
    n = {name: i for i, name in enumerate(_CROWDPOSE_NAMES)}
    groups = (
        StructuralGroup("arm_left", (n["head_top"], n["left_shoulder"], n["left_elbow"]), n["left_wrist"]),
        StructuralGroup("arm_right", (n["head_top"], n["right_shoulder"], n["right_elbow"]), n["right_wrist"]),
        StructuralGroup("leg_left", (n["neck"], n["left_hip"], n["left_knee"]), n["left_ankle"]),
        StructuralGroup("leg_right", (n["neck"], n["right_hip"], n["right_knee"]), n["right_ankle"]),
    )
    flip = _pairs(
        [("left_shoulder", "right_shoulder"), ("left_elbow", "right_elbow"),
         ("left_wrist", "right_wrist"), ("left_hip", "right_hip"),
         ("left_knee", "right_knee"), ("left_ankle", "right_ankle")],
        _CROWDPOSE_NAMES,
    )
    return SkeletonSpec("crowdpose14", _CROWDPOSE_NAMES, groups, _CROWDPOSE_OKS_K, flip)


PRESETS = {"coco17": coco17_preset, "crowdpose14": crowdpose14_preset}


def get_skeleton(name: str) -> SkeletonSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown skeleton preset '{name}'") from None


# --- text config format ----------------------------------------------------
#
#   name = coco17
#   keypoints = nose, left_eye, ...
#   oks_k = 0.026, 0.025, ...
#   flip_pairs = left_eye:right_eye, left_ear:right_ear
#   group head_left = left_shoulder, nose, left_eye | left_ear
#
# '#' starts a comment; blank lines are ignored; keypoint names in group and
# flip_pairs lines must come from the keypoints list.


def load_skeleton(text: str) -> SkeletonSpec:
    """Parse and validate a skeleton config document."""
    name = None
    keypoint_names: list[str] | None = None
    oks_k: list[float] | None = None
    flip_raw: list[tuple[str, str]] = []
    group_raw: list[tuple[str, str, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got '{line}'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            name = value
        elif key == "keypoints":
            keypoint_names = [s.strip() for s in value.split(",") if s.strip()]
        elif key == "oks_k":
            try:
                oks_k = [float(s) for s in value.split(",") if s.strip()]
            except ValueError as e:
                raise ParseError(f"bad oks_k value ({e})", line=lineno) from None
        elif key == "flip_pairs":
            for item in (s.strip() for s in value.split(",") if s.strip()):
                if ":" not in item:
                    raise ParseError(f"flip pair '{item}' must be 'left:right'", line=lineno)
                l, r = (s.strip() for s in item.split(":", 1))
                flip_raw.append((l, r))
        elif key.startswith("group ") or key.startswith("group\t"):
            group_raw.append((key.split(None, 1)[1].strip(), value, lineno))
        else:
            raise ParseError(f"unknown key '{key}'", line=lineno)

    if name is None:
        raise ParseError("missing 'name'")
    if keypoint_names is None:
        raise ParseError("missing 'keypoints'")
    if oks_k is None:
        raise ParseError("missing 'oks_k'")

    index = {n: i for i, n in enumerate(keypoint_names)}

    def resolve(kp_name, lineno):
        if kp_name not in index:
            raise ParseError(f"unknown keypoint name '{kp_name}'", line=lineno)
        return index[kp_name]

    groups = []
    for gname, value, lineno in group_raw:
        if "|" not in value:
            raise ParseError("group needs 'A, B, C | D'", line=lineno)
        base_part, term_part = value.split("|", 1)
        base_names = [s.strip() for s in base_part.split(",") if s.strip()]
        term_names = [s.strip() for s in term_part.split(",") if s.strip()]
        if len(base_names) != 3 or len(term_names) != 1:
            raise ValidationError("group size", line=lineno, field=gname)
        base = tuple(resolve(n, lineno) for n in base_names)
        terminal = resolve(term_names[0], lineno)
        groups.append(StructuralGroup(gname, base, terminal))

    flip = tuple((resolve(l, None), resolve(r, None)) for l, r in flip_raw)
    return SkeletonSpec(name, tuple(keypoint_names), tuple(groups), tuple(oks_k), flip)


def format_skeleton(spec: SkeletonSpec) -> str:
    """Serialize a SkeletonSpec to the text config format."""
    lines = [
        f"name = {spec.name}",
        "keypoints = " + ", ".join(spec.keypoint_names),
        "oks_k = " + ", ".join(repr(v) for v in spec.oks_k),
    ]
    if spec.flip_pairs:
        lines.append(
            "flip_pairs = "
            + ", ".join(
                f"{spec.keypoint_names[l]}:{spec.keypoint_names[r]}"
                for l, r in spec.flip_pairs
            )
        )
    for g in spec.groups:
        base = ", ".join(spec.keypoint_names[i] for i in g.base)
        lines.append(f"group {g.name} = {base} | {spec.keypoint_names[g.terminal]}")
    return "\n".join(lines) + "\n"


def group_stack(
    spec: SkeletonSpec, group_index: int, heatmaps, order: StackOrder
) -> np.ndarray:
    """Stack one group's heatmaps in the slot order a network consumes.

    ``FOR_PHI`` yields (H_A, H_B, H_C); ``FOR_GAMMA`` yields (H_B, H_C, H_D).
    """
    if len(heatmaps) != spec.num_keypoints:
        raise ValueError(
            f"expected {spec.num_keypoints} heatmaps, got {len(heatmaps)}"
        )
    g = spec.groups[group_index]  # IndexError on a bad group index, per contract
    if order is StackOrder.FOR_PHI:
        idx = (g.a, g.b, g.c)
    else:
        idx = (g.b, g.c, g.terminal)
    return np.stack([np.asarray(heatmaps[i]) for i in idx], axis=0)
