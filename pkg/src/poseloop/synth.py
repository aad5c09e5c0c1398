"""Synthetic articulated poses with corrupted observations.

Stands in for a detector + backbone: each sample carries clean ground-truth
heatmaps, corrupted observed heatmaps (terminal keypoints displaced,
attenuated, and sometimes shadowed by a distractor peak), and a pseudo
feature map rendered from limb-segment masks.

Pose geometry: a global torso-tilt latent leans the whole body; each group's
terminal segment (forearm, shin, eye-to-ear line) tracks that tilt with small
jitter while the middle segment articulates freely. Terminal keypoints
therefore carry information about the group's anchor keypoint that the
mid-chain keypoints alone do not; that structural correlation is what the
verification network is meant to learn. Limb masks are tapered capsules,
crisp at the distal tip and fat at the proximal joint, so tips stay readable
from the feature map while anchor joints stay ambiguous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .heatmap import GaussianParams, Keypoint, Visibility, encode_keypoint
from .skeleton import SkeletonSpec, coco17_preset
from . import tensorio
from .tensorio import AnnotationRecord


@dataclass(frozen=True)
class GeneratorConfig:
    """Pose sampling ranges. Lengths are canvas pixels at person scale 1."""

    canvas: tuple[int, int] = (256, 192)          # (width, height)
    heatmap: tuple[int, int] = (64, 48)           # (width, height)
    feature_channels: int = 8
    scale_range: tuple[float, float] = (0.75, 1.25)
    length_jitter: tuple[float, float] = (0.95, 1.05)
    tilt_max_deg: float = 30.0
    terminal_track_jitter_deg: float = 9.0        # terminal segment vs body axis
    mid_swing_deg: float = 95.0                   # upper arm freedom
    thigh_swing_deg: float = 40.0
    torso_len: float = 42.0
    hip_half: float = 10.0
    shoulder_half: float = 16.0
    head_len: float = 16.0
    eye_offset: tuple[float, float] = (5.5, 3.0)  # lateral, upward from nose
    ear_offset: tuple[float, float] = (9.5, 4.0)
    upper_arm: float = 24.0
    forearm: float = 30.0
    thigh: float = 30.0
    shin: float = 30.0

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigError(f"empty scale range {self.scale_range}")
        if self.length_jitter[0] > self.length_jitter[1]:
            raise ConfigError(f"empty length jitter range {self.length_jitter}")
        for name in ("torso_len", "upper_arm", "forearm", "thigh", "shin", "head_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def stride(self) -> float:
        return self.canvas[0] / self.heatmap[0]


@dataclass(frozen=True)
class CorruptionConfig:
    """Observation corruption; terminal keypoints get the full treatment."""

    terminal_shift_max: float = 6.0       # heatmap pixels
    distractor_prob: float = 0.3
    distractor_amp: float = 0.7
    attenuation_range: tuple[float, float] = (0.4, 0.9)
    base_noise_std: float = 0.02
    distractor_radius: tuple[float, float] = (4.0, 12.0)  # heatmap pixels
    feature_noise_std: float = 0.03

    def __post_init__(self):
        if not (0.0 <= self.distractor_prob <= 1.0):
            raise ConfigError(f"distractor_prob {self.distractor_prob} not in [0, 1]")
        if self.terminal_shift_max < 0:
            raise ConfigError("terminal_shift_max must be >= 0")
        lo, hi = self.attenuation_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"attenuation_range {self.attenuation_range} not in (0, 1]")


@dataclass
class PoseSample:
    keypoints: list[Keypoint]
    canvas: tuple[int, int]
    bone_lengths: dict[str, float]
    person_scale: float


@dataclass
class ObservedSample:
    gt_heatmaps: np.ndarray    # (K, H', W') clean targets
    obs_heatmaps: np.ndarray   # (K, H', W') corrupted observations
    feature_map: np.ndarray    # (F, H', W')
    pose: PoseSample

    def __post_init__(self):
        if not (
            self.gt_heatmaps.shape[1:] == self.obs_heatmaps.shape[1:] == self.feature_map.shape[1:]
        ):
            raise ShapeError("all grids must share identical spatial dimensions")


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _draw_joints(rng, cfg: GeneratorConfig):
    """One unconstrained draw of all named joints (canvas coordinates)."""
    d2r = math.pi / 180.0
    s = rng.uniform(*cfg.scale_range)
    jit = lambda: rng.uniform(*cfg.length_jitter)
    tilt = rng.uniform(-cfg.tilt_max_deg, cfg.tilt_max_deg) * d2r
    up = -math.pi / 2 + tilt
    down = math.pi / 2 + tilt
    right = tilt  # perpendicular to the body axis

    w, h = cfg.canvas
    pelvis = np.array([rng.uniform(0.36 * w, 0.64 * w), rng.uniform(0.47 * h, 0.60 * h)])

    joints: dict[str, np.ndarray] = {}
    bones: dict[str, float] = {}

    def seg(bone, origin, angle, length):
        bones[bone] = length
        return origin + _unit(angle) * length

    hip_half = cfg.hip_half * s * jit()
    sh_half = cfg.shoulder_half * s * jit()
    joints["left_hip"] = pelvis + _unit(right) * hip_half
    joints["right_hip"] = pelvis - _unit(right) * hip_half
    neck = seg("torso", pelvis, up, cfg.torso_len * s * jit())
    joints["neck"] = neck
    joints["left_shoulder"] = neck + _unit(right) * sh_half
    joints["right_shoulder"] = neck - _unit(right) * sh_half

    head_dir = tilt + rng.uniform(-8, 8) * d2r
    u_r = _unit(head_dir)
    u_u = _unit(-math.pi / 2 + head_dir)
    nose = seg("head", neck, -math.pi / 2 + head_dir, cfg.head_len * s * jit())
    joints["nose"] = nose
    joints["head_top"] = nose + u_u * (6.0 * s)
    elat, evert = cfg.eye_offset
    alat, avert = cfg.ear_offset
    joints["left_eye"] = nose + u_r * (elat * s) + u_u * (evert * s)
    joints["right_eye"] = nose - u_r * (elat * s) + u_u * (evert * s)
    joints["left_ear"] = nose + u_r * (alat * s) + u_u * (avert * s)
    joints["right_ear"] = nose - u_r * (alat * s) + u_u * (avert * s)

    track = cfg.terminal_track_jitter_deg
    for side, shoulder, hip in (
        ("left", joints["left_shoulder"], joints["left_hip"]),
        ("right", joints["right_shoulder"], joints["right_hip"]),
    ):
        phi_u = down + rng.uniform(-cfg.mid_swing_deg, cfg.mid_swing_deg) * d2r
        elbow = seg(f"upper_arm_{side}", shoulder, phi_u, cfg.upper_arm * s * jit())
        phi_f = down + rng.uniform(-track, track) * d2r
        joints[f"{side}_elbow"] = elbow
        joints[f"{side}_wrist"] = seg(f"forearm_{side}", elbow, phi_f, cfg.forearm * s * jit())

        phi_t = down + rng.uniform(-cfg.thigh_swing_deg, cfg.thigh_swing_deg) * d2r
        knee = seg(f"thigh_{side}", hip, phi_t, cfg.thigh * s * jit())
        phi_s = down + rng.uniform(-track, track) * d2r
        joints[f"{side}_knee"] = knee
        joints[f"{side}_ankle"] = seg(f"shin_{side}", knee, phi_s, cfg.shin * s * jit())

    return joints, bones, s


def sample_pose(
    rng: np.random.Generator,
    cfg: GeneratorConfig,
    skeleton: SkeletonSpec | None = None,
) -> PoseSample:
    """Draw one articulated pose; resamples until every joint fits the canvas."""
    skeleton = skeleton or coco17_preset()
    w, h = cfg.canvas
    for _ in range(200):
        joints, bones, s = _draw_joints(rng, cfg)
        pts = [joints[name] for name in skeleton.keypoint_names]
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        if xs.min() >= 1 and xs.max() < w - 1 and ys.min() >= 1 and ys.max() < h - 1:
            kps = [Keypoint(float(x), float(y), 1.0, Visibility.VISIBLE) for x, y in pts]
            return PoseSample(kps, cfg.canvas, bones, s)
    raise ConfigError("could not fit a pose on the canvas; ranges too large")


# --- feature map -------------------------------------------------------------

# (channel, chain of keypoint names, proximal radius, distal radius)
_LIMB_CHAINS = {
    "coco17": (
        ("torso", ("left_hip", "right_hip", "right_shoulder", "left_shoulder", "left_hip"), 4.5, 4.5),
        ("head_left", ("nose", "left_eye", "left_ear"), 2.6, 0.9),
        ("head_right", ("nose", "right_eye", "right_ear"), 2.6, 0.9),
        ("arm_left", ("left_shoulder", "left_elbow", "left_wrist"), 3.0, 0.9),
        ("arm_right", ("right_shoulder", "right_elbow", "right_wrist"), 3.0, 0.9),
        ("leg_left", ("left_hip", "left_knee", "left_ankle"), 3.0, 0.9),
        ("leg_right", ("right_hip", "right_knee", "right_ankle"), 3.0, 0.9),
    ),
    "crowdpose14": (
        ("torso", ("left_hip", "right_hip", "right_shoulder", "left_shoulder", "left_hip"), 4.5, 4.5),
        ("head", ("neck", "head_top"), 2.6, 1.2),
        ("arm_left", ("left_shoulder", "left_elbow", "left_wrist"), 3.0, 0.9),
        ("arm_right", ("right_shoulder", "right_elbow", "right_wrist"), 3.0, 0.9),
        ("leg_left", ("left_hip", "left_knee", "left_ankle"), 3.0, 0.9),
        ("leg_right", ("right_hip", "right_knee", "right_ankle"), 3.0, 0.9),
    ),
}


def _capsule(channel, p0, p1, r0, r1, xs, ys):
    """Max-accumulate a soft capsule from p0 (radius r0) to p1 (radius r1)."""
    v = p1 - p0
    vv = float(v @ v)
    dx = xs - p0[0]
    dy = ys - p0[1]
    if vv < 1e-9:
        t = np.zeros(np.broadcast_shapes(dx.shape, dy.shape))
    else:
        t = np.clip((dx * v[0] + dy * v[1]) / vv, 0.0, 1.0)
    ex = dx - t * v[0]
    ey = dy - t * v[1]
    r = r0 + (r1 - r0) * t
    np.maximum(channel, np.exp(-(ex**2 + ey**2) / (2.0 * r**2)), out=channel)


def _blur3(img, passes=2):
    """Cheap separable [1 2 1]/4 blur, applied ``passes`` times."""
    for _ in range(passes):
        p = np.pad(img, 1, mode="edge")
        img = (p[:-2, 1:-1] + 2 * p[1:-1, 1:-1] + p[2:, 1:-1]) / 4.0
        p = np.pad(img, 1, mode="edge")
        img = (p[1:-1, :-2] + 2 * p[1:-1, 1:-1] + p[1:-1, 2:]) / 4.0
    return img


def render_feature_map(
    pose: PoseSample,
    cfg: GeneratorConfig,
    rng,
    noise_std: float = 0.03,
    skeleton: SkeletonSpec | None = None,
) -> np.ndarray:
    skeleton = skeleton or coco17_preset()
    chains = _LIMB_CHAINS.get(skeleton.name, _LIMB_CHAINS["coco17"])
    wh, hh = cfg.heatmap
    stride = cfg.stride
    name_to_pt = {
        name: np.array([kp.x, kp.y]) / stride
        for name, kp in zip(skeleton.keypoint_names, pose.keypoints)
    }
    xs = np.arange(wh, dtype=np.float64)[None, :]
    ys = np.arange(hh, dtype=np.float64)[:, None]
    fmap = np.zeros((cfg.feature_channels, hh, wh), dtype=np.float64)
    n_chains = min(len(chains), cfg.feature_channels)
    for ci in range(n_chains):
        _, chain, r_prox, r_dist = chains[ci]
        pts = [name_to_pt[n] for n in chain if n in name_to_pt]
        ch = fmap[ci]
        nseg = len(pts) - 1
        for si in range(nseg):
            ra = r_prox + (r_dist - r_prox) * (si / nseg)
            rb = r_prox + (r_dist - r_prox) * ((si + 1) / nseg)
            _capsule(ch, pts[si], pts[si + 1], ra, rb, xs, ys)
    # remaining channels: faint union of all limb channels
    for ci in range(n_chains, cfg.feature_channels):
        union = fmap[ci]
        for cj in range(1, n_chains):
            np.maximum(union, fmap[cj] * 0.5, out=union)
    for ci in range(cfg.feature_channels):
        gain = rng.uniform(0.7, 1.1)
        fmap[ci] = _blur3(fmap[ci]) * gain
    if noise_std > 0:
        fmap += rng.normal(0.0, noise_std, fmap.shape)
    return fmap.astype(np.float32)


# --- observation -------------------------------------------------------------


def render_observation(
    pose: PoseSample,
    cc: CorruptionConfig,
    g: GaussianParams,
    rng: np.random.Generator,
    skeleton: SkeletonSpec | None = None,
    cfg: GeneratorConfig | None = None,
) -> ObservedSample:
    """Clean targets plus a corrupted observation of one pose."""
    skeleton = skeleton or coco17_preset()
    cfg = cfg or GeneratorConfig()
    wh, hh = cfg.heatmap
    stride = cfg.stride
    terminals = set(skeleton.terminal_indices)

    gt = np.empty((skeleton.num_keypoints, hh, wh), dtype=np.float32)
    obs = np.empty_like(gt)
    for i, kp in enumerate(pose.keypoints):
        hx = min(wh - 1e-3, max(0.0, kp.x / stride))
        hy = min(hh - 1e-3, max(0.0, kp.y / stride))
        gt[i] = encode_keypoint((hx, hy), g, (wh, hh))
        if i in terminals:
            shift = rng.uniform(0.0, cc.terminal_shift_max)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            cx = min(wh - 1e-3, max(0.0, hx + shift * math.cos(ang)))
            cy = min(hh - 1e-3, max(0.0, hy + shift * math.sin(ang)))
            amp = rng.uniform(*cc.attenuation_range)
            grid = encode_keypoint((cx, cy), g, (wh, hh)) * amp
            if rng.uniform() < cc.distractor_prob:
                dr = rng.uniform(*cc.distractor_radius)
                da = rng.uniform(0.0, 2.0 * math.pi)
                dx = min(wh - 1e-3, max(0.0, hx + dr * math.cos(da)))
                dy = min(hh - 1e-3, max(0.0, hy + dr * math.sin(da)))
                grid = grid + encode_keypoint((dx, dy), g, (wh, hh)) * cc.distractor_amp
            obs[i] = grid
        else:
            obs[i] = gt[i]
    if cc.base_noise_std > 0:
        obs += rng.normal(0.0, cc.base_noise_std, obs.shape).astype(np.float32)
    fmap = render_feature_map(pose, cfg, rng, cc.feature_noise_std, skeleton)
    return ObservedSample(gt, obs, fmap, pose)


def generate_sample(
    seed: int,
    index: int,
    gen_cfg: GeneratorConfig,
    cc: CorruptionConfig,
    g: GaussianParams,
    skeleton: SkeletonSpec | None = None,
) -> ObservedSample:
    """Deterministic sample from (seed, index)."""
    skeleton = skeleton or coco17_preset()
    rng = np.random.default_rng([seed, index])
    pose = sample_pose(rng, gen_cfg, skeleton)
    return render_observation(pose, cc, g, rng, skeleton, gen_cfg)


# --- dataset on disk ----------------------------------------------------------


def _sample_tensors(s: ObservedSample) -> list[np.ndarray]:
    kps = np.array(
        [[kp.x, kp.y, float(kp.visibility)] for kp in s.pose.keypoints], dtype=np.float32
    )
    meta = np.array(
        [s.pose.person_scale, s.pose.canvas[0], s.pose.canvas[1], 0.0], dtype=np.float32
    )
    return [s.gt_heatmaps, s.obs_heatmaps, s.feature_map, kps, meta]


def pose_bbox(kps: np.ndarray) -> tuple[float, float, float, float]:
    """Axis-aligned box around visible keypoints (x, y, w, h)."""
    vis = kps[:, 2] > 0
    pts = kps[vis][:, :2] if vis.any() else kps[:, :2]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (float(x0), float(y0), float(max(x1 - x0, 1.0)), float(max(y1 - y0, 1.0)))


def build_dataset(
    n: int,
    seed: int,
    out_path,
    gen_cfg: GeneratorConfig | None = None,
    cc: CorruptionConfig | None = None,
    g: GaussianParams | None = None,
    skeleton: SkeletonSpec | None = None,
) -> dict:
    """Write ``n`` samples plus a manifest and ground-truth annotations.

    Split is by index: the first 90% are train, the rest val. Byte-identical
    for identical (n, seed, configs).
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    gen_cfg = gen_cfg or GeneratorConfig()
    cc = cc or CorruptionConfig()
    g = g or GaussianParams()
    skeleton = skeleton or coco17_preset()

    out = Path(out_path)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(n):
        sample = generate_sample(seed, i, gen_cfg, cc, g, skeleton)
        tensorio.write_tensors(out / "samples" / f"{i:06d}.tns", _sample_tensors(sample))
        kps = np.array([[kp.x, kp.y, int(kp.visibility)] for kp in sample.pose.keypoints])
        records.append(
            AnnotationRecord(
                id=f"{i:06d}",
                keypoints=[(float(x), float(y), int(v)) for x, y, v in kps],
                bbox=pose_bbox(kps),
                skeleton_name=skeleton.name,
            )
        )
    tensorio.write_annotations(out / "annotations.ndjson", records)

    n_train = int(n * 0.9)
    manifest = {
        "name": out.name,
        "n": n,
        "seed": seed,
        "skeleton": skeleton.name,
        "canvas": list(gen_cfg.canvas),
        "heatmap": list(gen_cfg.heatmap),
        "feature_channels": gen_cfg.feature_channels,
        "sigma": g.sigma,
        "amplitude_mode": g.amplitude_mode.value,
        "splits": {
            "train": {"start": 0, "count": n_train},
            "val": {"start": n_train, "count": n - n_train},
        },
        "corruption": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cc).items()
        },
        "generator": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(gen_cfg).items()
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


@dataclass
class Dataset:
    """In-memory dataset: stacked arrays plus the manifest."""

    manifest: dict
    gt: np.ndarray        # (n, K, H', W')
    obs: np.ndarray       # (n, K, H', W')
    features: np.ndarray  # (n, F, H', W')
    keypoints: np.ndarray  # (n, K, 3) canvas coords + visibility
    scales: np.ndarray     # (n,) generator person scale

    @property
    def n(self) -> int:
        return self.gt.shape[0]

    @property
    def train_indices(self) -> np.ndarray:
        sp = self.manifest["splits"]["train"]
        return np.arange(sp["start"], sp["start"] + sp["count"])

    @property
    def val_indices(self) -> np.ndarray:
        sp = self.manifest["splits"]["val"]
        return np.arange(sp["start"], sp["start"] + sp["count"])

    @property
    def stride(self) -> float:
        return self.manifest["canvas"][0] / self.manifest["heatmap"][0]


def load_dataset(path) -> Dataset:
    root = Path(path)
    with open(root / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    n = manifest["n"]
    gt, obs, fmaps, kps, scales = [], [], [], [], []
    for i in range(n):
        tensors = tensorio.read_tensors(root / "samples" / f"{i:06d}.tns", count=5)
        gt.append(tensors[0])
        obs.append(tensors[1])
        fmaps.append(tensors[2])
        kps.append(tensors[3])
        scales.append(tensors[4][0])
    return Dataset(
        manifest,
        np.stack(gt),
        np.stack(obs),
        np.stack(fmaps),
        np.stack(kps),
        np.array(scales, dtype=np.float32),
    )
