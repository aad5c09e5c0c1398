"""Search-based refinement of low-confidence terminal keypoints.

The trained verification network scores a candidate terminal location by how
well it back-predicts the group's anchor heatmap; a bounded compass pattern
search minimizes that score inside a disc of radius ``delta`` around the
initial decode. The refinement never returns a candidate whose objective is
not strictly better than the starting point's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import net as nnets
from .errors import ConfigError, MissingModelError, OutOfBoundsError
from .heatmap import GaussianParams, Keypoint, decode_subpixel, encode_keypoint, value_at
from .net import ConvNetParams
from .skeleton import SkeletonSpec
from .training import heatmap_loss


@dataclass(frozen=True)
class SearchConfig:
    delta: float = 8.0          # search radius, heatmap pixels
    steps: int = 50             # objective evaluation budget
    initial_step: float | None = None  # defaults to delta / 2
    shrink: float = 0.5
    confidence_gate: float = 0.5
    min_step: float = 0.25
    rerender_anchor: bool = False  # score against a re-rendered anchor Gaussian

    def __post_init__(self):
        if not (self.delta > 0):
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 < self.shrink < 1.0):
            raise ConfigError(f"shrink must be in (0, 1), got {self.shrink}")
        if not (0.0 <= self.confidence_gate <= 1.0):
            raise ConfigError(f"confidence gate must be in [0, 1], got {self.confidence_gate}")

    @property
    def step0(self) -> float:
        return self.delta / 2 if self.initial_step is None else self.initial_step


@dataclass
class TraceEntry:
    offset: tuple[float, float]  # candidate minus init
    objective: float
    accepted: bool


@dataclass
class SearchTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    initial_objective: float = math.inf
    final_objective: float = math.inf

    @property
    def evaluations(self) -> int:
        return 1 + len(self.entries)  # the initial evaluation plus candidates

    def accepted_objectives(self) -> list[float]:
        return [e.objective for e in self.entries if e.accepted]

    def best_so_far(self) -> list[float]:
        """Objective of the current accepted point after each evaluation."""
        cur = self.initial_objective
        curve = [cur]
        for e in self.entries:
            if e.accepted:
                cur = e.objective
            curve.append(cur)
        return curve


_COMPASS = (
    (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (-1.0, 1.0),
    (-1.0, 0.0), (-1.0, -1.0), (0.0, -1.0), (1.0, -1.0),
)


def _run_gamma(gamma, x: np.ndarray) -> np.ndarray:
    if isinstance(gamma, ConvNetParams):
        return nnets.forward(gamma, x)
    return gamma(x)


def objective(
    gamma,
    h_a: np.ndarray,
    h_b: np.ndarray,
    h_c: np.ndarray,
    fmap: np.ndarray,
    candidate,
    g: GaussianParams,
) -> float:
    """Verification score of a candidate terminal location.

    Renders the candidate as a Gaussian heatmap, back-predicts the anchor
    with the verification network, and returns the mean squared difference
    against the observed anchor heatmap. Lower is better.
    """
    h, w = np.asarray(h_a).shape
    cx, cy = (candidate.x, candidate.y) if isinstance(candidate, Keypoint) else candidate
    if not (0.0 <= cx < w and 0.0 <= cy < h):
        raise OutOfBoundsError(f"candidate ({cx}, {cy}) outside the heatmap grid")
    cand_hm = encode_keypoint((cx, cy), g, (w, h), dtype=np.asarray(h_b).dtype)
    x = np.concatenate(
        [np.asarray(h_b)[None], np.asarray(h_c)[None], cand_hm[None], np.asarray(fmap)], axis=0
    )
    pred_a = _run_gamma(gamma, x)
    return heatmap_loss(h_a, pred_a)


def refine_terminal(
    gamma,
    h_a: np.ndarray,
    h_b: np.ndarray,
    h_c: np.ndarray,
    fmap: np.ndarray,
    init: Keypoint,
    sc: SearchConfig,
    g: GaussianParams,
):
    """Compass pattern search around ``init``; returns ``(refined, trace)``.

    Probes the 8 compass offsets at the current step, moves to the best
    strictly improving candidate, halves the step otherwise; every candidate
    is clipped to the delta-disc around ``init`` and to the grid. Stops when
    the evaluation budget is spent or the step falls below ``min_step``. If
    nothing improved on the initial objective, ``init`` is returned.
    """
    h, w = np.asarray(h_a).shape
    if not (0.0 <= init.x < w and 0.0 <= init.y < h):
        raise OutOfBoundsError(f"init ({init.x}, {init.y}) outside the heatmap grid")

    def obj(pt):
        return objective(gamma, h_a, h_b, h_c, fmap, pt, g)

    def clip(px, py):
        dx, dy = px - init.x, py - init.y
        norm = math.hypot(dx, dy)
        if norm > sc.delta:
            scale = sc.delta / norm
            px, py = init.x + dx * scale, init.y + dy * scale
        px = min(w - 1.0, max(0.0, px))
        py = min(h - 1.0, max(0.0, py))
        return px, py

    trace = SearchTrace()
    init_obj = obj((init.x, init.y))
    trace.initial_objective = init_obj
    evals = 1

    best = (init.x, init.y)
    best_obj = init_obj
    step = sc.step0

    while evals < sc.steps and step >= sc.min_step:
        ring_best = None
        ring_entry = None
        ring_best_obj = best_obj
        for dx, dy in _COMPASS:
            if evals >= sc.steps:
                break
            cand = clip(best[0] + dx * step, best[1] + dy * step)
            if math.hypot(cand[0] - best[0], cand[1] - best[1]) < 1e-9:
                continue  # clipped onto the current point; nothing to evaluate
            val = obj(cand)
            evals += 1
            entry = TraceEntry((cand[0] - init.x, cand[1] - init.y), val, False)
            trace.entries.append(entry)
            if val < ring_best_obj:
                ring_best = cand
                ring_best_obj = val
                ring_entry = entry
        if ring_best is not None:
            ring_entry.accepted = True
            best = ring_best
            best_obj = ring_best_obj
        else:
            step *= sc.shrink

    if best_obj < init_obj:
        refined = Keypoint(best[0], best[1], confidence=init.confidence,
                           visibility=init.visibility)
        trace.final_objective = best_obj
    else:
        refined = init
        trace.final_objective = init_obj
    return refined, trace


@dataclass
class GroupRefinement:
    group: str
    init_xy: tuple[float, float]
    refined_xy: tuple[float, float]
    init_objective: float
    final_objective: float
    evaluations: int
    trace: SearchTrace


def refine_pose(
    models: dict,
    obs_heatmaps: np.ndarray,
    fmap: np.ndarray,
    skeleton: SkeletonSpec,
    sc: SearchConfig,
    g: GaussianParams | None = None,
):
    """Refine every low-confidence terminal keypoint of one sample.

    ``models`` maps group index to a verification network (or to a
    :class:`~poseloop.training.GroupModels`). Returns ``(keypoints,
    refinements)`` in heatmap coordinates; base keypoints and terminals at or
    above the confidence gate pass through unchanged.
    """
    g = g or GaussianParams()
    for gi in range(len(skeleton.groups)):
        if gi not in models or models[gi] is None:
            raise MissingModelError(f"no verification model for group '{skeleton.groups[gi].name}'")

    keypoints = [decode_subpixel(obs_heatmaps[k]) for k in range(skeleton.num_keypoints)]
    refinements = []
    for gi, group in enumerate(skeleton.groups):
        term = keypoints[group.terminal]
        if term.confidence >= sc.confidence_gate:
            continue
        gamma = models[gi]
        if hasattr(gamma, "gamma"):
            gamma = gamma.gamma
        h_a = obs_heatmaps[group.a]
        if sc.rerender_anchor:
            anchor = decode_subpixel(h_a)
            h_a = encode_keypoint((anchor.x, anchor.y), g, (h_a.shape[1], h_a.shape[0]))
        refined, trace = refine_terminal(
            gamma, h_a, obs_heatmaps[group.b], obs_heatmaps[group.c], fmap, term, sc, g
        )
        conf = value_at(obs_heatmaps[group.terminal], refined.x, refined.y)
        keypoints[group.terminal] = Keypoint(refined.x, refined.y, conf, term.visibility)
        refinements.append(
            GroupRefinement(
                group=group.name,
                init_xy=(term.x, term.y),
                refined_xy=(refined.x, refined.y),
                init_objective=trace.initial_objective,
                final_objective=trace.final_objective,
                evaluations=trace.evaluations,
                trace=trace,
            )
        )
    return keypoints, refinements


_POOL_STATE = {}


def _refine_job(index: int):
    models, dataset, skeleton, sc, g = _POOL_STATE["state"]
    kps, refs = refine_pose(
        models, dataset.obs[index], dataset.features[index], skeleton, sc, g
    )
    plain = [decode_subpixel(dataset.obs[index][k]) for k in range(skeleton.num_keypoints)]
    return index, kps, plain, refs


def refine_dataset(
    models: dict,
    dataset,
    skeleton: SkeletonSpec,
    sc: SearchConfig,
    g: GaussianParams | None = None,
    indices=None,
    workers: int = 1,
):
    """Refine a set of samples; returns ordered (index, refined, unrefined,
    refinements) tuples. Sample refinements are independent, so worker count
    does not affect the results."""
    g = g or GaussianParams()
    indices = list(dataset.val_indices if indices is None else indices)
    if workers > 1 and len(indices) > 1:
        import multiprocessing

        _POOL_STATE["state"] = (models, dataset, skeleton, sc, g)
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            results = pool.map(_refine_job, indices)
        _POOL_STATE.clear()
        return results
    _POOL_STATE["state"] = (models, dataset, skeleton, sc, g)
    try:
        return [_refine_job(i) for i in indices]
    finally:
        _POOL_STATE.clear()


def grid_search_disc(obj_fn, init_xy, delta: float, bounds_wh, grid_step: float = 0.25):
    """Exhaustive minimum of an objective over the delta-disc (test oracle)."""
    w, h = bounds_wh
    best = (init_xy[0], init_xy[1])
    best_obj = obj_fn(best)
    steps = int(round(delta / grid_step))
    for iy in range(-steps, steps + 1):
        for ix in range(-steps, steps + 1):
            dx, dy = ix * grid_step, iy * grid_step
            if dx * dx + dy * dy > delta * delta + 1e-12:
                continue
            x = init_xy[0] + dx
            y = init_xy[1] + dy
            if not (0.0 <= x <= w - 1.0 and 0.0 <= y <= h - 1.0):
                continue
            val = obj_fn((x, y))
            if val < best_obj:
                best = (x, y)
                best_obj = val
    return best, best_obj
