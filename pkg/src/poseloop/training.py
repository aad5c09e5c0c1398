"""Self-constrained learning: joint alternating training of the prediction
network (base heatmaps -> terminal heatmap) and the verification network
(terminal + mid heatmaps -> anchor heatmap).

Per epoch, one network trains while the other is frozen; the self-constraint
term backpropagates through the frozen partner's input-gradient path. The
first ``warmup_epochs`` train both networks independently on their direct
losses so alternation starts from meaningful partners.
"""

from __future__ import annotations

import csv
import enum
import math
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net as nnets
from .errors import ConfigError, EmptyDatasetError, ShapeError
from .net import AdamState, ArchConfig, ConvNetParams
from .skeleton import SkeletonSpec, StructuralGroup
from .synth import Dataset, ObservedSample

TILE = 4  # samples per GEMM tile; keeps im2col buffers cache-resident


class GroupMode(enum.Enum):
    PER_GROUP = "per-group"
    SHARED = "shared"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 210
    batch_size: int = 36
    lr: float = 0.001
    warmup_epochs: int = 5
    seed: int = 0
    group_mode: GroupMode = GroupMode.PER_GROUP

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}"
            )


@dataclass
class EpochLosses:
    """Mean losses of one (epoch, group); fields are None when the epoch's
    objective did not compute them."""

    epoch: int
    group: str
    lpo: float | None = None  # direct prediction loss
    lps: float | None = None  # self-constraint term of the prediction loss
    lp: float | None = None   # lpo + lps
    lv: float | None = None   # verification loss


@dataclass
class LossReport:
    rows: list[EpochLosses] = field(default_factory=list)

    def for_group(self, group: str) -> list[EpochLosses]:
        return [r for r in self.rows if r.group == group]

    def epoch_rows(self, epoch: int) -> list[EpochLosses]:
        return [r for r in self.rows if r.epoch == epoch]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "group", "loss_pred_direct", "loss_pred_self", "loss_pred", "loss_verify"])
            for r in self.rows:
                fmt = lambda v: "" if v is None else repr(float(v))
                w.writerow([r.epoch, r.group, fmt(r.lpo), fmt(r.lps), fmt(r.lp), fmt(r.lv)])

    @classmethod
    def from_csv(cls, path) -> "LossReport":
        rows = []
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            for raw in reader:
                vals = [None if s == "" else float(s) for s in raw[2:6]]
                rows.append(EpochLosses(int(raw[0]), raw[1], *vals))
        return cls(rows)


@dataclass
class GroupModels:
    """Trained prediction/verification pair for one structural group."""

    phi: ConvNetParams
    gamma: ConvNetParams
    adam_phi: AdamState
    adam_gamma: AdamState


def heatmap_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all pixels."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def _apply(network, x: np.ndarray) -> np.ndarray:
    """Run a network on a (C, H, W) stack; accepts params or a callable stub."""
    if isinstance(network, ConvNetParams):
        return nnets.forward(network, x)
    return network(x)


def _stack_single(slots, fmap) -> np.ndarray:
    return np.concatenate([np.asarray(s)[None] for s in slots] + [np.asarray(fmap)], axis=0)


def prediction_losses(phi, gamma_frozen, sample: ObservedSample, group: StructuralGroup):
    """(direct, self-constraint, combined) losses of the prediction network.

    The prediction net maps observed (A, B, C) heatmaps + features to the
    terminal heatmap; the frozen verification net maps (B, C, predicted D)
    back to the anchor, and both outputs are scored against ground truth.
    """
    obs, gt, f = sample.obs_heatmaps, sample.gt_heatmaps, sample.feature_map
    pred_d = _apply(phi, _stack_single((obs[group.a], obs[group.b], obs[group.c]), f))
    lpo = heatmap_loss(pred_d, gt[group.terminal])
    pred_a = _apply(gamma_frozen, _stack_single((obs[group.b], obs[group.c], pred_d), f))
    lps = heatmap_loss(pred_a, gt[group.a])
    return lpo, lps, lpo + lps


def verification_losses(gamma, phi_frozen, sample: ObservedSample, group: StructuralGroup):
    """Verification loss: anchor prediction error plus the forward replay of
    the predicted anchor through the frozen prediction network."""
    obs, gt, f = sample.obs_heatmaps, sample.gt_heatmaps, sample.feature_map
    pred_a = _apply(gamma, _stack_single((obs[group.b], obs[group.c], obs[group.terminal]), f))
    la = heatmap_loss(pred_a, gt[group.a])
    pred_d = _apply(phi_frozen, _stack_single((pred_a, obs[group.b], obs[group.c]), f))
    ld = heatmap_loss(pred_d, gt[group.terminal])
    return la + ld


# --- batched training loop ----------------------------------------------------


def _assemble(slots, feats) -> np.ndarray:
    """Channel-major network input: (3 + F, N, H', W') from (N, H', W') slots
    and (N, F, H', W') features."""
    n, h, w = slots[0].shape
    fch = feats.shape[1]
    x = np.empty((3 + fch, n, h, w), dtype=np.float32)
    for i, s in enumerate(slots):
        x[i] = s
    x[3:] = feats.transpose(1, 0, 2, 3)
    return x


def _mse_and_grad(pred: np.ndarray, target: np.ndarray, denom: int):
    """Mean-squared loss over the full batch and its gradient w.r.t. pred.

    ``denom`` is the full batch element count so that per-tile gradients
    accumulate to the exact batch gradient.
    """
    diff = pred - target
    loss = float(np.sum(diff.astype(np.float64) ** 2))
    grad = diff * (2.0 / denom)
    return loss, grad


class _GroupTrainer:
    """Trains one group's (phi, gamma) pair over a fixed dataset."""

    def __init__(self, dataset: Dataset, group: StructuralGroup, cfg: TrainConfig,
                 arch: ArchConfig, group_index: int):
        self.ds = dataset
        self.group = group
        self.cfg = cfg
        phi = nnets.init_params(arch, [cfg.seed, group_index, 0])
        gamma = nnets.init_params(arch, [cfg.seed, group_index, 1])
        self.models = GroupModels(
            phi=phi,
            gamma=gamma,
            adam_phi=nnets.init_adam(phi, lr=cfg.lr),
            adam_gamma=nnets.init_adam(gamma, lr=cfg.lr),
        )

    def _batch_arrays(self, idx):
        g = self.group
        obs = self.ds.obs[idx]
        gt = self.ds.gt[idx]
        feats = self.ds.features[idx]
        return {
            "a": obs[:, g.a], "b": obs[:, g.b], "c": obs[:, g.c], "d": obs[:, g.terminal],
            "gta": np.ascontiguousarray(gt[:, g.a]),
            "gtd": np.ascontiguousarray(gt[:, g.terminal]),
            "f": feats,
        }

    def _phi_step(self, arrs, with_self_constraint: bool):
        """One optimizer step on the prediction network; gamma frozen."""
        m = self.models
        n = arrs["a"].shape[0]
        npix = arrs["a"][0].size
        denom = n * npix
        total = nnets.zero_grads(m.phi)
        lpo_sum = 0.0
        lps_sum = 0.0
        for t0 in range(0, n, TILE):
            nnets.reset_workspace()
            sl = slice(t0, min(t0 + TILE, n))
            x_phi = _assemble((arrs["a"][sl], arrs["b"][sl], arrs["c"][sl]), arrs["f"][sl])
            out_phi, cache_phi = nnets.forward_batch(m.phi, x_phi, keep_cache=True)
            gtd = arrs["gtd"][sl][None]
            lpo, g_out = _mse_and_grad(out_phi, gtd, denom)
            lpo_sum += lpo
            if with_self_constraint:
                x_gam = _assemble((arrs["b"][sl], arrs["c"][sl], out_phi[0]), arrs["f"][sl])
                out_gam, cache_gam = nnets.forward_batch(m.gamma, x_gam, keep_cache=True)
                gta = arrs["gta"][sl][None]
                lps, g_self = _mse_and_grad(out_gam, gta, denom)
                lps_sum += lps
                din = nnets.input_grad_batch(m.gamma, cache_gam, g_self)
                g_out = g_out + din[2][None]  # D occupies slot 2 of gamma's input
            grads, _ = nnets.backward_batch(m.phi, x_phi, cache_phi, g_out,
                                            need_input_grads=False)
            nnets.accumulate_grads(total, grads)
        nnets.adam_step(m.phi, m.adam_phi, total)
        lpo_mean = lpo_sum / denom
        lps_mean = lps_sum / denom if with_self_constraint else None
        return lpo_mean, lps_mean

    def _gamma_step(self, arrs, with_self_constraint: bool):
        """One optimizer step on the verification network; phi frozen."""
        m = self.models
        n = arrs["a"].shape[0]
        npix = arrs["a"][0].size
        denom = n * npix
        total = nnets.zero_grads(m.gamma)
        loss_sum = 0.0
        for t0 in range(0, n, TILE):
            nnets.reset_workspace()
            sl = slice(t0, min(t0 + TILE, n))
            x_gam = _assemble((arrs["b"][sl], arrs["c"][sl], arrs["d"][sl]), arrs["f"][sl])
            out_gam, cache_gam = nnets.forward_batch(m.gamma, x_gam, keep_cache=True)
            gta = arrs["gta"][sl][None]
            la, g_out = _mse_and_grad(out_gam, gta, denom)
            loss_sum += la
            if with_self_constraint:
                x_phi = _assemble((out_gam[0], arrs["b"][sl], arrs["c"][sl]), arrs["f"][sl])
                out_phi, cache_phi = nnets.forward_batch(m.phi, x_phi, keep_cache=True)
                gtd = arrs["gtd"][sl][None]
                ld, g_d = _mse_and_grad(out_phi, gtd, denom)
                loss_sum += ld
                din = nnets.input_grad_batch(m.phi, cache_phi, g_d)
                g_out = g_out + din[0][None]  # predicted anchor occupies slot 0
            grads, _ = nnets.backward_batch(m.gamma, x_gam, cache_gam, g_out,
                                            need_input_grads=False)
            nnets.accumulate_grads(total, grads)
        nnets.adam_step(m.gamma, m.adam_gamma, total)
        return loss_sum / denom

    def run_epoch(self, epoch: int) -> EpochLosses:
        cfg = self.cfg
        train_idx = self.ds.train_indices
        order = np.random.default_rng([cfg.seed, 104729, epoch]).permutation(len(train_idx))
        idx = train_idx[order]
        bs = cfg.batch_size
        warmup = epoch <= cfg.warmup_epochs
        phi_epoch = warmup or (epoch - cfg.warmup_epochs - 1) % 2 == 0

        lpo_vals, lps_vals, lv_vals = [], [], []
        for b0 in range(0, len(idx), bs):
            arrs = self._batch_arrays(idx[b0 : b0 + bs])
            if warmup:
                lpo, _ = self._phi_step(arrs, with_self_constraint=False)
                la = self._gamma_step(arrs, with_self_constraint=False)
                lpo_vals.append(lpo)
                lv_vals.append(la)
            elif phi_epoch:
                lpo, lps = self._phi_step(arrs, with_self_constraint=True)
                lpo_vals.append(lpo)
                lps_vals.append(lps)
            else:
                lv_vals.append(self._gamma_step(arrs, with_self_constraint=True))

        row = EpochLosses(epoch, self.group.name)
        if lpo_vals:
            row.lpo = float(np.mean(lpo_vals))
        if lps_vals:
            row.lps = float(np.mean(lps_vals))
            row.lp = row.lpo + row.lps
        if lv_vals:
            row.lv = float(np.mean(lv_vals))
        return row


def _train_one_group(dataset, group, cfg, arch, group_index, progress=None):
    trainer = _GroupTrainer(dataset, group, cfg, arch, group_index)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        rows.append(trainer.run_epoch(epoch))
        if progress:
            progress(group.name, epoch, rows[-1])
    return trainer.models, rows


_JOB = {}


def _group_job(group_index: int):
    ds, skeleton, cfg, arch = _JOB["state"]
    models, rows = _train_one_group(ds, skeleton.groups[group_index], cfg, arch, group_index)
    return group_index, models, rows


def train(
    dataset: Dataset,
    skeleton: SkeletonSpec,
    cfg: TrainConfig,
    arch: ArchConfig | None = None,
    workers: int = 1,
    progress=None,
):
    """Train per-group (phi, gamma) pairs; returns ``(models, LossReport)``.

    ``models`` maps group index to :class:`GroupModels`. With
    ``GroupMode.SHARED`` a single pair is trained on every group's batches
    and shared across all group slots.
    """
    if dataset.n == 0 or len(dataset.train_indices) == 0:
        raise EmptyDatasetError("training requires a nonempty train split")
    fch = dataset.features.shape[1]
    arch = arch or ArchConfig(input_channels=3 + fch)
    if arch.input_channels != 3 + fch:
        raise ConfigError(
            f"architecture expects {arch.input_channels} channels, dataset provides {3 + fch}"
        )

    if cfg.group_mode is GroupMode.SHARED:
        return _train_shared(dataset, skeleton, cfg, arch, progress)

    n_groups = len(skeleton.groups)
    results = {}
    if workers > 1 and n_groups > 1:
        _JOB["state"] = (dataset, skeleton, cfg, arch)
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=min(workers, n_groups)) as pool:
            for gi, models, rows in pool.map(_group_job, range(n_groups)):
                results[gi] = (models, rows)
        _JOB.clear()
    else:
        for gi, group in enumerate(skeleton.groups):
            results[gi] = _train_one_group(dataset, group, cfg, arch, gi, progress)

    models = {gi: results[gi][0] for gi in range(n_groups)}
    report = LossReport()
    for epoch in range(1, cfg.epochs + 1):
        for gi in range(n_groups):
            report.rows.append(results[gi][1][epoch - 1])
    return models, report


def _train_shared(dataset, skeleton, cfg, arch, progress=None):
    """Shared-weights mode: one (phi, gamma) pair updated on all groups."""
    trainer = _GroupTrainer(dataset, skeleton.groups[0], cfg, arch, 0)
    report = LossReport()
    for epoch in range(1, cfg.epochs + 1):
        for group in skeleton.groups:
            trainer.group = group
            row = trainer.run_epoch(epoch)
            report.rows.append(row)
            if progress:
                progress(group.name, epoch, row)
    models = {gi: trainer.models for gi in range(len(skeleton.groups))}
    return models, report


# --- checkpoints ---------------------------------------------------------------


def save_models(models: dict, skeleton: SkeletonSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for gi, gm in models.items():
        name = skeleton.groups[gi].name
        nnets.save_checkpoint(gm.phi, gm.adam_phi, out / f"{name}.phi.ckpt")
        nnets.save_checkpoint(gm.gamma, gm.adam_gamma, out / f"{name}.gamma.ckpt")


def load_models(skeleton: SkeletonSpec, ckpt_dir) -> dict:
    root = Path(ckpt_dir)
    models = {}
    for gi, group in enumerate(skeleton.groups):
        phi, adam_phi = nnets.load_checkpoint(root / f"{group.name}.phi.ckpt")
        gamma, adam_gamma = nnets.load_checkpoint(root / f"{group.name}.gamma.ckpt")
        models[gi] = GroupModels(phi, gamma, adam_phi, adam_gamma)
    return models
