"""Training loop: Adam with warmup and cosine decay, augmentation, checkpoints and gradient probes.

Randomness is keyed, never sequential: the epoch permutation uses
``(seed, epoch)``, augmentation of a sample ``(seed, epoch, index)``, and the
noise of a batch ``(seed, epoch, batch)``. A run is therefore a pure
function of its config and data.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .diffusion import Preconditioner, sample_noise_level
from .layout import FeatureLayout, NormStats, expected_magnitude, fit_stats, normalize
from .losses import LossConfig, LossMode, compute_loss
from .netcore import DiffusionModel, NetConfig, save_checkpoint
from .synthmotion import MotionBatch, augment_batch

log = logging.getLogger(__name__)


class NonFiniteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "Final"
    epochs: int = 200
    batch_size: int = 64
    max_lr: float = 1e-2
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    norm_scheme: str | None = None  # None: "baseline" for Baseline mode, else "structured"
    sigma_data: float | None = None  # None: measured on the normalized training split
    P_mean: float = -1.2
    P_std: float = 1.2
    c_noise_scale: float = 0.25
    augment: bool = True
    keep_last: int = 10
    probe_epochs: list = field(default_factory=list)
    probe_t: list = field(default_factory=lambda: np.exp(np.linspace(np.log(0.01), np.log(20.0), 16)).tolist())
    probe_samples: int = 256
    probe_batch: int = 32
    u_grid: list = field(default_factory=lambda: np.exp(np.linspace(np.log(0.005), np.log(80.0), 40)).tolist())
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        LossMode(self.mode)
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(LossMode(self.mode))

    @property
    def scheme(self) -> str:
        if self.norm_scheme is not None:
            return self.norm_scheme
        return "baseline" if LossMode(self.mode) is LossMode.BASELINE else "structured"

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warmup from 0, then cosine decay reaching exactly 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return max_lr * step / warmup_steps
    p = (step - warmup_steps) / (total_steps - warmup_steps)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * p))


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.95, eps=1e-8):
        self.names, self.params = zip(*named_params) if named_params else ((), ())
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        bad = [n for n, p in zip(self.names, self.params) if p.grad is not None and not torch.all(torch.isfinite(p.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradient in {', '.join(bad[:5])}" + (" ..." if len(bad) > 5 else ""))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        with torch.no_grad():
            for p, m, v in zip(self.params, self.m, self.v):
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"step": self.t, "m": list(self.m), "v": list(self.v)}

    def load_state(self, state: dict) -> None:
        self.t = int(state["step"])
        self.m = [torch.as_tensor(a, dtype=p.dtype).clone() for a, p in zip(state["m"], self.params)]
        self.v = [torch.as_tensor(a, dtype=p.dtype).clone() for a, p in zip(state["v"], self.params)]


def build_model(cfg: TrainConfig, layout: FeatureLayout, sigma_data: float) -> DiffusionModel:
    lc = cfg.loss
    pre = Preconditioner(sigma_data, cfg.P_mean, cfg.P_std, cfg.c_noise_scale)
    return DiffusionModel(layout, lc.n_heads(layout), lc.uses_group_weights, cfg.net, pre, seed=cfg.seed).float()


def _batch_tensors(frames, valid_len, stats, dtype=torch.float32):
    mask = (np.arange(frames.shape[1])[None] < np.asarray(valid_len)[:, None]).astype(np.float64)
    return torch.as_tensor(normalize(frames, stats, mask), dtype=dtype)


def _draw_noise(rng, B, L, N, valid_len, cfg, dtype=torch.float32):
    t = sample_noise_level(rng, cfg.P_mean, cfg.P_std, B)
    eps = rng.standard_normal((B, L, N))
    eps *= (np.arange(L)[None] < np.asarray(valid_len)[:, None])[..., None]
    return torch.as_tensor(t, dtype=dtype), torch.as_tensor(eps, dtype=dtype)


@dataclass
class TrainResult:
    model: DiffusionModel
    stats: NormStats
    history: list
    u_curves: list
    probes: list
    checkpoints: list


def train(cfg: TrainConfig, data: MotionBatch, layout: FeatureLayout, out_dir: str | None = None,
          val: MotionBatch | None = None, stats: NormStats | None = None) -> TrainResult:
    """Train one configuration; writes CSV logs and checkpoints into ``out_dir`` if given."""
    mode = LossMode(cfg.mode)
    stats = stats or fit_stats(data, layout, cfg.scheme)
    sigma = cfg.sigma_data
    if sigma is None:
        sigma = expected_magnitude(normalize(data.frames, stats, data.mask), data.mask)
    model = build_model(cfg, layout, float(sigma))
    opt = Adam(list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.adam_eps)

    n = len(data)
    B = min(cfg.batch_size, n)
    steps_per_epoch = n // B
    total = steps_per_epoch * cfg.epochs
    warm = steps_per_epoch * cfg.warmup_epochs
    L, N = data.frames.shape[1:]
    history, u_rows, probe_rows, ckpts = [], [], [], []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    probe_set = data.subset(np.arange(min(cfg.probe_samples, n)))
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
        sums = {"loss_theta": 0.0, "loss_psi": 0.0}
        gsq = torch.zeros(len(layout.groups), dtype=torch.float64)
        gcnt = torch.zeros(len(layout.groups), dtype=torch.float64)
        for bi in range(steps_per_epoch):
            idx = perm[bi * B:(bi + 1) * B]
            batch = data.subset(idx)
            if cfg.augment:
                batch = augment_batch(batch, layout, [np.random.default_rng([cfg.seed, epoch, int(i), 1]) for i in idx])
            x0 = _batch_tensors(batch.frames, batch.valid_len, stats)
            t, eps = _draw_noise(np.random.default_rng([cfg.seed, epoch, bi, 2]), len(idx), L, N, batch.valid_len, cfg)
            br = compute_loss(model, x0, batch.valid_len, t, eps, mode)
            if not torch.isfinite(br.total):
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "crash.gdkw"), model, stats, {"epoch": epoch, "step": step})
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            br.total.backward()
            lr = lr_schedule(step, total, warm, cfg.max_lr)
            opt.step(lr)
            step += 1
            sums["loss_theta"] += float(br.loss_theta.detach())
            sums["loss_psi"] += float(br.loss_psi.detach())
            gsq += br.group_sq.detach().double().sum(0)
            gcnt += br.group_count.double().sum(0)
        row = {"epoch": epoch + 1, "split": "train", "lr": lr_schedule(step, total, warm, cfg.max_lr)}
        row.update({k: v / max(steps_per_epoch, 1) for k, v in sums.items()})
        row.update({f"mse_{g}": float(v) for g, v in zip(layout.names, gsq / gcnt)})
        history.append(row)
        if val is not None:
            history.append(validation_row(model, val, stats, cfg, epoch + 1))
        log.info("epoch %d %s", epoch + 1, {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})

        last = epoch + 1
        if last in cfg.probe_epochs or last == cfg.epochs:
            for r in probe_gradient_norms(model, probe_set, stats, cfg.probe_t, mode,
                                              min(cfg.probe_batch, len(probe_set)), cfg.seed):
                probe_rows.append({"epoch": last, **r})
        if out_dir and last > cfg.epochs - cfg.keep_last:
            path = os.path.join(out_dir, f"ckpt_{last:04d}.gdkw")
            save_checkpoint(path, model, stats, {"epoch": last, "train_config": cfg.to_dict()}, opt.state())
            ckpts.append(path)

    u_rows = u_curve_rows(model, cfg.u_grid, cfg.epochs)
    if out_dir:
        write_csv(os.path.join(out_dir, "train_log.csv"), history)
        write_csv(os.path.join(out_dir, "u_curves.csv"), u_rows)
        write_csv(os.path.join(out_dir, "grad_probe.csv"), probe_rows)
        if cfg.epochs == 0:
            path = os.path.join(out_dir, "ckpt_0000.gdkw")
            save_checkpoint(path, model, stats, {"epoch": 0, "train_config": cfg.to_dict()}, opt.state())
            ckpts.append(path)
    return TrainResult(model, stats, history, u_rows, probe_rows, ckpts)


def validation_row(model, val: MotionBatch, stats: NormStats, cfg: TrainConfig, epoch: int) -> dict:
    """Losses on the validation split with noise fixed by ``cfg.seed`` (comparable across epochs)."""
    L, N = val.frames.shape[1:]
    rng = np.random.default_rng([cfg.seed, 10**6])
    x0 = _batch_tensors(val.frames, val.valid_len, stats)
    t, eps = _draw_noise(rng, len(val), L, N, val.valid_len, cfg)
    model.eval()
    with torch.no_grad():
        br = compute_loss(model, x0, val.valid_len, t, eps, cfg.mode)
    mse = br.group_mse()
    row = {"epoch": epoch, "split": "val", "lr": float("nan"),
           "loss_theta": float(br.loss_theta), "loss_psi": float(br.loss_psi)}
    row.update({f"mse_{g}": float(v) for g, v in zip(model.layout.names, mse)})
    return row


def u_curve_rows(model, t_grid, epoch: int) -> list:
    t = torch.as_tensor(np.asarray(t_grid), dtype=torch.float64)
    with torch.no_grad():
        u = model.u(t).double()
    names = model.layout.names if u.shape[1] == len(model.layout.groups) else ["all"]
    return [{"epoch": epoch, "t": float(ti), "head": names[k], "u": float(u[i, k]), "exp_u": float(torch.exp(u[i, k]))}
            for i, ti in enumerate(t) for k in range(u.shape[1])]


def probe_gradient_norms(model, data: MotionBatch, stats: NormStats, t_grid, mode, batch_size: int = 32,
                         seed: int = 0) -> list:
    """Average L2 norm of dLoss/dF at each noise level, overall and per group.

    Every probe batch of ``batch_size`` sequences shares one noise level.
    Baseline probes its joint loss, the other modes the denoiser loss.
    """
    mode = LossMode(mode)
    layout = model.layout
    L, N = data.frames.shape[1:]
    n = len(data)
    rows = []
    dtype = next(model.parameters()).dtype
    for ti, t in enumerate(t_grid):
        acc = np.zeros(len(layout.groups) + 1)
        nb = 0
        for bi, start in enumerate(range(0, n - batch_size + 1, batch_size)):
            batch = data.subset(np.arange(start, start + batch_size))
            x0 = _batch_tensors(batch.frames, batch.valid_len, stats, dtype)
            rng = np.random.default_rng([seed, 7, ti, bi])
            eps = rng.standard_normal((batch_size, L, N)) * batch.mask[..., None]
            tt = torch.full((batch_size,), float(t), dtype=dtype)
            br = compute_loss(model, x0, batch.valid_len, tt, torch.as_tensor(eps, dtype=dtype), mode, keep_raw=True)
            (g,) = torch.autograd.grad(br.loss_theta, br.F)
            g = g.detach().double()
            acc[0] += float(g.norm())
            for k, sl in enumerate(layout.slices()):
                acc[k + 1] += float(g[..., sl].norm())
            nb += 1
        if nb == 0:
            raise ValueError(f"need at least {batch_size} sequences to probe")
        acc /= nb
        rows.append({"t": float(t), "group": "all", "grad_norm": acc[0]})
        rows += [{"t": float(t), "group": name, "grad_norm": acc[k + 1]} for k, name in enumerate(layout.names)]
    model.zero_grad(set_to_none=True)
    return rows


def binned_group_loss(model, data: MotionBatch, stats: NormStats, t_grid, n_draws: int = 4, seed: int = 0,
                      augment: bool = True) -> np.ndarray:
    """Empirical per-group masked mean squared residual of the frozen denoiser at each t: (T, G)."""
    layout = model.layout
    L, N = data.frames.shape[1:]
    dtype = next(model.parameters()).dtype
    out = np.zeros((len(t_grid), len(layout.groups)))
    model.eval()
    with torch.no_grad():
        for ti, t in enumerate(t_grid):
            sq = np.zeros(len(layout.groups))
            cnt = np.zeros(len(layout.groups))
            for d in range(n_draws):
                batch = data
                if augment:
                    batch = augment_batch(data, layout, [np.random.default_rng([seed, 11, d, i]) for i in range(len(data))])
                x0 = _batch_tensors(batch.frames, batch.valid_len, stats, dtype)
                rng = np.random.default_rng([seed, 13, ti, d])
                eps = torch.as_tensor(rng.standard_normal((len(data), L, N)) * batch.mask[..., None], dtype=dtype)
                tt = torch.full((len(data),), float(t), dtype=dtype)
                br = compute_loss(model, x0, batch.valid_len, tt, eps, LossMode.PER_GROUP if len(model.u_heads) > 1
                                  else LossMode.GRAD_BALANCED)
                sq += br.group_sq.double().sum(0).numpy()
                cnt += br.group_count.double().sum(0).numpy()
            out[ti] = sq / cnt
    return out


def residual_table(model, data: MotionBatch, stats: NormStats, n_draws: int, seed: int = 0, batch_size: int = 64,
                   augment: bool = True, P_mean: float | None = None, P_std: float | None = None) -> dict:
    """Per-group squared residuals of the frozen denoiser for ``n_draws`` (sequence, t) draws.

    Sequences cycle through ``data``, noise levels are lognormal. Returns
    ``t`` (M,), ``S`` (M, G) sums over valid frames and ``n`` (M,) valid lengths.
    """
    layout = model.layout
    L, N = data.frames.shape[1:]
    dtype = next(model.parameters()).dtype
    P_mean = model.precond.P_mean if P_mean is None else P_mean
    P_std = model.precond.P_std if P_std is None else P_std
    mode = LossMode.PER_GROUP if len(model.u_heads) > 1 else LossMode.GRAD_BALANCED
    if model.use_group_weights:
        mode = LossMode.FINAL
    ts, Ss, ns = [], [], []
    model.eval()
    with torch.no_grad():
        for bi, start in enumerate(range(0, n_draws, batch_size)):
            rng = np.random.default_rng([seed, 17, bi])
            idx = np.arange(start, min(start + batch_size, n_draws)) % len(data)
            batch = data.subset(idx)
            if augment:
                batch = augment_batch(batch, layout, [np.random.default_rng([seed, 19, bi, i]) for i in range(len(idx))])
            x0 = _batch_tensors(batch.frames, batch.valid_len, stats, dtype)
            t = np.exp(P_mean + P_std * rng.standard_normal(len(idx)))
            eps = rng.standard_normal((len(idx), L, N)) * batch.mask[..., None]
            br = compute_loss(model, x0, batch.valid_len, torch.as_tensor(t, dtype=dtype),
                              torch.as_tensor(eps, dtype=dtype), mode)
            ts.append(t)
            Ss.append(br.group_sq.double().numpy())
            ns.append(batch.valid_len.copy())
    return {"t": np.concatenate(ts), "S": np.concatenate(Ss), "n": np.concatenate(ns)}


def fit_uncertainty_heads(model, table: dict, steps: int = 3000, lr: float = 1e-2, batch_size: int = 4096,
                          seed: int = 0) -> float:
    """Fit only the uncertainty heads to a frozen residual table; returns the last head loss.

    With one head the residuals are pooled over groups, otherwise each head
    sees its own group, matching the head objective of the balanced modes.
    """
    layout = model.layout
    dims = torch.as_tensor(layout.dims, dtype=torch.float64)
    t_all = torch.as_tensor(table["t"], dtype=torch.float64)
    S_all = torch.as_tensor(table["S"], dtype=torch.float64)
    n_all = torch.as_tensor(table["n"], dtype=torch.float64)
    if len(model.u_heads) == 1:
        S_all, dims = S_all.sum(1, keepdim=True), dims.sum().reshape(1)
    heads = [(f"u_heads.{k}.{n}", p) for k, h in enumerate(model.u_heads) for n, p in h.named_parameters()]
    dtype = heads[0][1].dtype
    opt = Adam(heads)
    rng = np.random.default_rng([seed, 23])
    M = len(t_all)
    last = float("nan")
    for step in range(steps):
        idx = torch.as_tensor(rng.integers(0, M, min(batch_size, M)))
        t, S, n = t_all[idx], S_all[idx], n_all[idx]
        u = model.u(t.to(dtype)).double()
        loss = (S / torch.exp(u) + u * n[:, None] * dims).sum() / (n.sum() * dims.sum())
        opt.zero_grad()
        loss.backward()
        opt.step(lr * 0.5 * (1 + math.cos(math.pi * step / steps)))
        last = float(loss.detach())
    return last


def binned_head_check(model, table: dict, edges) -> list:
    """Per t-bin and group: empirical mean squared residual against e^u averaged over the same draws.

    Both sides weight a draw by its valid length, as the head objective does.
    """
    layout = model.layout
    dims = np.asarray(layout.dims, dtype=np.float64)
    t, S, n = table["t"], table["S"], table["n"]
    if len(model.u_heads) == 1:
        S, dims, names = S.sum(1, keepdims=True), dims.sum(keepdims=True), ["all"]
    else:
        names = layout.names
    with torch.no_grad():
        eu = torch.exp(model.u(torch.as_tensor(t, dtype=next(model.parameters()).dtype))).double().numpy()
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (t >= lo) & (t < hi)
        if not sel.any():
            continue
        emp = S[sel].sum(0) / (n[sel].sum() * dims)
        pred = (eu[sel] * n[sel, None]).sum(0) / n[sel].sum()
        for k, name in enumerate(names):
            rows.append({"t_lo": float(lo), "t_hi": float(hi), "group": name, "count": int(sel.sum()),
                         "empirical": float(emp[k]), "exp_u": float(pred[k]), "ratio": float(pred[k] / emp[k])})
    return rows


def write_csv(path: str, rows: list) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
