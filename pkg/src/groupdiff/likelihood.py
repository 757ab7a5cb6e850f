"""Exact log-likelihood through the probability-flow ODE, and round-trip errors.

The log density obeys d log p(x(t)) / dt = -div f(x(t), t) along the ODE, so
integrating from the data (at the floor ``eps``) to ``t_max`` while
accumulating the divergence gives

    -log p(x) = -log N(x(t_max); 0, t_max^2 I) - integral div f dt.

The divergence is estimated with Rademacher probes, v^T (df/dx) v, drawn once
per solve so the integrand is a smooth function of t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .layout import NormStats, log_abs_det_normalization
from .sampler import EPS_FLOOR, CountingDenoiser, NonFiniteStateError, SigmaSchedule, heun_solve, likelihood_schedule


@dataclass
class NLLConfig:
    n_probes: int = 16
    eps: float = EPS_FLOOR
    nfe: int = 128
    rho: float = 9.0
    t_min: float = 0.02
    t_max: float = 80.0
    seed: int = 0

    def __post_init__(self):
        if self.n_probes < 1:
            raise ValueError("need at least one probe")
        if not self.eps <= self.t_min:
            raise ValueError("eps must not exceed t_min")

    def schedule(self) -> SigmaSchedule:
        """Data-to-noise levels."""
        return likelihood_schedule(self.nfe, self.rho, self.t_min, self.t_max, self.eps).reversed()


def rademacher(shape, generator: torch.Generator, dtype=torch.float64):
    return torch.randint(0, 2, shape, generator=generator).to(dtype) * 2 - 1


def divergence_estimate(drift_fn, x, probes):
    """Mean over probes v of v^T (d drift / dx) v, per batch element.

    ``probes`` has shape (P, *x.shape). Returns (value at x, estimate (B,)).
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        f = drift_fn(x)
        if not f.requires_grad:  # drift does not depend on x
            return f.detach(), torch.zeros(x.shape[0], dtype=x.dtype)
        total = torch.zeros(x.shape[0], dtype=x.dtype)
        for p, v in enumerate(probes):
            (jv,) = torch.autograd.grad(f, x, v, retain_graph=p + 1 < len(probes))
            total = total + (jv * v).reshape(x.shape[0], -1).sum(-1)
    return f.detach(), total / len(probes)


def exact_divergence(drift_fn, x):
    """Trace of the full Jacobian; a test mode for small dimensions only."""
    B = x.shape[0]
    d = x[0].numel()
    if d > 64:
        raise ValueError("exact divergence is limited to d <= 64")
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        f = drift_fn(x).reshape(B, d)
        tr = torch.zeros(B, dtype=x.dtype)
        for i in range(d):
            (g,) = torch.autograd.grad(f[:, i].sum(), x, retain_graph=i + 1 < d)
            tr = tr + g.reshape(B, d)[:, i]
    return tr


@dataclass
class NLLResult:
    nll: np.ndarray  # total nats, normalized space
    nll_per_dim: np.ndarray
    nll_unnorm: np.ndarray | None
    nll_unnorm_per_dim: np.ndarray | None
    dims: np.ndarray  # valid_len * N
    nfe: int


def _prior_logp(x, t_max, d):
    sq = (x**2).reshape(x.shape[0], -1).sum(-1)
    return -0.5 * sq / t_max**2 - 0.5 * d * math.log(2 * math.pi * t_max**2)


def _mask_from(valid_len, L, dtype):
    vl = torch.as_tensor(np.asarray(valid_len))
    return (torch.arange(L)[None, :] < vl[:, None]).to(dtype)


def nll(denoiser, x0, valid_len, cfg: NLLConfig | None = None, stats: NormStats | None = None,
        sample_ids=None, n_features: int | None = None) -> NLLResult:
    """Negative log-likelihood of normalized sequences ``x0`` (B, L, N).

    ``denoiser(x, t)`` works on the whole padded batch. Only valid frames
    enter the dimensionality. With ``stats`` the unnormalized-space value is
    added (normalized NLL plus the log-determinant of denormalization).
    """
    cfg = cfg or NLLConfig()
    x0 = torch.as_tensor(x0)
    B, L, N = x0.shape
    dtype = x0.dtype
    mask = _mask_from(valid_len, L, dtype)
    vl = np.asarray(valid_len, dtype=np.int64)
    d = torch.as_tensor(vl * N, dtype=dtype)
    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    # one probe set per sample, fixed for the whole solve
    probes = torch.stack([
        rademacher((cfg.n_probes, L, N), torch.Generator().manual_seed(int(cfg.seed) * 1_000_003 + int(i)), dtype)
        for i in ids
    ], dim=1) * mask[None, :, :, None]

    counted = CountingDenoiser(denoiser)
    levels = [float(v) for v in cfg.schedule().levels]

    def aug_drift(x, t):
        def f(z):
            return (z - counted(z, t)) / t * mask[..., None]
        return divergence_estimate(f, x, probes)

    x = x0 * mask[..., None]
    logdet = torch.zeros(B, dtype=dtype)
    for i in range(len(levels) - 1):
        t0, t1 = levels[i], levels[i + 1]
        h = t1 - t0
        f0, div0 = aug_drift(x, t0)
        x_e = x + h * f0
        f1, div1 = aug_drift(x_e, t1)
        x = x + 0.5 * h * (f0 + f1)
        logdet = logdet + 0.5 * h * (div0 + div1)
        if not (torch.all(torch.isfinite(x)) and torch.all(torch.isfinite(logdet))):
            raise NonFiniteStateError("non-finite state during likelihood integration")
    logp = _prior_logp(x, cfg.t_max, d) + logdet
    total = (-logp).detach().numpy().astype(np.float64)
    dn = d.numpy().astype(np.float64)
    un = unpd = None
    if stats is not None:
        corr = np.array([log_abs_det_normalization(stats, int(n)) for n in vl])
        un = total + corr
        unpd = un / dn
    return NLLResult(total, total / dn, un, unpd, dn, counted.count)


def round_trip_error(denoiser, x0, valid_len, fwd: SigmaSchedule, bwd: SigmaSchedule) -> tuple[np.ndarray, int, int]:
    """Data to noise along ``fwd``, back along ``bwd``; per-sample MAE over valid elements.

    Both schedules run from noise to the floor ``eps`` (as built by
    ``likelihood_schedule``); ``fwd`` is traversed in reverse. Returns
    (mae per sample, forward NFE, backward NFE).
    """
    x0 = torch.as_tensor(x0)
    B, L, N = x0.shape
    mask = _mask_from(valid_len, L, x0.dtype)
    up = fwd.levels[::-1]
    if up[0] != bwd.levels[-1] or up[-1] != bwd.levels[0]:
        raise ValueError("forward and backward schedules must share their endpoints")
    cf, cb = CountingDenoiser(denoiser), CountingDenoiser(denoiser)
    with torch.no_grad():
        xT = heun_solve(cf, x0 * mask[..., None], up, mask, euler_last_to_zero=False)
        xr = heun_solve(cb, xT, bwd.levels, mask, euler_last_to_zero=False)
    err = ((xr - x0).abs() * mask[..., None]).reshape(B, -1).sum(-1)
    mae = err.numpy() / (np.asarray(valid_len, dtype=np.float64) * N)
    return mae, cf.count, cb.count
