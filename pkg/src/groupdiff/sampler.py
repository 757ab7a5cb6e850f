"""Karras noise-level schedules and deterministic Heun integration of the probability-flow ODE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import denoise
from .layout import NormStats, denormalize
from .synthmotion import MotionBatch

EPS_FLOOR = 1e-5


class NonFiniteStateError(RuntimeError):
    pass


@dataclass
class SigmaSchedule:
    levels: np.ndarray  # float64, strictly monotone
    n_steps: int
    rho: float
    t_min: float
    t_max: float
    terminal: float | None = None  # appended exact 0 (generation) or epsilon floor (likelihood)

    def __post_init__(self):
        d = np.diff(self.levels)
        if not (np.all(d < 0) or np.all(d > 0)):
            raise ValueError("schedule is not strictly monotone")

    @property
    def n_intervals(self) -> int:
        return len(self.levels) - 1

    def reversed(self) -> "SigmaSchedule":
        return SigmaSchedule(self.levels[::-1].copy(), self.n_steps, self.rho, self.t_min, self.t_max, self.terminal)

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "rho": self.rho, "t_min": self.t_min, "t_max": self.t_max,
                "terminal": self.terminal, "levels": [float(v) for v in self.levels]}


def build_schedule(n_steps: int, rho: float = 9.0, t_min: float = 0.02, t_max: float = 80.0,
                   terminal_zero: bool = True) -> SigmaSchedule:
    """t_i = (t_max^(1/rho) + i/(n-1) (t_min^(1/rho) - t_max^(1/rho)))^rho, optionally followed by 0."""
    if n_steps < 2 or not 0 < t_min < t_max or rho <= 0:
        raise ValueError("need n_steps >= 2, 0 < t_min < t_max and rho > 0")
    i = np.arange(n_steps, dtype=np.float64)
    a, b = t_max ** (1 / rho), t_min ** (1 / rho)
    t = (a + i / (n_steps - 1) * (b - a)) ** rho
    t[0], t[-1] = t_max, t_min
    if terminal_zero:
        t = np.append(t, 0.0)
    return SigmaSchedule(t, n_steps, rho, t_min, t_max, 0.0 if terminal_zero else None)


def likelihood_schedule(nfe: int, rho: float = 9.0, t_min: float = 0.02, t_max: float = 80.0,
                        eps: float = EPS_FLOOR) -> SigmaSchedule:
    """Noise-to-data levels whose Heun solve costs exactly ``nfe`` evaluations.

    ``nfe / 2`` Karras levels from ``t_max`` to ``t_min`` followed by the floor
    ``eps``; every interval, including the last one down to ``eps``, uses a
    full Heun step so no evaluation happens below ``eps``.
    """
    if nfe < 4 or nfe % 2:
        raise ValueError("likelihood NFE must be an even number >= 4")
    if not eps < t_min:
        raise ValueError("eps must lie below t_min")
    s = build_schedule(nfe // 2, rho, t_min, t_max, terminal_zero=False)
    return SigmaSchedule(np.append(s.levels, eps), s.n_steps, rho, t_min, t_max, eps)


class CountingDenoiser:
    """Wraps a denoiser ``D(x, t)`` and counts batched evaluations (NFE)."""

    def __init__(self, fn):
        self.fn = fn
        self.count = 0

    def __call__(self, x, t):
        self.count += 1
        return self.fn(x, t)


class ModelDenoiser:
    """Adapts a trained model to the ``D(x, t)`` interface for fixed-mask solves."""

    def __init__(self, model, mask):
        self.model = model
        self.mask = mask

    def __call__(self, x, t):
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        return denoise(self.model, x, t, self.mask)


def pf_ode_drift(denoiser, x, t, mask=None):
    """dx/dt = (x - D(x, t)) / t, zero on padded frames."""
    if not t > 0:
        raise ValueError("t must be positive")
    d = (x - denoiser(x, t)) / t
    if mask is not None:
        d = d * mask[..., None]
    return d


def _check_finite(x):
    if not torch.all(torch.isfinite(x)):
        raise NonFiniteStateError("non-finite state during ODE integration")


def heun_solve(denoiser, x, levels, mask=None, euler_last_to_zero: bool = True, trajectory: bool = False):
    """Integrate along ``levels`` (either direction) with Heun's method.

    Each interval takes an Euler predictor then a trapezoidal corrector. When
    the final level is exactly 0 and ``euler_last_to_zero`` is set, that last
    interval is a plain Euler step (the drift is undefined at 0).
    """
    levels = [float(v) for v in levels]
    traj = [x] if trajectory else None
    for i in range(len(levels) - 1):
        t0, t1 = levels[i], levels[i + 1]
        h = t1 - t0
        d0 = pf_ode_drift(denoiser, x, t0, mask)
        x_e = x + h * d0
        if t1 == 0.0:
            if not euler_last_to_zero:
                raise ValueError("cannot evaluate the drift at t = 0")
            x = x_e
        else:
            d1 = pf_ode_drift(denoiser, x_e, t1, mask)
            x = x + h * 0.5 * (d0 + d1)
        _check_finite(x)
        if trajectory:
            traj.append(x)
    return (x, traj) if trajectory else x


@dataclass
class GenerationResult:
    normalized: np.ndarray  # (B, L, N) float64
    batch: MotionBatch  # denormalized
    nfe: int
    schedule: dict = field(default_factory=dict)


def generate(model, count: int, length: int, seed: int, schedule: SigmaSchedule | None = None,
             stats: NormStats | None = None, batch_size: int = 250) -> GenerationResult:
    """Draw prior noise on ``length`` valid frames and solve to t = 0.

    The denoiser output lives in the unweighted normalized space, so there is
    no group weight to undo; denormalization with ``stats`` is the last step.
    """
    schedule = schedule or build_schedule(16)
    L = model.layout.L_max
    if not 1 <= length <= L:
        raise ValueError(f"length must be in [1, {L}]")
    N = model.layout.N
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(int(seed))
    outs, nfe = [], 0
    model.eval()
    with torch.no_grad():
        for start in range(0, count, batch_size):
            B = min(batch_size, count - start)
            mask = torch.zeros(B, L, dtype=dtype)
            mask[:, :length] = 1
            x = torch.randn(B, L, N, generator=g, dtype=torch.float64).to(dtype)
            x = x * float(schedule.levels[0]) * mask[..., None]
            den = CountingDenoiser(ModelDenoiser(model, mask))
            outs.append(heun_solve(den, x, schedule.levels, mask).double().numpy())
            nfe = den.count
    xn = np.concatenate(outs) if outs else np.zeros((0, L, N))
    valid = np.full(count, length, dtype=np.int64)
    frames = denormalize(xn, stats, (np.arange(L)[None] < valid[:, None])) if stats is not None else xn
    return GenerationResult(xn, MotionBatch(frames, valid), nfe, schedule.to_dict())
