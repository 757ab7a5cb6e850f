"""Training losses, from the shared-uncertainty baseline to per-group balanced weighting.

All losses share one masked reduction. For each sample ``b`` with ``n_b``
valid frames and group ``k`` we form ``S[b, k]``, the sum of squared
residuals over valid frames of that group. With ``F = sum_b n_b`` valid
frames and ``N`` features per frame, every objective is a sum over samples
divided by ``F * N``, which is the masked mean over non-padded frames.

Modes (each cumulative on the previous one):

* ``Baseline``: one head, ``lam / e^u * S + u``, gradients reach both the
  denoiser and the head.
* ``GradBalanced``: the denoiser sees ``sqrt(lam) / sg(sqrt(e^u)) * S`` and a
  separate head objective ``sg(S) / e^u + u`` puts ``e^u`` at the mean loss.
* ``PerGroup``: one head per feature group.
* ``Final``: each group term additionally scaled by its dimensionality
  weight, and the network receives weighted inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .diffusion import denoise, perturb
from .layout import FeatureLayout


class LossMode(str, Enum):
    BASELINE = "Baseline"
    GRAD_BALANCED = "GradBalanced"
    PER_GROUP = "PerGroup"
    FINAL = "Final"

    @property
    def per_group(self) -> bool:
        return self in (LossMode.PER_GROUP, LossMode.FINAL)


@dataclass
class LossConfig:
    mode: LossMode = LossMode.FINAL
    uses_group_weights: bool | None = None

    def __post_init__(self):
        self.mode = LossMode(self.mode)
        if self.uses_group_weights is None:
            self.uses_group_weights = self.mode is LossMode.FINAL
        if self.mode is LossMode.FINAL and not self.uses_group_weights:
            raise ValueError("Final mode requires group weights")

    def n_heads(self, layout: FeatureLayout) -> int:
        return len(layout.groups) if self.mode.per_group else 1


@dataclass
class LossBreakdown:
    group_sq: torch.Tensor  # (B, G) per-sample per-group sums of squares
    group_count: torch.Tensor  # (B, G) valid element counts
    u: torch.Tensor  # (B, H)
    loss_theta: torch.Tensor
    loss_psi: torch.Tensor
    F: torch.Tensor | None = None  # raw network output, for gradient probes

    @property
    def total(self) -> torch.Tensor:
        """Scalar to backpropagate. Baseline is a single joint objective."""
        if self.loss_psi is self.loss_theta:
            return self.loss_theta
        return self.loss_theta + self.loss_psi

    def group_mse(self) -> torch.Tensor:
        """Masked mean squared residual per group over the whole batch."""
        return self.group_sq.detach().sum(0) / self.group_count.sum(0)


def masked_residuals(D, x0, valid_len, layout: FeatureLayout):
    """Per-sample, per-group sums of squared residuals over valid frames.

    Each sample is reduced over exactly its ``valid_len`` leading frames, so
    the result does not depend on how much padding follows (bitwise).
    Returns ``(S, count)``, both shaped (B, G).
    """
    if D.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(D.shape)} vs {tuple(x0.shape)}")
    n = [int(v) for v in valid_len]
    if sum(n) == 0:
        raise ValueError("all frames are masked")
    r2 = (D - x0) ** 2
    slices = layout.slices()
    rows = []
    for b, nb in enumerate(n):
        col = r2[b, :nb].sum(0)
        rows.append(torch.stack([col[sl].sum() for sl in slices]))
    S = torch.stack(rows)
    dims = torch.as_tensor(layout.dims, dtype=D.dtype)
    count = torch.as_tensor(n, dtype=D.dtype)[:, None] * dims
    return S, count


def loss_from_residuals(model, S, valid_len, t, mode: LossMode) -> tuple:
    """(loss_theta, loss_psi, u) from per-sample group sums; see module docstring."""
    mode = LossMode(mode)
    dtype = S.dtype
    layout = model.layout
    N = layout.N
    n = torch.as_tensor([int(v) for v in valid_len], dtype=dtype)
    FN = n.sum() * N
    c = model.precond.coeffs(t.to(dtype))
    lam = c.lam
    u = model.u(t).to(dtype)
    if mode is LossMode.BASELINE:
        u0 = u[:, 0]
        joint = (lam / torch.exp(u0) * S.sum(1) + u0 * n * N).sum() / FN
        return joint, joint, u
    if mode is LossMode.GRAD_BALANCED:
        u0 = u[:, 0]
        s = S.sum(1)
        theta = (torch.sqrt(lam) / torch.exp(0.5 * u0).detach() * s).sum() / FN
        psi = (s.detach() / torch.exp(u0) + u0 * n * N).sum() / FN
        return theta, psi, u
    if u.shape[1] != len(layout.groups):
        raise ValueError("per-group modes need one uncertainty head per group")
    w = model.group_w.to(dtype)
    dims = torch.as_tensor(layout.dims, dtype=dtype)
    theta = (torch.sqrt(lam)[:, None] * w / torch.exp(0.5 * u).detach() * S).sum() / FN
    psi = (S.detach() / torch.exp(u) + u * n[:, None] * dims).sum() / FN
    return theta, psi, u


def compute_loss(model, x0, valid_len, t, eps, mode: LossMode, keep_raw: bool = False) -> LossBreakdown:
    """Noise ``x0`` at per-sample levels ``t`` with ``eps``, denoise, and build the mode's losses.

    ``x0`` and ``eps`` are (B, L, N) normalized tensors; padding of ``x0``
    must be zero. ``keep_raw`` makes the network output a differentiable
    leaf-like handle for gradient probes.
    """
    mode = LossMode(mode)
    if mode is LossMode.FINAL and not model.use_group_weights:
        raise ValueError("Final mode requires a model built with group weights")
    if len(model.u_heads) != (len(model.layout.groups) if mode.per_group else 1):
        raise ValueError(f"model head count does not fit mode {mode.value}")
    L = x0.shape[1]
    vl = torch.as_tensor([int(v) for v in valid_len])
    mask = (torch.arange(L)[None, :] < vl[:, None]).to(x0.dtype)
    xt = perturb(x0, t, eps, mask)
    D, F = denoise(model, xt, t, mask, return_raw=True)
    S, count = masked_residuals(D, x0, valid_len, model.layout)
    theta, psi, u = loss_from_residuals(model, S, valid_len, t, mode)
    return LossBreakdown(S, count, u, theta, psi, F if keep_raw else None)
