"""Variance-exploding forward process, preconditioning and the Gaussian oracle.

Everything here is written against plain arithmetic so it accepts python
floats, numpy arrays and torch tensors alike. Per-sample noise levels of
shape (B,) broadcast against (B, L, N) data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch


@dataclass
class Preconditioner:
    sigma_data: float = 1.0
    P_mean: float = -1.2
    P_std: float = 1.2
    c_noise_scale: float = 0.25

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    def coeffs(self, t):
        return precondition_coeffs(t, self.sigma_data, self.c_noise_scale)


class Coeffs(NamedTuple):
    c_skip: object
    c_out: object
    c_in: object
    c_noise: object
    lam: object


def _log(t):
    return torch.log(t) if isinstance(t, torch.Tensor) else np.log(t)


def _check_positive(t, what="t"):
    if isinstance(t, torch.Tensor):
        ok = bool(torch.all(t > 0))
    else:
        ok = bool(np.all(np.asarray(t) > 0))
    if not ok:
        raise ValueError(f"{what} must be positive")


def bcast(t, x):
    """Reshape per-sample ``t`` (B,) so it broadcasts over x (B, ...)."""
    if isinstance(t, torch.Tensor) and t.ndim == 1 and x.ndim > 1:
        return t.reshape(-1, *([1] * (x.ndim - 1)))
    if isinstance(t, np.ndarray) and t.ndim == 1 and np.ndim(x) > 1:
        return t.reshape(-1, *([1] * (np.ndim(x) - 1)))
    return t


def precondition_coeffs(t, sigma_data: float = 1.0, c_noise_scale: float = 0.25) -> Coeffs:
    """Skip, output and input scalings, noise conditioning and loss weight for level ``t``.

    ``sigma_data`` is the expected magnitude of the clean normalized data; the
    same expressions standardize network inputs and effective targets
    whether or not the data is zero-mean.
    """
    _check_positive(t)
    s2 = sigma_data**2
    tot = s2 + t**2
    c_in = 1.0 / tot**0.5
    c_skip = s2 / tot
    c_out = t * sigma_data / tot**0.5
    lam = 1.0 / c_out**2
    c_noise = c_noise_scale * _log(t)
    return Coeffs(c_skip, c_out, c_in, c_noise, lam)


def perturb(x0, t, eps, mask=None):
    """x(t) = x(0) + t * eps, with noise only on valid frames."""
    if isinstance(t, torch.Tensor):
        if bool(torch.any(t < 0)):
            raise ValueError("t must be non-negative")
    elif np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    if mask is not None:
        eps = eps * mask[..., None]
    return x0 + bcast(t, x0) * eps


def sample_noise_level(rng: np.random.Generator, P_mean: float = -1.2, P_std: float = 1.2, size=None):
    """ln(t) ~ N(P_mean, P_std^2)."""
    if P_std < 0:
        raise ValueError("P_std must be non-negative")
    return np.exp(P_mean + P_std * rng.standard_normal(size))


def score_from_denoiser(D, x, t):
    _check_positive(t)
    return (D - x) / bcast(t, x) ** 2


def analytic_gaussian_denoiser(x, t, mu, var):
    """Posterior mean E[x(0) | x(t)] for data ~ N(mu, var * I)."""
    if not np.all(np.asarray(var) > 0):
        raise ValueError("var must be positive")
    tt = bcast(t, x) ** 2
    return (var * x + tt * mu) / (var + tt)


class GaussianOracle:
    """Exact denoiser of an isotropic Gaussian data distribution.

    Used wherever the learned denoiser is replaced by ground truth: sampler,
    likelihood and gradient-probe checks.
    """

    def __init__(self, mu=0.0, var=1.0):
        self.mu = mu
        self.var = var

    def __call__(self, x, t):
        mu = self.mu
        if isinstance(x, torch.Tensor) and not isinstance(mu, (float, int)):
            mu = torch.as_tensor(mu, dtype=x.dtype)
        return analytic_gaussian_denoiser(x, t, mu, self.var)

    def log_density(self, x, t=0.0):
        """log N(x; mu, (var + t^2) I) summed over all but the batch axis."""
        v = self.var + t**2
        d = x[0].numel() if isinstance(x, torch.Tensor) else np.size(x[0])
        sq = ((x - self.mu) ** 2).reshape(x.shape[0], -1).sum(-1)
        return -0.5 * sq / v - 0.5 * d * math.log(2 * math.pi * v)


def denoise(model, x, t, mask, return_raw: bool = False):
    """D(x, t) = c_skip x + c_out F(c_in * w * x, c_noise) in the unweighted target space.

    ``model`` supplies ``net``, ``precond`` and ``column_weights`` (per-column
    group weights, all ones unless dimensionality balancing is on). Padded frames of the
    result are zeroed. With ``return_raw`` the network output F is returned
    too, for gradient probes.
    """
    if x.shape[-1] != model.column_weights.shape[-1]:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.column_weights.shape[-1]}")
    c = model.precond.coeffs(t)
    c_skip, c_out, c_in = (bcast(v, x) for v in (c.c_skip, c.c_out, c.c_in))
    F = model.net(c_in * (x * model.column_weights.to(x.dtype)), c.c_noise, mask)
    D = (c_skip * x + c_out * F) * mask[..., None]
    return (D, F) if return_raw else D
