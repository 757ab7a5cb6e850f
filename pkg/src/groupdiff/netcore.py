"""Masked 1D U-Net denoiser, noise-level uncertainty heads and the checkpoint format.

Sequences are (B, L, N) with a frame mask (B, L). Every convolution sees
zeros at padded frames, attention never attends to them and padded output
frames are zero, so garbage written into padding cannot reach valid
outputs or parameter gradients.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as Fn
from torch import nn

from .diffusion import Preconditioner
from .layout import FeatureLayout, NormStats, column_weights, group_weights

MAGIC = b"GDKW"
VERSION = 1


@dataclass
class NetConfig:
    channels: int = 64
    blocks_per_level: int = 2
    attention: bool = False
    time_freqs: int = 32
    time_scale: float = 1.0
    u_freqs: int = 64
    u_scale: float = 1.0
    u_hidden: int = 64
    u_gain_init: float = 1.0
    out_gain_init: float = 1.0
    linear_skip: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.channels < 1 or self.blocks_per_level < 1:
            raise ValueError("channels and blocks_per_level must be positive")


class FourierFeatures(nn.Module):
    """sqrt(2) cos(2 pi (f c + phi)) with fixed random frequencies and phases."""

    def __init__(self, n: int, scale: float, generator: torch.Generator):
        super().__init__()
        self.register_buffer("freqs", torch.randn(n, generator=generator, dtype=torch.float64) * scale)
        self.register_buffer("phases", torch.rand(n, generator=generator, dtype=torch.float64))

    def forward(self, c):
        c = torch.as_tensor(c, dtype=self.freqs.dtype).reshape(-1, 1)
        return math.sqrt(2.0) * torch.cos(2 * math.pi * (c * self.freqs + self.phases))


def _rms_norm(x, eps):
    # per position over channels; x is (B, C, L)
    return x / torch.sqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class ResBlock(nn.Module):
    def __init__(self, C: int, eps: float):
        super().__init__()
        self.conv1 = nn.Conv1d(C, C, 3, padding=1)
        self.conv2 = nn.Conv1d(C, C, 3, padding=1)
        self.emb = nn.Linear(C, C)
        self.eps = eps

    def forward(self, x, emb, m):
        h = self.conv1(Fn.silu(_rms_norm(x, self.eps)) * m)
        h = h + self.emb(emb)[:, :, None]
        h = self.conv2(Fn.silu(h) * m)
        return (x + h) * m


class MaskedAttention(nn.Module):
    def __init__(self, C: int, eps: float):
        super().__init__()
        self.qkv = nn.Conv1d(C, 3 * C, 1)
        self.proj = nn.Conv1d(C, C, 1)
        self.eps = eps

    def forward(self, x, m):
        q, k, v = self.qkv(_rms_norm(x, self.eps)).chunk(3, dim=1)
        scores = torch.einsum("bci,bcj->bij", q, k) / math.sqrt(q.shape[1])
        scores = scores.masked_fill(m < 0.5, float("-inf"))  # m is (B, 1, L): masks keys
        h = torch.einsum("bij,bcj->bci", torch.softmax(scores, dim=-1), v)
        return (x + self.proj(h)) * m


class DenoiserNet(nn.Module):
    """Two-level residual 1D U-Net with time conditioning; output shape equals input shape."""

    def __init__(self, n_features: int, cfg: NetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        C = cfg.channels
        g = torch.Generator().manual_seed(seed)
        self.time_fourier = FourierFeatures(cfg.time_freqs, cfg.time_scale, g)
        self.time_mlp = nn.Linear(cfg.time_freqs, C)
        self.in_proj = nn.Conv1d(n_features, C, 1)
        self.enc_hi = nn.ModuleList(ResBlock(C, cfg.norm_eps) for _ in range(cfg.blocks_per_level))
        self.down = nn.Conv1d(C, C, 3, stride=2, padding=1)
        self.enc_lo = nn.ModuleList(ResBlock(C, cfg.norm_eps) for _ in range(cfg.blocks_per_level))
        self.attn = MaskedAttention(C, cfg.norm_eps) if cfg.attention else None
        self.dec_lo = nn.ModuleList(ResBlock(C, cfg.norm_eps) for _ in range(cfg.blocks_per_level))
        self.merge = nn.Conv1d(2 * C, C, 1)
        self.dec_hi = nn.ModuleList(ResBlock(C, cfg.norm_eps) for _ in range(cfg.blocks_per_level))
        self.out_proj = nn.Conv1d(C, n_features, 1)
        # direct per-frame linear map from input to output features
        self.in_skip = nn.Conv1d(n_features, n_features, 1) if cfg.linear_skip else None
        self.skip_mod = nn.Linear(C, n_features) if cfg.linear_skip else None
        self.gain = nn.Parameter(torch.full((), float(cfg.out_gain_init)))
        init_weights(self, g)

    def forward(self, x, c_noise, mask):
        """x: (B, L, N) already scaled by c_in and group weights; c_noise: scalar or (B,)."""
        if x.ndim != 3 or x.shape[-1] != self.in_proj.in_channels:
            raise ValueError(f"expected (B, L, {self.in_proj.in_channels}) input, got {tuple(x.shape)}")
        if mask.shape != x.shape[:2]:
            raise ValueError("mask does not match input")
        B, L, _ = x.shape
        m = mask.to(x.dtype)[:, None, :]
        m_lo = m[:, :, ::2]
        c_noise = torch.as_tensor(c_noise, dtype=x.dtype).reshape(-1).expand(B)
        emb = Fn.silu(self.time_mlp(self.time_fourier(c_noise).to(x.dtype)))

        xc = x.transpose(1, 2) * m
        h = self.in_proj(xc) * m
        for blk in self.enc_hi:
            h = blk(h, emb, m)
        skip = h
        h = self.down(h * m) * m_lo
        for blk in self.enc_lo:
            h = blk(h, emb, m_lo)
        if self.attn is not None:
            h = self.attn(h, m_lo)
        for blk in self.dec_lo:
            h = blk(h, emb, m_lo)
        h = h.repeat_interleave(2, dim=2)[:, :, :L]
        h = self.merge(torch.cat([h, skip], dim=1) * m) * m
        for blk in self.dec_hi:
            h = blk(h, emb, m)
        out = self.out_proj(h)
        if self.in_skip is not None:
            out = out + self.in_skip(xc) * (1 + self.skip_mod(emb))[:, :, None]
        out = out * self.gain * m
        return out.transpose(1, 2)


class UncertaintyHead(nn.Module):
    """u(t): Fourier features of c_noise, one hidden layer, scalar output times a learnable gain."""

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or NetConfig()
        g = torch.Generator().manual_seed(seed)
        self.fourier = FourierFeatures(cfg.u_freqs, cfg.u_scale, g)
        self.hidden = nn.Linear(cfg.u_freqs, cfg.u_hidden)
        self.out = nn.Linear(cfg.u_hidden, 1)
        self.gain = nn.Parameter(torch.full((), float(cfg.u_gain_init)))
        init_weights(self, g)
        with torch.no_grad():
            self.out.weight.zero_()

    def forward(self, c_noise):
        dtype = self.hidden.weight.dtype
        h = Fn.silu(self.hidden(self.fourier(c_noise).to(dtype)))
        return self.out(h)[:, 0] * self.gain


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Weights ~ N(0, 1/fan_in), biases 0, in a fixed traversal order."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (nn.Conv1d, nn.Linear)):
                w = sub.weight
                fan_in = w[0].numel()
                w.copy_(torch.randn(w.shape, generator=generator, dtype=torch.float64) / math.sqrt(fan_in))
                if sub.bias is not None:
                    sub.bias.zero_()


class DiffusionModel(nn.Module):
    """Denoiser network plus uncertainty heads plus preconditioning and group weights."""

    def __init__(
        self,
        layout: FeatureLayout,
        n_heads: int,
        use_group_weights: bool,
        net_cfg: NetConfig | None = None,
        precond: Preconditioner | None = None,
        seed: int = 0,
    ):
        super().__init__()
        net_cfg = net_cfg or NetConfig()
        self.layout = layout
        self.net_cfg = net_cfg
        self.precond = precond or Preconditioner()
        self.use_group_weights = use_group_weights
        self.net = DenoiserNet(layout.N, net_cfg, seed=seed)
        self.u_heads = nn.ModuleList(UncertaintyHead(net_cfg, seed=seed * 1000 + 17 + k) for k in range(n_heads))
        w = group_weights(layout) if use_group_weights else np.ones(len(layout.groups))
        self.register_buffer("group_w", torch.as_tensor(w, dtype=torch.float64))
        self.register_buffer("column_weights", torch.as_tensor(column_weights(layout, w), dtype=torch.float64))

    def u(self, t):
        """Per-head log mean-loss estimate; returns (B, n_heads)."""
        t = torch.as_tensor(t)
        if bool(torch.any(t <= 0)):
            raise ValueError("t must be positive")
        c = self.precond.coeffs(t.to(torch.float64)).c_noise
        return torch.stack([h(c) for h in self.u_heads], dim=-1)

    def spec(self) -> dict:
        return {
            "layout": self.layout.to_dict(),
            "n_heads": len(self.u_heads),
            "use_group_weights": self.use_group_weights,
            "net": asdict(self.net_cfg),
            "precond": asdict(self.precond),
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "DiffusionModel":
        return cls(
            FeatureLayout.from_dict(spec["layout"]),
            spec["n_heads"],
            spec["use_group_weights"],
            NetConfig(**spec["net"]),
            Preconditioner(**spec["precond"]),
        )


def forward_checksum(model: nn.Module, x, t_noise, mask) -> str:
    with torch.no_grad():
        out = model(x, t_noise, mask)
    return hashlib.sha256(out.detach().cpu().numpy().astype(np.float64).tobytes()).hexdigest()


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: DiffusionModel, stats: NormStats | None, extra: dict | None = None,
                    optimizer_state: dict | None = None) -> str:
    """Write a GDKW checkpoint; returns the sha256 of the file contents."""
    state = model.state_dict()
    tensors = [(k, v.detach().cpu().numpy().astype("<f4")) for k, v in state.items()]
    opt_tensors = []
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"step": int(optimizer_state["step"]), "names": []}
        for name in ("m", "v"):
            for i, a in enumerate(optimizer_state[name]):
                opt_meta["names"].append(f"{name}.{i}")
                opt_tensors.append(np.asarray(a.detach().cpu() if torch.is_tensor(a) else a, dtype="<f4"))
    header = {
        "model": model.spec(),
        "layout_hash": model.layout.hash(),
        "stats": stats.to_json() if stats is not None else None,
        "tensors": [[k, list(a.shape)] for k, a in tensors],
        "optimizer": opt_meta,
        "opt_shapes": [list(a.shape) for a in opt_tensors],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb
    blob += b"".join(a.tobytes() for _, a in tensors) + b"".join(a.tobytes() for a in opt_tensors)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, dtype=torch.float32):
    """Returns (model, stats, extra, optimizer_state or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GDKW checkpoint")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(blob[16:16 + hlen])
    model = DiffusionModel.from_spec(header["model"])
    if model.layout.hash() != header["layout_hash"]:
        raise CheckpointError("layout hash mismatch")
    off = 16 + hlen

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        return torch.from_numpy(a.astype(np.float64))

    state = {k: take(shape) for k, shape in header["tensors"]}
    # group-weight buffers are stored as float32; restore them exactly from the layout
    state["group_w"], state["column_weights"] = model.group_w, model.column_weights
    model.load_state_dict(state)
    model.to(dtype)
    stats = NormStats.from_json(header["stats"], model.layout) if header["stats"] is not None else None
    opt = None
    if header["optimizer"] is not None:
        arrs = [take(s) for s in header["opt_shapes"]]
        half = len(arrs) // 2
        opt = {"step": header["optimizer"]["step"], "m": arrs[:half], "v": arrs[half:]}
    return model, stats, header["extra"], opt


def file_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
