"""Grouped per-frame feature layout and structure-preserving normalization.

A frame is the concatenation of feature groups (joint rotations, global
orientation, translation, shape). Each group is standardized on its own so
that its expected magnitude (root mean square) is one:

* ``Rotation6D`` columns are unit vectors, so a fixed factor of sqrt(3)
  standardizes them without touching orthogonality.
* ``IsotropicZScore`` uses one scalar mean and std for all coordinates so
  3D space is not skewed.
* ``ElementwiseZScore`` standardizes every element independently.

The ``baseline`` scheme reproduces the common motion-feature normalization
(elementwise mean, one std per group equal to the mean elementwise std).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

SQRT3 = math.sqrt(3.0)


class NormKind(str, Enum):
    ROTATION_6D = "Rotation6D"
    ISOTROPIC = "IsotropicZScore"
    ELEMENTWISE = "ElementwiseZScore"
    BASELINE = "BaselineZScore"


class DegenerateStatsError(ValueError):
    """A group has zero variance and cannot be standardized."""


@dataclass(frozen=True)
class MirrorMap:
    """Within-group permutation plus sign flips: ``out[i] = sign[i] * x[perm[i]]``."""

    perm: tuple[int, ...]
    sign: tuple[float, ...]

    def __post_init__(self):
        if len(self.perm) != len(self.sign):
            raise ValueError("mirror perm and sign lengths differ")
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError("mirror perm is not a permutation")


@dataclass(frozen=True)
class GroupSpec:
    name: str
    dim: int
    kind: NormKind
    mirror_map: MirrorMap | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if self.dim <= 0:
            raise ValueError(f"group {self.name!r} has non-positive dim {self.dim}")
        if self.kind == NormKind.ROTATION_6D and self.dim % 6:
            raise ValueError(f"Rotation6D group {self.name!r} dim {self.dim} not divisible by 6")
        if self.mirror_map is not None and len(self.mirror_map.perm) != self.dim:
            raise ValueError(f"mirror map of {self.name!r} does not match dim")


@dataclass(frozen=True)
class FeatureLayout:
    groups: tuple[GroupSpec, ...]
    L_max: int = 64

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ValueError("layout needs at least one group")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate group names")

    @property
    def N(self) -> int:
        return sum(g.dim for g in self.groups)

    @property
    def dims(self) -> list[int]:
        return [g.dim for g in self.groups]

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for g in self.groups:
            out.append(acc)
            acc += g.dim
        return out

    def slices(self) -> list[slice]:
        return [slice(o, o + g.dim) for o, g in zip(self.offsets, self.groups)]

    def slice_of(self, name: str) -> slice:
        for g, s in zip(self.groups, self.slices()):
            if g.name == name:
                return s
        raise KeyError(name)

    def group_index(self) -> np.ndarray:
        """Group id of every column, shape (N,)."""
        return np.repeat(np.arange(len(self.groups)), self.dims)

    def to_dict(self) -> dict:
        return {
            "L_max": self.L_max,
            "groups": [
                {
                    "name": g.name,
                    "dim": g.dim,
                    "kind": g.kind.value,
                    "mirror_map": None
                    if g.mirror_map is None
                    else {"perm": list(g.mirror_map.perm), "sign": list(g.mirror_map.sign)},
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        groups = []
        for g in d["groups"]:
            mm = g.get("mirror_map")
            groups.append(
                GroupSpec(
                    g["name"],
                    int(g["dim"]),
                    NormKind(g["kind"]),
                    None if mm is None else MirrorMap(tuple(mm["perm"]), tuple(float(s) for s in mm["sign"])),
                )
            )
        return cls(tuple(groups), int(d["L_max"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def expected_magnitude(x: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Root mean square over all elements (valid frames only when ``mask`` is given)."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        return float(np.sqrt(np.mean(x**2)))
    m = np.asarray(mask, dtype=bool)
    return float(np.sqrt(np.mean(x[m] ** 2)))


# ---------------------------------------------------------------------------
# Normalization statistics


@dataclass
class GroupStats:
    kind: NormKind
    mean: np.ndarray  # (dim,) additive shift; zeros for rotations
    std: np.ndarray  # (dim,) denormalization scale, x = std * x_hat + mean

    @property
    def scale(self) -> float | None:
        return SQRT3 if self.kind == NormKind.ROTATION_6D else None


@dataclass
class NormStats:
    layout: FeatureLayout
    groups: dict[str, GroupStats] = field(default_factory=dict)
    scheme: str = "structured"

    def __post_init__(self):
        for g in self.layout.groups:
            st = self.groups[g.name]
            if np.any(~(st.std > 0)):
                raise DegenerateStatsError(f"group {g.name!r} has non-positive std")

    def column_mean(self) -> np.ndarray:
        return np.concatenate([self.groups[n].mean for n in self.layout.names])

    def column_std(self) -> np.ndarray:
        return np.concatenate([self.groups[n].std for n in self.layout.names])

    def to_json(self) -> dict:
        out = {"scheme": self.scheme, "layout_hash": self.layout.hash(), "groups": {}}
        for g in self.layout.groups:
            st = self.groups[g.name]
            if st.kind == NormKind.ROTATION_6D:
                out["groups"][g.name] = {"kind": st.kind.value, "mean": [], "std": [], "scale": SQRT3}
            else:
                out["groups"][g.name] = {
                    "kind": st.kind.value,
                    "mean": st.mean.tolist(),
                    "std": st.std.tolist(),
                    "scale": None,
                }
        return out

    @classmethod
    def from_json(cls, d: dict, layout: FeatureLayout) -> "NormStats":
        if d.get("layout_hash") not in (None, layout.hash()):
            raise ValueError("stats were fitted for a different layout")
        groups = {}
        for g in layout.groups:
            e = d["groups"][g.name]
            kind = NormKind(e["kind"])
            if kind == NormKind.ROTATION_6D:
                groups[g.name] = _rotation_stats(g.dim)
            else:
                groups[g.name] = GroupStats(kind, np.asarray(e["mean"], float), np.asarray(e["std"], float))
        return cls(layout, groups, d.get("scheme", "structured"))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path, layout: FeatureLayout) -> "NormStats":
        with open(path) as f:
            return cls.from_json(json.load(f), layout)


def _rotation_stats(dim: int) -> GroupStats:
    return GroupStats(NormKind.ROTATION_6D, np.zeros(dim), np.full(dim, 1.0 / SQRT3))


def _valid_rows(frames: np.ndarray, valid_len: np.ndarray) -> np.ndarray:
    return np.concatenate([f[:n] for f, n in zip(frames, valid_len)], axis=0)


def fit_stats(
    batches: Iterable | object,
    layout: FeatureLayout,
    scheme: str = "structured",
) -> NormStats:
    """Fit per-group statistics on valid frames only.

    ``batches`` is a MotionBatch (anything with ``frames`` and ``valid_len``)
    or an iterable of them. ``scheme="baseline"`` gives every group an
    elementwise mean and the mean elementwise std as a shared scale.
    """
    if hasattr(batches, "frames"):
        batches = [batches]
    rows = [_valid_rows(np.asarray(b.frames, np.float64), np.asarray(b.valid_len)) for b in batches]
    if not rows or sum(len(r) for r in rows) == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    data = np.concatenate(rows, axis=0)
    if data.shape[1] != layout.N:
        raise ValueError(f"data has {data.shape[1]} features, layout expects {layout.N}")
    if scheme not in ("structured", "baseline"):
        raise ValueError(f"unknown normalization scheme {scheme!r}")

    groups = {}
    for g, s in zip(layout.groups, layout.slices()):
        block = data[:, s]
        if scheme == "baseline":
            mu = block.mean(axis=0)
            sd = float(block.std(axis=0).mean())
            if not sd > 0:
                raise DegenerateStatsError(f"group {g.name!r} has zero variance")
            groups[g.name] = GroupStats(NormKind.BASELINE, mu, np.full(g.dim, sd))
        elif g.kind == NormKind.ROTATION_6D:
            groups[g.name] = _rotation_stats(g.dim)
        elif g.kind == NormKind.ISOTROPIC:
            mu = float(block.mean())
            sd = float(np.sqrt(np.mean((block - mu) ** 2)))
            if not sd > 0:
                raise DegenerateStatsError(f"group {g.name!r} has zero variance")
            groups[g.name] = GroupStats(g.kind, np.full(g.dim, mu), np.full(g.dim, sd))
        elif g.kind == NormKind.ELEMENTWISE:
            mu = block.mean(axis=0)
            sd = np.sqrt(np.mean((block - mu) ** 2, axis=0))
            bad = np.flatnonzero(~(sd > 0))
            if bad.size:
                raise DegenerateStatsError(f"group {g.name!r} has zero variance at elements {bad.tolist()}")
            groups[g.name] = GroupStats(g.kind, mu, sd)
        else:
            raise ValueError(f"group {g.name!r} has kind {g.kind} which cannot be fitted")
    return NormStats(layout, groups, scheme)


def _frame_mask(frames: np.ndarray, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=frames.dtype)
    if m.shape != frames.shape[:-1]:
        raise ValueError(f"mask shape {m.shape} does not match frames {frames.shape[:-1]}")
    return m[..., None]


def normalize(frames: np.ndarray, stats: NormStats, mask=None) -> np.ndarray:
    """Map raw frames (..., L, N) into the standardized feature space.

    Padded frames (``mask == 0``) stay exactly zero.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.layout.N:
        raise ValueError(f"frames have {frames.shape[-1]} features, layout expects {stats.layout.N}")
    out = (frames - stats.column_mean()) / stats.column_std()
    m = _frame_mask(frames, mask)
    return out if m is None else out * m


def denormalize(frames: np.ndarray, stats: NormStats, mask=None) -> np.ndarray:
    """Exact inverse of :func:`normalize`."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.layout.N:
        raise ValueError(f"frames have {frames.shape[-1]} features, layout expects {stats.layout.N}")
    out = frames * stats.column_std() + stats.column_mean()
    m = _frame_mask(frames, mask)
    return out if m is None else out * m


def group_weights(layout: FeatureLayout | Sequence[int]) -> np.ndarray:
    """Dimensionality-balancing weights: sqrt(sum(N^j) / G) / sqrt(N^k).

    Applied to standardized groups this keeps the concatenation standardized
    while giving every group the same total contribution.
    """
    dims = np.asarray(layout.dims if isinstance(layout, FeatureLayout) else list(layout), dtype=np.float64)
    if dims.size == 0:
        raise ValueError("need at least one group")
    return np.sqrt(dims.sum() / dims.size) / np.sqrt(dims)


def mp_concat_weights(n_a: int, n_b: int, alpha: float) -> tuple[float, float]:
    """Per-element factors of the two-way magnitude-preserving concatenation."""
    c = math.sqrt((n_a + n_b) / ((1 - alpha) ** 2 + alpha**2))
    return c * (1 - alpha) / math.sqrt(n_a), c * alpha / math.sqrt(n_b)


def column_weights(layout: FeatureLayout, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(layout.groups),):
        raise ValueError(f"got {w.size} weights for {len(layout.groups)} groups")
    return np.repeat(w, layout.dims)


def apply_group_weights(frames, layout: FeatureLayout, w):
    return frames * column_weights(layout, w)


def remove_group_weights(frames, layout: FeatureLayout, w):
    return frames / column_weights(layout, w)


def log_abs_det_normalization(stats: NormStats, valid_frames: int) -> float:
    """log|det| of the denormalization map over ``valid_frames`` frames, in nats."""
    return float(valid_frames) * float(np.sum(np.log(stats.column_std())))
