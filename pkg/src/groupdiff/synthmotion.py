"""Procedural articulated-skeleton motion data.

Stands in for a mocap corpus: an 8-joint skeleton whose motions are
band-limited joint-angle sinusoids, knee swings and a piecewise-linear root
path with planted, stepping, walking and sliding segments. Every frame is the
concatenation ``[joint rotations (6D), global orientation (6D), translation,
shape]`` with the shape vector copied to each frame.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .layout import FeatureLayout, GroupSpec, MirrorMap, NormKind

MIN_LEN = 32
LEN_MULTIPLE = 16
# sign flips of a 6D block under reflection x -> -x (M R M with M = diag(-1, 1, 1))
MIRROR_6D_SIGN = (1.0, -1.0, -1.0, -1.0, 1.0, 1.0)


class DegenerateRotationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Skeleton


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray  # (K, 3) rest offsets to parent, meters
    foot_joints: tuple[int, ...]
    mirror_pairs: tuple[tuple[int, int], ...]
    # 1-based shape component that additionally scales each joint's offset; 0 = none
    shape_component: tuple[int, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        K = len(self.parents)
        if K < 2:
            raise ValueError("a skeleton needs at least two joints")
        if self.parents[0] != 0:
            raise ValueError("joint 0 must be the root")
        for j in range(1, K):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"joint {j} has parent {self.parents[j]}, parents must precede children")
        off = np.asarray(self.offsets, dtype=np.float64)
        if off.shape != (K, 3):
            raise ValueError("offsets must be (K, 3)")
        if np.any(np.linalg.norm(off[1:], axis=1) == 0):
            raise ValueError("non-root offsets must be non-zero")
        object.__setattr__(self, "offsets", off)

    @property
    def K(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return max(max(self.shape_component), 1)

    def joint_mirror_perm(self) -> list[int]:
        perm = list(range(self.K))
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
            "mirror_pairs": [list(p) for p in self.mirror_pairs],
            "shape_component": list(self.shape_component),
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            tuple(d["parents"]),
            np.asarray(d["offsets"], dtype=np.float64),
            tuple(d["foot_joints"]),
            tuple(tuple(p) for p in d["mirror_pairs"]),
            tuple(d["shape_component"]),
            tuple(d.get("names", ())),
        )


def default_skeleton() -> Skeleton:
    """Pelvis, spine, two 2-joint legs ending in feet, two arm joints on the spine.

    z is up, +x is the body's left. Legs are 0.9 m long so a straight leg under
    an upright pelvis at height 0.9 m puts the foot exactly on the ground.
    """
    names = ("pelvis", "spine", "l_knee", "l_foot", "r_knee", "r_foot", "l_arm", "r_arm")
    parents = (0, 0, 0, 2, 0, 4, 1, 1)
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.45],
            [0.1, 0.0, -0.45],
            [0.0, 0.0, -0.45],
            [-0.1, 0.0, -0.45],
            [0.0, 0.0, -0.45],
            [0.3, 0.0, 0.1],
            [-0.3, 0.0, 0.1],
        ]
    )
    # beta_1 scales everything, beta_2 legs, beta_3 arms, beta_4 spine
    shape_component = (0, 4, 2, 2, 2, 2, 3, 3)
    return Skeleton(parents, offsets, (3, 5), ((2, 4), (3, 5), (6, 7)), shape_component, names)


def shape_scales(skeleton: Skeleton, beta: np.ndarray) -> np.ndarray:
    """Per-joint offset scale (..., K) from shape (..., n_shape).

    Uniform factor (1 + 0.1 beta_1) times a per-limb factor (1 + 0.05 beta_c).
    """
    beta = np.asarray(beta, dtype=np.float64)
    s = 1.0 + 0.1 * beta[..., :1]
    comp = np.asarray(skeleton.shape_component)
    limb = np.where(comp > 0, 1.0 + 0.05 * np.take(beta, np.maximum(comp, 1) - 1, axis=-1), 1.0)
    return s * limb


def make_layout(skeleton: Skeleton, L_max: int = 64) -> FeatureLayout:
    n_rot = skeleton.K - 1
    jperm = skeleton.joint_mirror_perm()
    perm, sign = [], []
    for j in range(1, skeleton.K):
        src = jperm[j] - 1
        perm.extend(src * 6 + i for i in range(6))
        sign.extend(MIRROR_6D_SIGN)
    groups = (
        GroupSpec("joints", 6 * n_rot, NormKind.ROTATION_6D, MirrorMap(tuple(perm), tuple(sign))),
        GroupSpec("orient", 6, NormKind.ROTATION_6D, MirrorMap(tuple(range(6)), MIRROR_6D_SIGN)),
        GroupSpec("transl", 3, NormKind.ISOTROPIC, MirrorMap((0, 1, 2), (-1.0, 1.0, 1.0))),
        GroupSpec(
            "shape",
            skeleton.n_shape,
            NormKind.ELEMENTWISE,
            MirrorMap(tuple(range(skeleton.n_shape)), (1.0,) * skeleton.n_shape),
        ),
    )
    return FeatureLayout(groups, L_max)


# ---------------------------------------------------------------------------
# Rotations


def rot6d_to_matrix(v, eps: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt a 6D rotation (first two matrix columns) into a 3x3 rotation.

    Works on any leading shape (..., 6) -> (..., 3, 3).
    """
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= eps):
        raise DegenerateRotationError("zero first column in 6D rotation")
    a = a / na
    b = b - np.sum(a * b, axis=-1, keepdims=True) * a
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb <= eps):
        raise DegenerateRotationError("parallel or zero columns in 6D rotation")
    b = b / nb
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_residual(v) -> np.ndarray:
    """How far each 6D block is from two orthonormal columns (max abs deviation)."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    return np.max(
        np.abs(np.stack([np.sum(a * a, -1) - 1, np.sum(b * b, -1) - 1, np.sum(a * b, -1)], -1)), axis=-1
    )


def rot_z(angle) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Kinematics


def split_frame(frames: np.ndarray, layout: FeatureLayout) -> dict[str, np.ndarray]:
    return {g.name: frames[..., s] for g, s in zip(layout.groups, layout.slices())}


def forward_kinematics(frames, skeleton: Skeleton, layout: FeatureLayout, beta=None) -> np.ndarray:
    """Joint positions (..., K, 3) of raw (denormalized) frames (..., N).

    ``beta`` overrides the per-frame shape features, e.g. with a
    per-sequence average.
    """
    frames = np.asarray(frames, dtype=np.float64)
    parts = split_frame(frames, layout)
    lead = frames.shape[:-1]
    local = rot6d_to_matrix(parts["joints"].reshape(*lead, skeleton.K - 1, 6))
    root = rot6d_to_matrix(parts["orient"])
    scale = shape_scales(skeleton, parts["shape"] if beta is None else np.broadcast_to(beta, parts["shape"].shape))
    offsets = skeleton.offsets * scale[..., None]

    glob = [root]
    pos = [parts["transl"]]
    for j in range(1, skeleton.K):
        p = skeleton.parents[j]
        pos.append(pos[p] + np.einsum("...ij,...j->...i", glob[p], offsets[..., j, :]))
        glob.append(glob[p] @ local[..., j - 1, :, :])
    return np.stack(pos, axis=-2)


def sequence_positions(frames, valid_len: int, skeleton: Skeleton, layout: FeatureLayout) -> np.ndarray:
    """FK of one sequence's valid frames with the shape averaged over those frames."""
    f = np.asarray(frames, dtype=np.float64)[:valid_len]
    beta = f[:, layout.slice_of("shape")].mean(axis=0)
    return forward_kinematics(f, skeleton, layout, beta=beta)


# ---------------------------------------------------------------------------
# Samples and batches


@dataclass
class MotionSample:
    frames: np.ndarray  # (L_max, N)
    valid_len: int

    def __post_init__(self):
        if self.valid_len > self.frames.shape[0]:
            raise ValueError("valid_len exceeds frame count")
        if np.any(self.frames[self.valid_len :] != 0):
            raise ValueError("padded frames must be zero")

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.frames.shape[0]) < self.valid_len).astype(np.float64)


@dataclass
class MotionBatch:
    frames: np.ndarray  # (B, L, N)
    valid_len: np.ndarray  # (B,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64)
        if self.frames.ndim != 3 or self.frames.shape[0] != self.valid_len.shape[0]:
            raise ValueError("frames must be (B, L, N) with one valid_len per sample")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.frames.shape[1])[None, :] < self.valid_len[:, None]).astype(np.float64)

    def sample(self, i: int) -> MotionSample:
        return MotionSample(self.frames[i], int(self.valid_len[i]))

    def subset(self, idx) -> "MotionBatch":
        idx = np.asarray(idx)
        return MotionBatch(self.frames[idx], self.valid_len[idx])

    @classmethod
    def stack(cls, samples: list[MotionSample]) -> "MotionBatch":
        return cls(np.stack([s.frames for s in samples]), np.array([s.valid_len for s in samples]))


def crop_and_pad(raw: np.ndarray, L_max: int) -> MotionSample | None:
    """Crop to ``L_max`` (or down to a multiple of 16) and zero-pad; ``None`` drops the motion."""
    raw = np.asarray(raw)
    n = raw.shape[0]
    if n < 1:
        raise ValueError("empty motion")
    if L_max % LEN_MULTIPLE:
        raise ValueError(f"L_max must be divisible by {LEN_MULTIPLE}")
    if n < MIN_LEN:
        return None
    keep = L_max if n > L_max else (n // LEN_MULTIPLE) * LEN_MULTIPLE
    out = np.zeros((L_max, raw.shape[1]), dtype=raw.dtype)
    out[:keep] = raw[:keep]
    return MotionSample(out, keep)


# ---------------------------------------------------------------------------
# Augmentation


def augment_frames(frames, valid_len: int, layout: FeatureLayout, angle: float, mirror: bool) -> np.ndarray:
    """Rigid up-axis rotation of the whole motion, optionally preceded by left/right mirroring."""
    out = np.array(frames, dtype=np.float64, copy=True)
    n = int(valid_len)
    v = out[:n]
    if mirror:
        for g, s in zip(layout.groups, layout.slices()):
            if g.mirror_map is None:
                continue
            blk = v[:, s]
            v[:, s] = blk[:, list(g.mirror_map.perm)] * np.asarray(g.mirror_map.sign)
    if angle:
        R = rot_z(angle)
        so, st = layout.slice_of("orient"), layout.slice_of("transl")
        ori = v[:, so].reshape(n, 2, 3)
        v[:, so] = (ori @ R.T).reshape(n, 6)
        v[:, st] = v[:, st] @ R.T
    out[:n] = v
    out[n:] = 0.0
    return out.astype(np.asarray(frames).dtype)


def augment(sample: MotionSample, layout: FeatureLayout, rng: np.random.Generator) -> MotionSample:
    angle = rng.uniform(0.0, 2 * math.pi)
    mirror = bool(rng.random() < 0.5)
    return MotionSample(augment_frames(sample.frames, sample.valid_len, layout, angle, mirror), sample.valid_len)


def augment_batch(batch: MotionBatch, layout: FeatureLayout, rngs) -> MotionBatch:
    frames = np.stack([augment(batch.sample(i), layout, r).frames for i, r in enumerate(rngs)])
    return MotionBatch(frames, batch.valid_len.copy())


# ---------------------------------------------------------------------------
# Generation


@dataclass
class SynthConfig:
    n_joints: int = 8
    fps: float = 20.0
    L_max: int = 64
    min_raw_len: int = 24
    max_raw_len: int = 112
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def validate(self) -> None:
        if self.n_joints < 2:
            raise ValueError("need at least two joints")
        if self.n_joints != 8:
            raise ValueError("only the 8-joint default skeleton is available")
        if self.L_max % LEN_MULTIPLE or self.L_max < MIN_LEN:
            raise ValueError(f"L_max must be a multiple of {LEN_MULTIPLE} and >= {MIN_LEN}")
        if not 1 <= self.min_raw_len <= self.max_raw_len:
            raise ValueError("bad raw length range")
        if self.max_raw_len < MIN_LEN:
            raise ValueError("raw lengths never reach the minimum kept length")


SPLITS = {"train": 0, "val": 1, "test": 2}


def _band_limited(rng, T: int, amp: float, n_terms: int = 3) -> np.ndarray:
    t = np.arange(T)[:, None]
    out = np.zeros((T, 3))
    for _ in range(n_terms):
        a = rng.uniform(0.0, amp, size=3) / n_terms
        f = rng.uniform(0.005, 0.05, size=3)
        ph = rng.uniform(0.0, 2 * math.pi, size=3)
        out += a * np.sin(2 * math.pi * f * t + ph)
    return out


def _script(rng, T: int):
    """Root horizontal velocity (T, 2) in body coordinates and knee bends (T, 2)."""
    vel = np.zeros((T, 2))
    knees = np.zeros((T, 2))
    t = 0
    while t < T:
        kind = rng.choice(["stand", "step", "walk", "slide"], p=[0.2, 0.25, 0.4, 0.15])
        if kind in ("step", "walk"):
            S = int(rng.integers(8, 15))
            n = 2 * S * int(rng.integers(1, 3))
            peak = rng.uniform(1.0, 1.6)
            bump = peak * np.sin(math.pi * np.arange(S + 1) / S)
            foot = int(rng.integers(0, 2))
            for k in range(n // S):
                a = t + k * S
                seg = bump[: max(0, min(S + 1, T - a))]
                knees[a : a + len(seg), foot] = np.maximum(knees[a : a + len(seg), foot], seg)
                foot = 1 - foot
        else:
            n = int(rng.integers(12, 33))
        if kind in ("walk", "slide"):
            speed = rng.uniform(0.01, 0.03) if kind == "walk" else rng.uniform(0.005, 0.02)
            dev = rng.normal(0.0, 0.3)
            vel[t : t + n] = speed * np.array([-math.sin(dev), math.cos(dev)])
        t += n
    return vel, knees


def _synth_raw(rng, skeleton: Skeleton, T: int):
    """One raw motion (T, N) plus float64 ground-truth foot positions (T, n_feet, 3)."""
    beta = rng.normal(0.0, 1.0, size=skeleton.n_shape)
    scale = shape_scales(skeleton, beta)
    heading = rng.uniform(0.0, 2 * math.pi)
    R_root = rot_z(heading)

    vel_body, knees = _script(rng, T)
    vel = vel_body @ R_root[:2, :2].T
    xy = np.vstack([np.zeros((1, 2)), np.cumsum(vel[:-1], axis=0)])
    # pelvis height of a straight leg, i.e. FK pelvis height at frame 0
    leg = skeleton.offsets[2, 2] * scale[2] + skeleton.offsets[3, 2] * scale[3]
    transl = np.column_stack([xy, np.full(T, -leg)])

    rotvec = np.zeros((T, skeleton.K, 3))
    amps = {1: 0.15, 3: 0.3, 5: 0.3, 6: 0.6, 7: 0.6}
    for j, amp in amps.items():
        rotvec[:, j] = _band_limited(rng, T, amp)
    for side, j in enumerate((2, 4)):
        rotvec[:, j, 0] = -knees[:, side]
        rotvec[:, j, 2] = _band_limited(rng, T, 0.2)[:, 2]
    local = Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(T, skeleton.K, 3, 3)

    joints6d = matrix_to_rot6d(local[:, 1:]).reshape(T, -1)
    orient6d = np.broadcast_to(matrix_to_rot6d(R_root), (T, 6))
    frames = np.concatenate([joints6d, orient6d, transl, np.broadcast_to(beta, (T, len(beta)))], axis=1)

    # independent foot positions: pelvis -> knee -> foot with scipy matrices
    off = skeleton.offsets * scale[:, None]
    feet = []
    for knee, foot in ((2, 3), (4, 5)):
        p_knee = transl + off[knee] @ R_root.T
        p_foot = p_knee + np.einsum("ij,tjk,k->ti", R_root, local[:, knee], off[foot])
        feet.append(p_foot)
    return frames, np.stack(feet, axis=1)


def generate_split(cfg: SynthConfig, seed: int, split: str, count: int, skeleton: Skeleton | None = None) -> MotionBatch:
    """``count`` kept motions; sample ``i`` uses RNG stream (seed, split, attempt)."""
    cfg.validate()
    if count <= 0:
        raise ValueError("count must be positive")
    skeleton = skeleton or default_skeleton()
    samples, feet = [], []
    attempt = 0
    while len(samples) < count:
        rng = np.random.default_rng([seed, SPLITS[split], attempt])
        attempt += 1
        T = int(rng.integers(cfg.min_raw_len, cfg.max_raw_len + 1))
        if T < MIN_LEN:
            continue
        raw, foot_pos = _synth_raw(rng, skeleton, T)
        s = crop_and_pad(raw.astype(np.float32), cfg.L_max)
        if s is None:
            continue
        samples.append(s)
        feet.append(foot_pos[: s.valid_len])
    batch = MotionBatch.stack(samples)
    batch.meta["foot_positions"] = feet
    return batch


def generate_dataset(cfg: SynthConfig, seed: int) -> dict[str, MotionBatch]:
    cfg.validate()
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    if min(counts.values()) <= 0:
        raise ValueError("every split needs a positive count")
    return {k: generate_split(cfg, seed, k, n) for k, n in counts.items()}


# ---------------------------------------------------------------------------
# On-disk container

MAGIC = b"GDK1"
VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u4"), ("L_max", "<u4"), ("N", "<u4")])


def _record_dtype(L: int, N: int) -> np.dtype:
    return np.dtype([("valid_len", "<u4"), ("frames", "<f4", (L * N,))])


def save_dataset(path, batch: MotionBatch, layout: FeatureLayout, skeleton: Skeleton) -> None:
    os.makedirs(path, exist_ok=True)
    B, L, N = batch.frames.shape
    if N != layout.N:
        raise ValueError("batch does not match layout")
    with open(os.path.join(path, "layout.json"), "w") as f:
        json.dump(layout.to_dict(), f, indent=1)
    with open(os.path.join(path, "skeleton.json"), "w") as f:
        json.dump(skeleton.to_dict(), f, indent=1)
    head = np.array([(MAGIC, VERSION, B, L, N)], dtype=_HEADER)
    rec = np.empty(B, dtype=_record_dtype(L, N))
    rec["valid_len"] = batch.valid_len
    rec["frames"] = batch.frames.reshape(B, L * N).astype("<f4")
    with open(os.path.join(path, "data.bin"), "wb") as f:
        f.write(head.tobytes())
        f.write(rec.tobytes())


def load_dataset(path) -> tuple[MotionBatch, FeatureLayout, Skeleton]:
    with open(os.path.join(path, "layout.json")) as f:
        layout = FeatureLayout.from_dict(json.load(f))
    with open(os.path.join(path, "skeleton.json")) as f:
        skeleton = Skeleton.from_dict(json.load(f))
    raw = open(os.path.join(path, "data.bin"), "rb").read()
    head = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if head["magic"] != MAGIC:
        raise ValueError(f"{path} is not a GDK1 dataset")
    if head["version"] != VERSION:
        raise ValueError(f"unsupported dataset version {head['version']}")
    B, L, N = int(head["count"]), int(head["L_max"]), int(head["N"])
    rec = np.frombuffer(raw[_HEADER.itemsize :], dtype=_record_dtype(L, N), count=B)
    frames = rec["frames"].reshape(B, L, N).astype(np.float32)
    return MotionBatch(frames, rec["valid_len"].astype(np.int64)), layout, skeleton
