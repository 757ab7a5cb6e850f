"""Sample-quality metrics: limb-length stability, foot skating, diversity and Frechet distance."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .layout import FeatureLayout, NormStats, normalize
from .synthmotion import MotionBatch, Skeleton, sequence_positions


@dataclass
class MetricsReport:
    frechet: float
    diversity: float
    foot_skating_pct: float
    limb_sigma_mm: float
    n_generated: int
    n_reference: int
    embedder_hash: str
    no_contact: bool = False
    h_thresh: float = 0.05
    v_thresh: float = 0.0025

    def __post_init__(self):
        for k in ("frechet", "diversity", "foot_skating_pct", "limb_sigma_mm"):
            if not np.isfinite(getattr(self, k)):
                raise ValueError(f"{k} is not finite")
        if not 0.0 <= self.foot_skating_pct <= 100.0:
            raise ValueError("foot_skating_pct outside [0, 100]")

    def to_dict(self) -> dict:
        return asdict(self)


def _positions(batch: MotionBatch, skeleton: Skeleton, layout: FeatureLayout):
    return [sequence_positions(batch.frames[i], int(batch.valid_len[i]), skeleton, layout) for i in range(len(batch))]


def limb_sigma_from_lengths(lengths) -> float:
    """Mean over limbs and sequences of the temporal std of each parent-child distance (input units)."""
    return float(np.mean([np.std(l, axis=0).mean() for l in lengths]))


def limb_lengths(pos: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """(T, K-1) parent-child distances, skipping the root."""
    child = [j for j, p in enumerate(skeleton.parents) if j != p]
    parent = [skeleton.parents[j] for j in child]
    return np.linalg.norm(pos[:, child] - pos[:, parent], axis=-1)


def limb_sigma(batch: MotionBatch, skeleton: Skeleton, layout: FeatureLayout) -> float:
    """Limb-length standard deviation in millimetres."""
    lengths = [limb_lengths(p, skeleton) for p in _positions(batch, skeleton, layout)]
    return 1000.0 * limb_sigma_from_lengths(lengths)


def foot_skating_from_feet(feet, h_thresh: float = 0.05, v_thresh: float = 0.0025) -> tuple[float, bool]:
    """Percentage of contact frames whose foot moves horizontally more than ``v_thresh`` to the next frame.

    ``feet`` is a list of (T, F, 3) foot trajectories with z up. A frame is in
    contact when its height is below ``h_thresh``; the last frame of each
    sequence has no successor and is not counted. Returns (percent, no_contact).
    """
    contacts = skates = 0
    for f in feet:
        if f.shape[0] < 2:
            continue
        contact = f[:-1, :, 2] < h_thresh
        disp = np.linalg.norm(f[1:, :, :2] - f[:-1, :, :2], axis=-1)
        contacts += int(contact.sum())
        skates += int((contact & (disp > v_thresh)).sum())
    if contacts == 0:
        warnings.warn("no foot contact frames; foot skating reported as 0", RuntimeWarning, stacklevel=2)
        return 0.0, True
    return 100.0 * skates / contacts, False


def foot_skating(batch: MotionBatch, skeleton: Skeleton, layout: FeatureLayout,
                 h_thresh: float = 0.05, v_thresh: float = 0.0025) -> tuple[float, bool]:
    feet = [p[:, list(skeleton.foot_joints)] for p in _positions(batch, skeleton, layout)]
    return foot_skating_from_feet(feet, h_thresh, v_thresh)


def diversity(emb: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean distance between ``n_pairs`` disjoint random pairs of embeddings."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] < 2 * n_pairs:
        raise ValueError(f"need at least {2 * n_pairs} samples for {n_pairs} disjoint pairs, got {emb.shape[0]}")
    idx = np.random.default_rng(seed).permutation(emb.shape[0])[: 2 * n_pairs]
    a, b = emb[idx[:n_pairs]], emb[idx[n_pairs:]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def _sqrtm_psd(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu1, s1, mu2, s2) -> float:
    """|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    tr (S1 S2)^(1/2) is evaluated as tr (S1^(1/2) S2 S1^(1/2))^(1/2), which only
    needs symmetric eigendecompositions.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * np.trace(cross))
    return max(d2, 0.0)


def fit_gaussian(emb: np.ndarray):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] < emb.shape[1] + 1:
        raise ValueError(f"need more than {emb.shape[1]} samples to fit a {emb.shape[1]}-dim Gaussian")
    return emb.mean(0), np.cov(emb, rowvar=False).reshape(emb.shape[1], emb.shape[1])


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    return frechet_from_moments(*fit_gaussian(emb_a), *fit_gaussian(emb_b))


def sequence_features(batch: MotionBatch, stats: NormStats) -> np.ndarray:
    """Per-group temporal mean and std of normalized features over valid frames."""
    layout = stats.layout
    xn = normalize(batch.frames, stats, batch.mask)
    rows = []
    for i, n in enumerate(batch.valid_len):
        v = xn[i, : int(n)]
        rows.append(np.concatenate([np.concatenate([v[:, s].mean(0), v[:, s].std(0)]) for s in layout.slices()]))
    return np.stack(rows)


@dataclass
class Embedder:
    """Frozen PCA projection of per-sequence summary features."""

    stats: NormStats
    mean: np.ndarray
    components: np.ndarray  # (dims, features)

    @property
    def dims(self) -> int:
        return self.components.shape[0]

    def __call__(self, batch: MotionBatch) -> np.ndarray:
        return (sequence_features(batch, self.stats) - self.mean) @ self.components.T

    def hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.mean, self.components):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(repr(sorted(self.stats.to_json().items())).encode())
        return h.hexdigest()[:16]


def build_embedder(train: MotionBatch, stats: NormStats, dims: int = 32) -> Embedder:
    feats = sequence_features(train, stats)
    mean = feats.mean(0)
    _, s, vt = np.linalg.svd(feats - mean, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if s.size else 0
    if rank < dims:
        warnings.warn(f"embedding features have rank {rank}; using {rank} dims instead of {dims}",
                      RuntimeWarning, stacklevel=2)
        dims = rank
    # fix the sign of each component for reproducibility
    comps = vt[:dims]
    comps = comps * np.where(comps[np.arange(dims), np.abs(comps).argmax(1)] < 0, -1.0, 1.0)[:, None]
    return Embedder(stats, mean, comps)


def evaluate(generated: MotionBatch, reference: MotionBatch, embedder: Embedder, skeleton: Skeleton,
             n_pairs: int = 300, seed: int = 0, h_thresh: float = 0.05, v_thresh: float = 0.0025) -> MetricsReport:
    layout = embedder.stats.layout
    eg, er = embedder(generated), embedder(reference)
    skate, none = foot_skating(generated, skeleton, layout, h_thresh, v_thresh)
    return MetricsReport(
        frechet=frechet_distance(eg, er),
        diversity=diversity(eg, min(n_pairs, len(generated) // 2), seed),
        foot_skating_pct=skate,
        limb_sigma_mm=limb_sigma(generated, skeleton, layout),
        n_generated=len(generated),
        n_reference=len(reference),
        embedder_hash=embedder.hash(),
        no_contact=none,
        h_thresh=h_thresh,
        v_thresh=v_thresh,
    )
