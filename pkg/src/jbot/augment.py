"""Jet augmentations (rotation, smearing, collinear splitting) and
momentum-aware particle masking.

All functions take a :class:`~jbot.jetdata.Jet` or a bare ``(n, 4)`` array
and return the same kind of object; inputs are never modified.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .jetdata import ETA, PHI, PT, VALID, Jet
from .rng import stream


@dataclass(frozen=True)
class AugmentConfig:
    lambda_qcd: float = 0.1  # GeV
    jet_pt_nominal: float = 1000.0  # GeV
    split_fraction_range: tuple = (0.25, 0.75)
    max_splits: int = 5
    rotate: bool = True
    smear: bool = True
    split: bool = True
    mask_ratio_max: float = 0.5

    def __post_init__(self):
        lo, hi = self.split_fraction_range
        if self.lambda_qcd <= 0 or self.jet_pt_nominal <= 0:
            raise ValueError("lambda_qcd and jet_pt_nominal must be positive")
        if not 0 < lo <= hi < 1:
            raise ValueError(f"split_fraction_range must lie inside (0, 1), got {self.split_fraction_range}")
        if self.max_splits < 0:
            raise ValueError("max_splits must be >= 0")
        if not 0 <= self.mask_ratio_max <= 0.5:
            raise ValueError("mask_ratio_max must be in [0, 0.5]")


@dataclass
class ViewPair:
    view_u: Jet
    view_v: Jet
    mask_u: np.ndarray
    mask_v: np.ndarray
    target_ratio_u: float
    target_ratio_v: float


def _unwrap(j):
    if isinstance(j, Jet):
        return j.particles, lambda x: Jet(x, j.label)
    return np.asarray(j, dtype=np.float64), lambda x: x


def rotate(j, angle):
    """Rigid rotation of every valid particle's (eta, phi) about the jet axis."""
    x, wrap = _unwrap(j)
    out = x.copy()
    c, s = np.cos(angle), np.sin(angle)
    eta, phi = x[:, ETA], x[:, PHI]
    out[:, ETA] = c * eta - s * phi
    out[:, PHI] = s * eta + c * phi
    out[x[:, VALID] <= 0.5, :] = 0.0
    return wrap(out)


def smear_std(pt_rel, cfg=AugmentConfig()):
    """Per-coordinate Gaussian width sqrt(Lambda_QCD / pT)."""
    return np.sqrt(cfg.lambda_qcd / (np.asarray(pt_rel) * cfg.jet_pt_nominal))


def smear(j, rng, cfg=AugmentConfig()):
    x, wrap = _unwrap(j)
    valid = x[:, VALID] > 0.5
    pt = x[valid, PT]
    if (pt <= 0).any():
        raise ValueError("smear: valid particle with pt_rel <= 0")
    out = x.copy()
    noise = rng.standard_normal((pt.shape[0], 2)) * smear_std(pt, cfg)[:, None]
    out[valid, ETA] += noise[:, 0]
    out[valid, PHI] += noise[:, 1]
    return wrap(out)


def split_particle(x, index, fraction):
    """Replace particle ``index`` by two collinear daughters carrying
    ``fraction`` and ``1 - fraction`` of its pt; the second daughter takes the
    first free slot. ``x`` is modified in place."""
    n_valid = int((x[:, VALID] > 0.5).sum())
    if n_valid >= x.shape[0]:
        raise ValueError("split_particle: no free slot")
    p = x[index, PT]
    p1 = fraction * p
    x[n_valid] = x[index]
    x[index, PT] = p1
    x[n_valid, PT] = p - p1
    return x


def collinear_split(j, rng, cfg=AugmentConfig()):
    """Up to ``cfg.max_splits`` pt-conserving collinear splits.

    The number of splits is uniform on ``0..min(max_splits, free slots)``;
    each split picks a particle with probability proportional to pt_rel.
    A full jet is returned unchanged.
    """
    x, wrap = _unwrap(j)
    n_valid = int((x[:, VALID] > 0.5).sum())
    if n_valid < 1:
        raise ValueError("collinear_split: jet has no valid particle")
    free = x.shape[0] - n_valid
    if free == 0:
        return wrap(x.copy())
    out = x.copy()
    n_split = int(rng.integers(0, min(cfg.max_splits, free) + 1))
    lo, hi = cfg.split_fraction_range
    for _ in range(n_split):
        pts = out[:n_valid, PT]
        cum = np.cumsum(pts)
        idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        idx = min(idx, n_valid - 1)
        split_particle(out, idx, rng.uniform(lo, hi))
        n_valid += 1
    return wrap(out)


def make_view(j, rng, cfg=AugmentConfig()):
    """rotate -> smear -> split, each enabled by ``cfg``."""
    v = j
    if cfg.rotate:
        v = rotate(v, rng.uniform(-np.pi, np.pi))
    if cfg.smear:
        v = smear(v, rng, cfg)
    if cfg.split:
        v = collinear_split(v, rng, cfg)
    if v is j:
        v = j.copy() if isinstance(j, Jet) else np.array(j, copy=True)
    return v


def momentum_aware_mask(j, target_ratio, rng):
    """Boolean mask over particle slots whose masked pt is close to
    ``target_ratio`` of the jet's valid pt.

    Valid particles are shuffled and accumulated until the running pt reaches
    the target; of the prefix just before and just after the crossing, the one
    closer to the target wins (ties go to the shorter prefix). For a positive
    target the empty prefix is never chosen.
    """
    if not 0.0 <= target_ratio <= 0.5:
        raise ValueError(f"target_ratio must be in [0, 0.5], got {target_ratio}")
    x, _ = _unwrap(j)
    mask = np.zeros(x.shape[0], dtype=bool)
    valid_idx = np.nonzero(x[:, VALID] > 0.5)[0]
    if valid_idx.shape[0] == 0:
        raise ValueError("momentum_aware_mask: jet has no valid particle")
    order = valid_idx[rng.permutation(valid_idx.shape[0])]
    pts = np.ascontiguousarray(x[order, PT], dtype=np.float64)
    target = float(target_ratio) * float(pts.sum())
    k = kernels.prefix_select(pts, target)
    mask[order[:k]] = True
    return mask


def make_view_pair(j, seed, epoch, index, cfg=AugmentConfig()):
    """Two independently augmented and masked views of one jet.

    Randomness comes from streams keyed by ``(seed, epoch, index, view)``.
    """
    views, masks, ratios = [], [], []
    for view in (0, 1):
        v = make_view(j, stream(seed, "augment", epoch, index, view), cfg)
        mrng = stream(seed, "masking", epoch, index, view)
        ratio = float(mrng.uniform(0.0, cfg.mask_ratio_max))
        views.append(v)
        masks.append(momentum_aware_mask(v, ratio, mrng))
        ratios.append(ratio)
    return ViewPair(views[0], views[1], masks[0], masks[1], ratios[0], ratios[1])


def batch_views(features, indices, epoch, seed, cfg=AugmentConfig()):
    """Views for a batch of jets.

    Returns ``(views, masks)`` with shapes ``(2B, n, 4)`` and ``(2B, n)``;
    rows ``0..B-1`` are the u views and ``B..2B-1`` the v views.
    """
    b, n, f = features.shape
    views = np.zeros((2 * b, n, f))
    masks = np.zeros((2 * b, n), dtype=bool)
    for row, (x, idx) in enumerate(zip(features, indices)):
        pair = make_view_pair(x, seed, epoch, idx, cfg)
        views[row], views[b + row] = pair.view_u, pair.view_v
        masks[row], masks[b + row] = pair.mask_u, pair.mask_v
    return views, masks
