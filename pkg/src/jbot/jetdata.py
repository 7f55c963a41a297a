"""Jet data model, .npy ingestion and a synthetic multi-prong jet generator.

A jet is a fixed-capacity ``(n_particles, 4)`` array with columns
``(eta_rel, phi_rel, pt_rel, valid)``. Datasets store all jets in one
``(num_jets, n_particles, 4)`` float64 array plus integer labels.

On-disk layout (one directory)::

    features.npy   (num_jets, n_particles, 4) float
    labels.npy     (num_jets,) integer class ids
    dataset.json   counts, class names, seed, file names
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import stream

CLASS_NAMES = ("q", "g", "W", "Z", "t")
N_PARTICLES = 30
D_FEAT = 4
ETA, PHI, PT, VALID = range(4)


class DatasetError(ValueError):
    """Malformed dataset content; ``jet_index`` points at the offending jet."""

    def __init__(self, message, jet_index=None):
        self.jet_index = jet_index
        if jet_index is not None:
            message = f"jet {jet_index}: {message}"
        super().__init__(message)


@dataclass
class Jet:
    particles: np.ndarray
    label: int = -1

    @property
    def valid(self):
        return self.particles[:, VALID] > 0.5

    @property
    def n_valid(self):
        return int(self.valid.sum())

    def copy(self):
        return Jet(self.particles.copy(), self.label)


def canonicalize(features):
    """Move valid particles before padded slots (stable) and zero the padding.

    Works on a single jet ``(n, 4)`` or a batch ``(m, n, 4)``; returns a copy.
    """
    x = np.array(features, dtype=np.float64, copy=True)
    single = x.ndim == 2
    if single:
        x = x[None]
    valid = x[..., VALID] > 0.5
    order = np.argsort(~valid, axis=1, kind="stable")
    x = np.take_along_axis(x, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    x[~valid] = 0.0
    x[valid, VALID] = 1.0
    return x[0] if single else x


def check_jets(features, first_index=0):
    """Raise :class:`DatasetError` unless every jet satisfies the invariants."""
    x = np.asarray(features)
    if x.ndim != 3 or x.shape[2] != D_FEAT:
        raise DatasetError(f"features must have shape (num_jets, n_particles, {D_FEAT}), got {x.shape}")
    bad = ~np.isfinite(x).all(axis=(1, 2))
    if bad.any():
        raise DatasetError("non-finite feature", int(np.argmax(bad)) + first_index)
    flag = x[..., VALID]
    bad = ~np.isin(flag, (0.0, 1.0)).all(axis=1)
    if bad.any():
        raise DatasetError("valid flag not in {0, 1}", int(np.argmax(bad)) + first_index)
    valid = flag > 0.5
    bad = (valid & (x[..., PT] <= 0)).any(axis=1)
    if bad.any():
        raise DatasetError("valid particle with pt_rel <= 0", int(np.argmax(bad)) + first_index)
    bad = ((~valid)[..., None] & (x != 0)).any(axis=(1, 2))
    if bad.any():
        raise DatasetError("padded slot with nonzero features", int(np.argmax(bad)) + first_index)
    bad = (np.diff(valid.astype(np.int8), axis=1) > 0).any(axis=1)
    if bad.any():
        raise DatasetError("padded slot before a valid particle", int(np.argmax(bad)) + first_index)


@dataclass
class JetDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple = CLASS_NAMES
    split: str = "all"
    seed: int = None
    indices: np.ndarray = None  # positions in the parent dataset, when derived

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"length mismatch: {self.features.shape[0]} jets vs {self.labels.shape[0]} labels"
            )
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i):
        return Jet(self.features[i].copy(), int(self.labels[i]))

    @property
    def jets(self):
        return [self[i] for i in range(len(self))]

    @property
    def n_particles(self):
        return self.features.shape[1]

    @property
    def class_balance(self):
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(c) for name, c in zip(self.class_names, counts)}

    def subset(self, idx, split=None):
        idx = np.asarray(idx, dtype=np.int64)
        return JetDataset(
            self.features[idx],
            self.labels[idx],
            self.class_names,
            split or self.split,
            self.seed,
            self.indices[idx],
        )


# ---------------------------------------------------------------------------
# file IO


def load_npy_dataset(features_path, labels_path, class_names=CLASS_NAMES):
    feats = np.load(features_path, allow_pickle=False)
    labels = np.load(labels_path, allow_pickle=False)
    if feats.ndim != 3 or feats.shape[2] != D_FEAT:
        raise DatasetError(f"features must have shape (num_jets, n_particles, {D_FEAT}), got {feats.shape}")
    if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
        raise DatasetError(f"length mismatch: features {feats.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DatasetError(f"labels must be integers, got dtype {labels.dtype}")
    bad = (labels < 0) | (labels >= len(class_names))
    if bad.any():
        i = int(np.argmax(bad))
        raise DatasetError(f"unknown label id {int(labels[i])}", i)
    finite = np.isfinite(feats).all(axis=(1, 2))
    if not finite.all():
        raise DatasetError("non-finite feature", int(np.argmax(~finite)))
    feats = canonicalize(feats)
    check_jets(feats)
    return JetDataset(feats, labels, class_names)


def save_dataset(ds, directory, extra=None):
    """Write ``features.npy``, ``labels.npy`` and ``dataset.json`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "features.npy"), ds.features)
    np.save(os.path.join(directory, "labels.npy"), ds.labels)
    manifest = {
        "num_jets": len(ds),
        "n_particles": ds.n_particles,
        "class_names": list(ds.class_names),
        "counts": ds.class_balance,
        "seed": ds.seed,
        "split": ds.split,
        "features": "features.npy",
        "labels": "labels.npy",
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_dataset(directory):
    """Load a directory written by :func:`save_dataset` (or any directory
    holding ``features.npy``/``labels.npy`` with an optional manifest)."""
    manifest_path = os.path.join(directory, "dataset.json")
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    names = tuple(manifest.get("class_names", CLASS_NAMES))
    ds = load_npy_dataset(
        os.path.join(directory, manifest.get("features", "features.npy")),
        os.path.join(directory, manifest.get("labels", "labels.npy")),
        names,
    )
    ds.seed = manifest.get("seed")
    return ds


def filter_classes(ds, names):
    """Keep only jets whose class name is in ``names`` (ids are preserved)."""
    unknown = set(names) - set(ds.class_names)
    if unknown:
        raise DatasetError(f"unknown class names {sorted(unknown)}")
    ids = [ds.class_names.index(n) for n in names]
    return ds.subset(np.nonzero(np.isin(ds.labels, ids))[0])


def split_dataset(ds, fractions=(0.8, 0.1, 0.1), seed=0):
    """Stratified train/val/test split; per-class sizes are rounded, so every
    class deviates from its target count by at most one jet."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = stream(seed, "split")
    parts = ([], [], [])
    for c in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(len(idx) * fractions[0]))
        n_val = min(int(round(len(idx) * fractions[1])), len(idx) - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train : n_train + n_val])
        parts[2].append(idx[n_train + n_val :])
    names = ("train", "val", "test")
    return tuple(ds.subset(np.sort(np.concatenate(p)), name) for p, name in zip(parts, names))


# ---------------------------------------------------------------------------
# synthetic jets


@dataclass
class ClassSpec:
    """Generator settings for one synthetic class.

    ``spread`` bounds the prong placement: a single prong sits within
    ``spread / 4`` of the axis, multi-prong centers lie at radius
    ``[spread / 2, spread]`` with pairwise separation of at least ``spread``
    (relaxed to ``0.9 * spread`` when rejection sampling struggles).
    """

    name: str
    prongs: int = 1
    spread: float = 0.1
    prong_width: float = 0.03
    hard_per_prong: float = 3.0
    soft_mean: float = 8.0
    soft_fraction: tuple = (0.05, 0.15)
    soft_radius: float = 0.8


def default_classes():
    return [
        ClassSpec("q", prongs=1, spread=0.1, prong_width=0.02, hard_per_prong=3, soft_mean=6),
        ClassSpec("g", prongs=1, spread=0.1, prong_width=0.08, hard_per_prong=6, soft_mean=14,
                  soft_fraction=(0.1, 0.25)),
        ClassSpec("W", prongs=2, spread=0.4, prong_width=0.03, hard_per_prong=3, soft_mean=8),
        ClassSpec("Z", prongs=2, spread=0.25, prong_width=0.03, hard_per_prong=3, soft_mean=8),
        ClassSpec("t", prongs=3, spread=0.5, prong_width=0.03, hard_per_prong=3, soft_mean=8),
    ]


@dataclass
class SyntheticSpec:
    classes: list = field(default_factory=default_classes)
    n_particles: int = N_PARTICLES
    total_pt: tuple = (0.85, 1.0)

    @property
    def class_names(self):
        return tuple(c.name for c in self.classes)

    def select(self, names):
        by_name = {c.name: c for c in self.classes}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise ValueError(f"unknown synthetic class {missing}")
        return SyntheticSpec([by_name[n] for n in names], self.n_particles, self.total_pt)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        classes = [ClassSpec(**{**c, "soft_fraction": tuple(c["soft_fraction"])}) for c in d["classes"]]
        return cls(classes, d.get("n_particles", N_PARTICLES), tuple(d.get("total_pt", (0.85, 1.0))))


def _prong_centers(cs, rng):
    if cs.prongs == 1:
        r = 0.25 * cs.spread * np.sqrt(rng.random())
        a = rng.uniform(-np.pi, np.pi)
        return np.array([[r * np.cos(a), r * np.sin(a)]])
    min_sep = cs.spread
    for attempt in range(200):
        if attempt == 100:
            min_sep = 0.9 * cs.spread
        r = rng.uniform(0.5 * cs.spread, cs.spread, size=cs.prongs)
        a = rng.uniform(-np.pi, np.pi, size=cs.prongs)
        c = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
        if d[np.triu_indices(cs.prongs, 1)].min() >= min_sep:
            return c
    # evenly spaced on the outer rim always satisfies the separation
    a = rng.uniform(-np.pi, np.pi) + 2 * np.pi * np.arange(cs.prongs) / cs.prongs
    return cs.spread * np.stack([np.cos(a), np.sin(a)], axis=1)


def _synth_jet(cs, spec, rng):
    cap = spec.n_particles
    total = rng.uniform(*spec.total_pt)
    soft_frac = rng.uniform(*cs.soft_fraction)
    hard_total = total * (1.0 - soft_frac)
    centers = _prong_centers(cs, rng)

    if cs.prongs == 1:
        prong_frac = np.ones(1)
    else:
        for _ in range(100):
            prong_frac = rng.dirichlet(np.full(cs.prongs, 4.0))
            if prong_frac.min() >= 0.15:
                break
        else:
            prong_frac = np.full(cs.prongs, 1.0 / cs.prongs)

    rows = []
    budget = cap - 1  # keep room for at least one soft particle
    for p in range(cs.prongs):
        n_hard = 1 + rng.poisson(max(cs.hard_per_prong - 1.0, 0.0))
        n_hard = int(min(n_hard, 8, budget - (cs.prongs - p - 1)))
        budget -= n_hard
        shares = np.sort(rng.dirichlet(np.full(n_hard, 1.5)))[::-1]
        pts = hard_total * prong_frac[p] * shares
        pos = np.repeat(centers[p][None], n_hard, axis=0)
        pos[1:] += rng.normal(0.0, cs.prong_width, size=(n_hard - 1, 2))
        rows.append(np.column_stack([pos, pts]))

    n_soft = int(np.clip(rng.poisson(cs.soft_mean), 1, cap - sum(len(r) for r in rows)))
    e = rng.exponential(1.0, size=n_soft)
    soft_pt = total * soft_frac * e / e.sum()
    rad = cs.soft_radius * np.sqrt(rng.random(n_soft))
    ang = rng.uniform(-np.pi, np.pi, size=n_soft)
    rows.append(np.column_stack([rad * np.cos(ang), rad * np.sin(ang), soft_pt]))

    parts = np.concatenate(rows, axis=0)
    # the leading particle must sit at a prong center; a soft particle that
    # happens to be hardest trades pt with the hardest center
    heads = np.cumsum([0] + [len(r) for r in rows[: cs.prongs - 1]])
    imax = int(np.argmax(parts[:, 2]))
    if imax not in heads:
        top = int(heads[np.argmax(parts[heads, 2])])
        parts[[top, imax], 2] = parts[[imax, top], 2]
    order = np.argsort(-parts[:, 2], kind="stable")
    parts = parts[order]
    jet = np.zeros((cap, D_FEAT))
    jet[: len(parts), :3] = parts
    jet[: len(parts), VALID] = 1.0
    return jet


def generate_synthetic(spec, count, seed):
    """``count`` jets cycling through ``spec.classes`` (balanced); jet ``i``
    draws from its own random stream, so output is a pure function of the
    arguments."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if not spec.classes:
        raise ValueError("synthetic spec has no classes")
    for c in spec.classes:
        if c.prongs < 1:
            raise ValueError(f"class {c.name!r}: prongs must be >= 1")
        if c.prongs + 1 > spec.n_particles:
            raise ValueError(f"class {c.name!r}: {c.prongs} prongs need capacity >= {c.prongs + 1}")
    # standard names keep their ids; custom names are appended
    class_names = list(CLASS_NAMES)
    for c in spec.classes:
        if c.name not in class_names:
            class_names.append(c.name)
    feats = np.zeros((count, spec.n_particles, D_FEAT))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        cs = spec.classes[i % len(spec.classes)]
        feats[i] = _synth_jet(cs, spec, stream(seed, "synthetic", i))
        labels[i] = class_names.index(cs.name)
    ds = JetDataset(feats, labels, tuple(class_names), seed=seed)
    check_jets(ds.features)
    return ds
