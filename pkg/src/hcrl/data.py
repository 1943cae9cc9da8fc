"""Dataset containers, IDX / CSV loaders and a synthetic hierarchical generator."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 2051
IDX_LABELS = 2049


class ParseError(ValueError):
    """Malformed input; ``where`` locates the problem (byte offset or line/cell)."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None  # (N, levels), column 0 is the coarsest level
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d matrix")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X has non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.ndim == 1:
                self.labels = self.labels[:, None]
            if self.labels.shape[0] != self.X.shape[0]:
                raise ValueError("label vectors must have one entry per instance")
        self.meta.setdefault("name", "dataset")
        self.meta.setdefault("observation", "gaussian")
        self.meta["N"], self.meta["D"] = (int(s) for s in self.X.shape)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def D(self):
        return self.X.shape[1]

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.X[idx], labels, dict(self.meta))


# -- IDX ---------------------------------------------------------------------------

def _read_idx(path, expected_magic):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ParseError(f"{path}: truncated header at offset {len(data)}", len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic {magic} at offset 0 (expected {expected_magic})", 0)
    ndim = data[3]
    head = 4 + 4 * ndim
    if len(data) < head:
        raise ParseError(f"{path}: truncated dimension block at offset {len(data)}", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:head])
    need = int(np.prod(dims))
    if len(data) - head < need:
        raise ParseError(f"{path}: payload truncated at offset {len(data)}, need {head + need} bytes", len(data))
    if len(data) - head > need:
        raise ParseError(f"{path}: trailing bytes after offset {head + need}", head + need)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(path, labels_path=None, name=None):
    """Images in IDX format as rows scaled to [0, 1]; optional IDX label file."""
    raw = _read_idx(path, IDX_IMAGES)
    X = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        lab = _read_idx(labels_path, IDX_LABELS)
        if lab.shape[0] != X.shape[0]:
            raise ParseError(f"{labels_path}: {lab.shape[0]} labels for {X.shape[0]} images", 4)
        labels = lab.astype(np.int64)
    return Dataset(X, labels, {"name": name or Path(path).name, "observation": "bernoulli"})


def write_idx(path, array):
    """Write a uint8 array in IDX format (rank 3 gives magic 2051, rank 1 gives 2049)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 8, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# -- dense CSV ---------------------------------------------------------------------

def sidecar_path(path):
    return Path(str(path) + ".meta.json")


def load_dense_csv(path):
    """Numeric CSV; a ``<path>.meta.json`` sidecar may declare trailing label columns."""
    path = Path(path)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    n_labels = int(meta.get("label_columns", 0))
    rows, width = [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width <= n_labels:
                    raise ParseError(f"{path}:{lineno}: {width} columns but {n_labels} label columns declared",
                                     (lineno, None))
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}",
                                 (lineno, None))
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: column {col} cell {cell!r} is not numeric",
                                     (lineno, col)) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows", (0, None))
    M = np.array(rows)
    D = M.shape[1] - n_labels
    labels = None
    if n_labels:
        lab = M[:, D:]
        if np.any(lab != np.round(lab)):
            raise ParseError(f"{path}: label columns must hold integers", (None, D + 1))
        labels = lab.astype(np.int64)
    info = {"name": meta.get("name", path.stem), "observation": meta.get("observation", "gaussian")}
    return Dataset(M[:, :D], labels, info)


def save_dense_csv(dataset, path):
    """Write features (and label columns, if any) plus the sidecar header."""
    path = Path(path)
    cols = [dataset.X]
    if dataset.labels is not None:
        cols.append(dataset.labels.astype(np.float64))
    M = np.hstack(cols)
    n_feat = dataset.D
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in M:
            w.writerow([repr(float(v)) if j < n_feat else str(int(v)) for j, v in enumerate(row)])
    side = {"label_columns": 0 if dataset.labels is None else int(dataset.labels.shape[1]),
            "name": dataset.meta.get("name", path.stem),
            "observation": dataset.meta.get("observation", "gaussian")}
    sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return path


# -- synthetic hierarchy -------------------------------------------------------------

@dataclass
class SyntheticSpec:
    depth: int = 2
    branching: tuple | int = 3  # children per inner level; an int is broadcast
    decay: float = 0.5  # variance ratio child / parent
    separation: float = 4.0  # child offset in units of the parent's sd
    N: int = 1000
    J_ambient: int = 8
    seed: int = 0
    level_weights: tuple | None = None  # chance an instance comes from each level

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if isinstance(self.branching, (int, np.integer)):
            if self.branching < 1:
                raise ValueError("branching factors must be positive")
            self.branching = (int(self.branching),) * max(self.depth - 1, 0)
        self.branching = tuple(int(b) for b in self.branching)
        if len(self.branching) != self.depth - 1:
            raise ValueError("need one branching factor per inner level")
        if any(b < 1 for b in self.branching):
            raise ValueError("branching factors must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.separation < 0 or self.N < 1 or self.J_ambient < 1:
            raise ValueError("separation, N and J_ambient out of range")
        if self.level_weights is None:
            # most data sits at the leaves, a little at each coarser level
            w = 0.03 ** np.arange(self.depth - 1, -1, -1, dtype=np.float64)
            self.level_weights = tuple(w / w.sum())
        self.level_weights = tuple(float(w) for w in self.level_weights)
        if len(self.level_weights) != self.depth or min(self.level_weights) < 0 or sum(self.level_weights) <= 0:
            raise ValueError("level_weights need depth nonnegative entries")


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def gen_synthetic(spec):
    """Balanced Gaussian tree; each row picks a uniform leaf path, then a level on it.

    Labels hold the node index at every level (column 0 is the root level).
    ``meta["params"]`` keeps the generating means / variances per level and
    ``meta["gen_level"]`` the level each row came from.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.J_ambient
    means = [np.zeros((1, d))]
    var = [1.0]
    for l, b in enumerate(spec.branching):
        parent = means[-1]
        sd = np.sqrt(var[-1])
        kids = np.array([parent[p] + spec.separation * sd * _unit(rng, d)
                         for p in range(parent.shape[0]) for _ in range(b)])
        means.append(kids)
        var.append(var[-1] * spec.decay)
    n_leaf = means[-1].shape[0]
    leaf = rng.integers(n_leaf, size=spec.N)
    w = np.array(spec.level_weights)
    level = rng.choice(spec.depth, size=spec.N, p=w / w.sum())
    # ancestor index of each leaf at every level
    labels = np.zeros((spec.N, spec.depth), dtype=np.int64)
    labels[:, -1] = leaf
    for l in range(spec.depth - 2, -1, -1):
        labels[:, l] = labels[:, l + 1] // spec.branching[l]
    noise = rng.standard_normal((spec.N, d))
    X = np.empty((spec.N, d))
    for n in range(spec.N):
        l = level[n]
        X[n] = means[l][labels[n, l]] + np.sqrt(var[l]) * noise[n]
    params = {"means": [m.tolist() for m in means], "variances": var,
              "branching": list(spec.branching), "level_weights": list(spec.level_weights)}
    meta = {"name": f"synthetic-d{spec.depth}-s{spec.seed}", "observation": "gaussian",
            "params": params, "gen_level": level.tolist()}
    return Dataset(X, labels, meta)


def standardize(X):
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
