"""Point cloud datasets: synthetic shapes, OFF meshes, XYZ files and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .netcore import ContractViolation
from .validation import check_clouds

__all__ = [
    "DEFAULT_MESH_POINTS",
    "SHAPE_KINDS",
    "CloudNormalizer",
    "LabeledCloudDataset",
    "ParseError",
    "ShapeSpec",
    "TriangleMesh",
    "load_off",
    "make_splits",
    "make_synthetic_dataset",
    "normalize_cloud",
    "read_manifest",
    "read_xyz",
    "sample_mesh_surface",
    "synth_shape",
    "write_manifest",
    "write_xyz",
]

DEFAULT_MESH_POINTS = 2048
MANIFEST_FORMAT = "pointjem-manifest"
MANIFEST_VERSION = 1
NORMALIZATION = "per-cloud isotropic, bounding-box centred, max half-extent 1"


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractViolation("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh_surface(mesh: TriangleMesh, n: int = DEFAULT_MESH_POINTS, rng=None) -> np.ndarray:
    """``n`` points uniform on the surface: area-weighted faces, reflected barycentrics."""
    rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ContractViolation("mesh has zero total area")
    faces = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[faces]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def load_off(path) -> TriangleMesh:
    """Parse an OFF mesh; polygons are fan-triangulated from their first vertex.

    Accepts the ModelNet quirk where the counts follow ``OFF`` on the first
    line (``OFF490 518 0``).
    """
    path = Path(path)
    lines = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                lines.append((lineno, text))
    if not lines:
        raise ParseError(path, 1, "empty file")
    lineno, head = lines[0]
    if not head.startswith("OFF"):
        raise ParseError(path, lineno, f"expected 'OFF' header, got {head[:20]!r}")
    rest = head[3:].strip()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise ParseError(path, lineno, "missing vertex/face counts")
        lineno, rest = lines[1]
        pos = 2
    try:
        counts = [int(t) for t in rest.split()]
    except ValueError:
        raise ParseError(path, lineno, f"bad counts line {rest!r}") from None
    if len(counts) < 2 or counts[0] < 0 or counts[1] < 0:
        raise ParseError(path, lineno, f"bad counts line {rest!r}")
    nv, nf = counts[0], counts[1]
    if len(lines) < pos + nv + nf:
        last = lines[-1][0]
        raise ParseError(path, last, f"expected {nv} vertices and {nf} faces, file is truncated")

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = lines[pos + i]
        toks = text.split()
        if len(toks) < 3:
            raise ParseError(path, lineno, f"vertex needs 3 coordinates, got {len(toks)}")
        try:
            verts[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise ParseError(path, lineno, f"bad vertex {text!r}") from None
    tris = []
    for j in range(nf):
        lineno, text = lines[pos + nv + j]
        try:
            toks = [int(t) for t in text.split()]
        except ValueError:
            raise ParseError(path, lineno, f"bad face {text!r}") from None
        if not toks or toks[0] < 3 or len(toks) < toks[0] + 1:
            raise ParseError(path, lineno, f"bad face {text!r}")
        idx = toks[1:toks[0] + 1]
        for k in idx:
            if not 0 <= k < nv:
                raise ParseError(path, lineno, f"face index {k} out of range [0, {nv})")
        for k in range(1, len(idx) - 1):
            tris.append((idx[0], idx[k], idx[k + 1]))
    mesh = TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))
    return mesh


def normalize_cloud(cloud) -> np.ndarray:
    """Centre the bounding box at the origin and scale the largest half-extent to 1."""
    X = np.asarray(cloud, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or len(X) == 0:
        raise ContractViolation(f"expected a non-empty (n, 3) cloud, got {X.shape}")
    lo, hi = X.min(axis=0), X.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) / 2.0
    if not half > 0:
        return np.zeros_like(X)
    out = (X - center) / half
    np.clip(out, -1.0, 1.0, out=out)
    return out


class CloudNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`normalize_cloud` to each cloud."""

    def fit(self, X, y=None):
        X = check_clouds(X)
        self.n_points_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_clouds(X)
        return np.stack([normalize_cloud(c) for c in X])


SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "cone", "plane")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    jitter: float = 0.0
    stretch: tuple[float, float] = (1.0, 1.0)
    rotate: bool = False
    major_radius: float = 1.0
    minor_radius: float = 0.25

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ContractViolation(f"unknown shape {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.jitter < 0:
            raise ContractViolation("jitter must be >= 0")
        lo, hi = self.stretch
        if not 0 < lo <= hi:
            raise ContractViolation(f"stretch range must be positive and ordered, got {self.stretch}")


def _disk(rng, n, radius=1.0):
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0.0, 2 * np.pi, n)
    return r * np.cos(t), r * np.sin(t)


def _ideal_surface(spec: ShapeSpec, n: int, rng) -> np.ndarray:
    k = spec.kind
    if k == "sphere":
        p = rng.standard_normal((n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    if k == "cube":
        face = rng.integers(0, 6, n)
        p = rng.uniform(-1.0, 1.0, (n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        p[np.arange(n), axis] = sign
        return p
    if k == "cylinder":
        # radius 1, height 2: side area 4*pi, each cap pi
        part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
        t = rng.uniform(0.0, 2 * np.pi, n)
        p = np.stack([np.cos(t), np.sin(t), rng.uniform(-1.0, 1.0, n)], axis=1)
        caps = part > 0
        x, y = _disk(rng, int(caps.sum()))
        p[caps, 0], p[caps, 1] = x, y
        p[caps, 2] = np.where(part[caps] == 1, 1.0, -1.0)
        return p
    if k == "torus":
        R, r = spec.major_radius, spec.minor_radius
        # tube angle has density proportional to R + r cos(theta)
        theta = np.empty(0)
        while theta.size < n:
            cand = rng.uniform(0.0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) * (R + r) < R + r * np.cos(cand)
            theta = np.concatenate([theta, cand[keep]])
        theta = theta[:n]
        phi = rng.uniform(0.0, 2 * np.pi, n)
        ring = R + r * np.cos(theta)
        return np.stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)], axis=1)
    if k == "cone":
        # unit base radius, apex at z=1, base at z=-1; slant length sqrt(5)
        side, base = np.pi * math.sqrt(5.0), np.pi
        part = rng.random(n) < side / (side + base)
        p = np.empty((n, 3))
        s = np.sqrt(rng.random(n))  # distance from apex, area-uniform
        t = rng.uniform(0.0, 2 * np.pi, n)
        p[:, 0], p[:, 1], p[:, 2] = s * np.cos(t), s * np.sin(t), 1.0 - 2.0 * s
        x, y = _disk(rng, int((~part).sum()))
        p[~part, 0], p[~part, 1], p[~part, 2] = x, y, -1.0
        return p
    # plane: a unit square sheet in z=0
    p = rng.uniform(-1.0, 1.0, (n, 3))
    p[:, 2] = 0.0
    return p


def synth_shape(spec: ShapeSpec, n: int, rng=None, normalize: bool = True) -> np.ndarray:
    """Sample ``n`` points on an ideal surface, then stretch, rotate, jitter and normalize."""
    rng = np.random.default_rng(rng)
    p = _ideal_surface(spec, n, rng)
    lo, hi = spec.stretch
    if hi > lo or lo != 1.0:
        p = p * rng.uniform(lo, hi, 3)
    if spec.rotate:
        a = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        p = p @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    if spec.jitter > 0:
        p = p + spec.jitter * rng.standard_normal(p.shape)
    return normalize_cloud(p) if normalize else p


@dataclass
class LabeledCloudDataset:
    clouds: np.ndarray  # (N, n, 3)
    labels: np.ndarray  # (N,)
    class_names: list[str]
    split: str = "all"
    files: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.clouds = check_clouds(self.clouds)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.clouds):
            raise ContractViolation("one label per cloud required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractViolation("label out of range of class names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_points(self) -> int:
        return self.clouds.shape[1]

    def subset(self, idx, split: str) -> "LabeledCloudDataset":
        idx = np.asarray(idx, dtype=np.int64)
        files = [self.files[i] for i in idx] if self.files else []
        return LabeledCloudDataset(self.clouds[idx], self.labels[idx], list(self.class_names), split, files)


def make_synthetic_dataset(
    kinds=("sphere", "cube", "cylinder", "torus"),
    per_class: int = 200,
    n_points: int = 256,
    jitter: float = 0.01,
    stretch: tuple[float, float] = (1.0, 1.0),
    rotate: bool = True,
    seed=0,
) -> LabeledCloudDataset:
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, kind in enumerate(kinds):
        spec = ShapeSpec(kind, jitter=jitter, stretch=stretch, rotate=rotate)
        for _ in range(per_class):
            clouds.append(synth_shape(spec, n_points, rng))
            labels.append(label)
    return LabeledCloudDataset(np.stack(clouds), np.array(labels), list(kinds))


def make_splits(dataset: LabeledCloudDataset, train_fraction: float = 0.8, rng=None):
    """Seeded stratified split; each class gives ``ceil(fraction * count)`` items to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractViolation(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(rng)
    train_idx, test_idx = [], []
    for c in range(len(dataset.class_names)):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ContractViolation(
                f"class {dataset.class_names[c]!r} has {len(members)} item(s); need at least 2"
            )
        members = rng.permutation(members)
        k = math.ceil(round(train_fraction * len(members), 9))
        k = min(max(k, 1), len(members) - 1)
        train_idx.extend(members[:k].tolist())
        test_idx.extend(members[k:].tolist())
    return (dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(test_idx), "test"))


def write_xyz(cloud, path) -> None:
    """One point per line, three space-separated floats with 9 significant digits."""
    X = np.asarray(cloud, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or len(X) == 0:
        raise ContractViolation(f"expected a non-empty (n, 3) cloud, got {X.shape}")
    text = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in X.tolist())
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split()
            if len(toks) != 3:
                raise ParseError(path, lineno, f"expected 3 values, got {len(toks)}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                raise ParseError(path, lineno, f"unparsable number in {line.strip()!r}") from None
    if not rows:
        raise ParseError(path, 1, "empty point cloud file")
    X = np.array(rows)
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0]) + 1
        raise ParseError(path, bad, "non-finite coordinate")
    return X


def write_manifest(path, class_names, splits: dict[str, list[tuple[str, int]]], n_points: int,
                   seed, normalized: bool = True, source: str = "synthetic") -> dict:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "class_names": list(class_names),
        "n_points": int(n_points),
        "normalized": bool(normalized),
        "normalization": NORMALIZATION if normalized else None,
        "seed": seed,
        "source": source,
        "splits": {name: [{"file": f, "label": int(l)} for f, l in items]
                   for name, items in splits.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def read_manifest(path, split: str | None = None):
    """Load a manifest; with ``split`` also return that split as a dataset."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise ContractViolation(
            f"{path}: expected {MANIFEST_FORMAT} v{MANIFEST_VERSION}, "
            f"found {doc.get('format')!r} v{doc.get('version')}"
        )
    if split is None:
        return doc
    if split not in doc["splits"]:
        raise ContractViolation(f"{path}: no split {split!r}; have {sorted(doc['splits'])}")
    items = doc["splits"][split]
    root = path.parent
    clouds = [read_xyz(root / it["file"]) for it in items]
    labels = [it["label"] for it in items]
    ds = LabeledCloudDataset(np.stack(clouds), np.array(labels), doc["class_names"], split,
                             [it["file"] for it in items])
    return doc, ds
