"""Datasets: synthetic planted-anomaly graphs, file ingestion, splits, reports."""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, InvalidValue, NotFound, ParseError, SchemaError
from .graph import UNKNOWN, SparseGraph, build_graph, class_heterophily

BINARY_MAGIC = b"SGFD"


@dataclass(eq=False)
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise SchemaError(f"features must have {n} rows")
        if self.labels.shape != (n,):
            raise SchemaError(f"labels must have {n} entries")

    @property
    def num_nodes(self):
        return self.graph.num_nodes

    @property
    def labelled(self) -> np.ndarray:
        return self.labels != UNKNOWN


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 2000
    anomaly_rate: float = 0.05
    feature_dim: int = 16
    mu: float = 0.5
    mean_degree: float = 10.0
    anomaly_heterophily: float = 0.9
    seed: int = 0

    def validate(self):
        if not 0.0 < self.anomaly_rate < 0.5:
            raise InvalidInput("anomaly_rate must lie in (0, 0.5)")
        if self.mean_degree < 2:
            raise InvalidInput("mean_degree must be >= 2")
        if not 0.0 <= self.anomaly_heterophily <= 1.0:
            raise InvalidInput("anomaly_heterophily must lie in [0, 1]")
        if self.feature_dim < 1:
            raise InvalidInput("feature_dim must be >= 1")
        n_anom = math.floor(self.n * self.anomaly_rate)
        if n_anom < 2:
            raise InvalidInput("configuration yields fewer than two anomalies")
        if self.mean_degree >= self.n - n_anom:
            raise InvalidInput("mean_degree too large for the number of normal nodes")


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Planted-anomaly graph with camouflaged (heterophilous) anomalies.

    Exactly ``floor(n * anomaly_rate)`` anomalies. Every anomaly sends
    ``1 + Poisson(mean_degree - 1)`` edge stubs; a stub lands on another
    anomaly with probability r = (1-h)/(1+h), otherwise on a random normal
    node. Anomaly-anomaly edges count at both ends, so the expected share of
    normal neighbours at anomaly endpoints is (1-r)/(1+r) = h. Normal nodes
    are then wired among themselves until the edge budget n*mean_degree/2 is
    met. Features: N(0, I) for normal nodes, N(mu*1, I) for anomalies.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    n_anom = math.floor(n * cfg.anomaly_rate)
    labels = np.zeros(n, dtype=np.int64)
    anomalies = np.sort(rng.choice(n, n_anom, replace=False))
    labels[anomalies] = 1
    normals = np.flatnonzero(labels == 0)

    h = cfg.anomaly_heterophily
    r = (1.0 - h) / (1.0 + h)
    stubs = 1 + rng.poisson(cfg.mean_degree - 1, size=n_anom)
    src = np.repeat(anomalies, stubs)
    to_anom = rng.random(len(src)) < r
    dst = np.empty_like(src)
    dst[~to_anom] = normals[rng.integers(0, len(normals), size=int((~to_anom).sum()))]
    # anomaly targets exclude the source itself
    k = int(to_anom.sum())
    if k:
        pick = rng.integers(0, n_anom - 1, size=k)
        src_pos = np.searchsorted(anomalies, src[to_anom])
        pick = pick + (pick >= src_pos)
        dst[to_anom] = anomalies[pick]
    anomaly_edges = np.unique(np.sort(np.stack([src, dst], axis=1), axis=1), axis=0)

    budget = int(round(n * cfg.mean_degree / 2)) - len(anomaly_edges)
    normal_edges = np.empty((0, 2), dtype=np.int64)
    while len(normal_edges) < budget:
        need = budget - len(normal_edges)
        a = normals[rng.integers(0, len(normals), size=need)]
        b = normals[rng.integers(0, len(normals), size=need)]
        cand = np.sort(np.stack([a, b], axis=1), axis=1)
        cand = cand[cand[:, 0] != cand[:, 1]]
        merged = np.concatenate([normal_edges, cand])
        _, first = np.unique(merged, axis=0, return_index=True)
        normal_edges = merged[np.sort(first)][:budget]

    graph = build_graph(np.concatenate([anomaly_edges, normal_edges]), n)
    X = rng.standard_normal((n, cfg.feature_dim))
    X[anomalies] += cfg.mu
    return Dataset(graph, X, labels, name=f"synthetic-{cfg.seed}")


def anomaly_side_heterophily(ds: Dataset) -> float:
    return class_heterophily(ds.graph, ds.labels, 1)


# ---------------------------------------------------------------- ingestion


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield no, line


def _open_check(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"{path}: no such file")
    return path


def read_edges(path) -> np.ndarray:
    path = _open_check(path)
    out = []
    for no, line in _data_lines(path):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(path, no, f"expected 'src,dst', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, no, f"non-integer node id in {line!r}") from None
        if u < 0 or v < 0:
            raise ParseError(path, no, "node ids must be non-negative")
        out.append((u, v))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def read_labels(path) -> dict[int, int]:
    path = _open_check(path)
    out = {}
    for no, line in _data_lines(path):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(path, no, f"expected 'node_id,label', got {line!r}")
        try:
            node, lab = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(path, no, f"non-integer field in {line!r}") from None
        if lab not in (0, 1):
            raise ParseError(path, no, f"label must be 0 or 1, got {lab}")
        if node < 0:
            raise ParseError(path, no, "node ids must be non-negative")
        out[node] = lab
    return out


def read_features(path) -> np.ndarray:
    """CSV rows, or the binary layout: b'SGFD', u64 rows, u64 cols, f32 row-major."""
    path = _open_check(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return _read_binary_features(path)
    rows = []
    width = None
    for no, line in _data_lines(path):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise ParseError(path, no, "non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(path, no, f"expected {width} values, got {len(row)}")
        if not all(math.isfinite(v) for v in row):
            raise ParseError(path, no, "non-finite feature value")
        rows.append(row)
    if not rows:
        raise ParseError(path, 1, "no feature rows")
    return np.array(rows, dtype=np.float64)


def _read_binary_features(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 20:
        raise ParseError(path, 1, "truncated binary header")
    rows, cols = struct.unpack_from("<QQ", raw, 4)
    expected = 20 + rows * cols * 4
    if len(raw) != expected:
        raise ParseError(path, 1, f"binary payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=20, count=rows * cols)
    return data.astype(np.float64).reshape(rows, cols)


def binary_features_bytes(X) -> bytes:
    X = np.ascontiguousarray(np.asarray(X, dtype="<f4"))
    return BINARY_MAGIC + struct.pack("<QQ", X.shape[0], X.shape[1]) + X.tobytes()


def csv_features_text(X) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n"
                   for row in np.asarray(X, dtype=np.float64))


def write_binary_features(path, X) -> None:
    Path(path).write_bytes(binary_features_bytes(X))


def write_csv_features(path, X) -> None:
    Path(path).write_text(csv_features_text(X), encoding="utf-8")


def load_dataset(edges_path, features_path, labels_path, name=None) -> Dataset:
    """Node count comes from the feature rows; edge and label ids must fit it."""
    X = read_features(features_path)
    n = X.shape[0]
    edges = read_edges(edges_path)
    labels_map = read_labels(labels_path)
    if edges.size and edges.max() >= n:
        raise SchemaError(f"edge file references node {edges.max()} but features have {n} rows")
    if labels_map and max(labels_map) >= n:
        raise SchemaError(f"labels reference node {max(labels_map)} but features have {n} rows")
    y = np.full(n, UNKNOWN, dtype=np.int64)
    for node, lab in labels_map.items():
        y[node] = lab
    return Dataset(build_graph(edges, n), X, y, name=name or Path(features_path).stem)


def load_graph_labels(edges_path, labels_path):
    """Graph and labels without features; node count = largest id seen + 1."""
    edges = read_edges(edges_path)
    labels_map = read_labels(labels_path)
    n = 0
    if edges.size:
        n = int(edges.max()) + 1
    if labels_map:
        n = max(n, max(labels_map) + 1)
    y = np.full(n, UNKNOWN, dtype=np.int64)
    for node, lab in labels_map.items():
        y[node] = lab
    return build_graph(edges, n), y


def dataset_files(ds: Dataset, binary: bool = True) -> dict[str, tuple[str, bytes]]:
    """Serialized ingestion files keyed by role: (file name, contents)."""
    edges = "# src,dst\n" + "".join(f"{u},{v}\n" for u, v in ds.graph.edge_array())
    labels = "".join(f"{i},{lab}\n" for i, lab in enumerate(ds.labels) if lab != UNKNOWN)
    if binary:
        feats = ("features.bin", binary_features_bytes(ds.features))
    else:
        feats = ("features.csv", csv_features_text(ds.features).encode("utf-8"))
    return {
        "edges": ("edges.csv", edges.encode("utf-8")),
        "labels": ("labels.csv", labels.encode("utf-8")),
        "features": feats,
    }


def save_dataset(ds: Dataset, directory, binary: bool = True) -> dict[str, Path]:
    """Write the three ingestion files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for role, (name, blob) in dataset_files(ds, binary).items():
        paths[role] = directory / name
        paths[role].write_bytes(blob)
    return paths


def standardize(X, mask=None):
    """Z-score each column with statistics from the rows in ``mask``."""
    X = np.asarray(X, dtype=np.float64)
    ref = X if mask is None else X[np.asarray(mask, dtype=bool)]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (X - mean) / std, mean, std


# ------------------------------------------------------------------- splits


@dataclass(eq=False)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("train", "val", "test"))


def make_split(labels, fractions=(0.4, 0.2, 0.4), seed: int = 0,
               stratified: bool = True) -> SplitMasks:
    """Seeded train/val/test masks over the labelled nodes.

    Within each group (class, when stratified) the train and val sizes are
    ``round(fraction * size)``; the remainder goes to test.
    """
    labels = np.asarray(labels)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise InvalidInput("fractions must be three non-negative values summing to 1")
    n = len(labels)
    known = labels != UNKNOWN
    counts = [int(np.sum(labels == c)) for c in (0, 1)]
    if min(counts) == 0:
        raise InvalidInput("both classes must be present")
    if stratified and min(counts) < 3:
        raise InvalidInput("each class needs at least 3 labelled nodes")
    rng = np.random.default_rng(seed)
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    groups = [np.flatnonzero(labels == c) for c in (0, 1)] if stratified else [np.flatnonzero(known)]
    for members in groups:
        perm = rng.permutation(members)
        n_tr = int(round(fr[0] * len(perm)))
        n_va = int(round(fr[1] * len(perm)))
        n_va = min(n_va, len(perm) - n_tr)
        masks[0][perm[:n_tr]] = True
        masks[1][perm[n_tr:n_tr + n_va]] = True
        masks[2][perm[n_tr + n_va:]] = True
    return SplitMasks(*masks)


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    f1_macro: float
    auc: float
    seed: int = 0
    config: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_finite(obj, path="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise InvalidValue(f"non-finite value at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def dumps_report(report: MetricsReport) -> str:
    d = report.to_dict()
    if d["wall_time"] is None:
        d.pop("wall_time")
    _check_finite(d)
    return json.dumps(d, indent=2, allow_nan=False) + "\n"


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    except OSError as exc:
        raise OSError(f"{path}: cannot create output ({exc.strerror})") from exc
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_report(report: MetricsReport, path) -> None:
    atomic_write_text(path, dumps_report(report))


def load_report(path) -> MetricsReport:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"{path}: no such report")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    return MetricsReport.from_dict(d)
