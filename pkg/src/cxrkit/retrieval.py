"""Embedding index, exact nearest-neighbor queries, class-distance
statistics, and 2-D projection of embeddings.

The index holds training-split embeddings and answers queries by exhaustive
Euclidean scan: at these sizes (thousands of vectors) approximate search
buys nothing. Distance ties break by scan_id so results are total-ordered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import POSITIVE, NEGATIVE
from .tsne import TsneResult, tsne

INDEX_FORMAT = "cxr-embedding-index"
INDEX_VERSION = 1


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingEntry:
    scan_id: str
    label: str
    vector: tuple[float, ...]
    split: str = "train"  # "train" | "test"

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vector, dtype=np.float64)


@dataclass
class EmbeddingIndex:
    entries: list[EmbeddingEntry]
    dim: int
    distance: str = "euclidean"
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.asarray([e.vector for e in self.entries], dtype=np.float64)
        return self._matrix


@dataclass(frozen=True)
class Neighbor:
    scan_id: str
    label: str
    distance: float


@dataclass(frozen=True)
class NeighborResult:
    neighbors: tuple[Neighbor, ...]
    query_id: str | None = None

    def __post_init__(self):
        dists = [n.distance for n in self.neighbors]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise RetrievalError("neighbor distances must be nondecreasing")

    def labels(self) -> list[str]:
        return [n.label for n in self.neighbors]


@dataclass(frozen=True)
class ProjectedPoint:
    scan_id: str
    label: str
    xy: tuple[float, float]


def build_index(entries: list[EmbeddingEntry], split: str | None = "train") -> EmbeddingIndex:
    """Exact-search index over the given entries (training split by default;
    pass split=None to index everything). Duplicates are retained."""
    if not entries:
        raise RetrievalError("cannot build an index from no entries")
    dims = {len(e.vector) for e in entries}
    if len(dims) != 1:
        raise RetrievalError(f"embedding dimension mismatch: {sorted(dims)}")
    selected = [e for e in entries if split is None or e.split == split]
    if not selected:
        raise RetrievalError(f"no entries with split {split!r}")
    return EmbeddingIndex(entries=selected, dim=dims.pop())


def euclidean_distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = matrix - query[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def query_knn(
    index: EmbeddingIndex,
    query_vector,
    k: int = 4,
    exclude_scan_id: str | None = None,
    query_id: str | None = None,
) -> NeighborResult:
    """The k exact nearest entries, ascending distance, scan_id tie-break.

    k greater than the index size returns everything. exclude_scan_id drops
    an indexed scan (so a known scan is never its own precedent).
    """
    if len(index) == 0:
        raise RetrievalError("index is empty")
    if k < 1:
        raise RetrievalError("k must be >= 1")
    query = np.asarray(query_vector, dtype=np.float64)
    if query.shape != (index.dim,):
        raise RetrievalError(f"query dimension {query.shape} does not match index dim {index.dim}")
    dists = euclidean_distances(index.matrix, query)
    order = sorted(
        range(len(index.entries)),
        key=lambda i: (dists[i], index.entries[i].scan_id),
    )
    neighbors = []
    for i in order:
        entry = index.entries[i]
        if exclude_scan_id is not None and entry.scan_id == exclude_scan_id:
            continue
        neighbors.append(Neighbor(scan_id=entry.scan_id, label=entry.label,
                                  distance=float(dists[i])))
        if len(neighbors) == k:
            break
    return NeighborResult(neighbors=tuple(neighbors), query_id=query_id)


def neighbor_vote(result: NeighborResult) -> tuple[str, float]:
    """Label by unweighted neighbor-label averaging; ties go positive."""
    if not result.neighbors:
        raise RetrievalError("neighbor vote needs at least one neighbor")
    fraction = sum(1 for n in result.neighbors if n.label == POSITIVE) / len(result.neighbors)
    return (POSITIVE if fraction >= 0.5 else NEGATIVE), fraction


def neighbor_score_vote(result: NeighborResult, scores: dict[str, float]) -> tuple[str, float]:
    """Alternative vote averaging neighbor model scores instead of labels."""
    if not result.neighbors:
        raise RetrievalError("neighbor vote needs at least one neighbor")
    mean_score = float(np.mean([scores[n.scan_id] for n in result.neighbors]))
    return (POSITIVE if mean_score >= 0.5 else NEGATIVE), mean_score


@dataclass(frozen=True)
class DistanceCell:
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class DistanceStats:
    """Mean +/- std of pairwise train-test distances, overall and by class
    pair. Cells are None when a class is absent on either side."""

    overall: DistanceCell | None
    pos_pos: DistanceCell | None
    neg_neg: DistanceCell | None
    cross: DistanceCell | None


def _cell(values: np.ndarray) -> DistanceCell | None:
    if values.size == 0:
        return None
    return DistanceCell(mean=float(values.mean()), std=float(values.std()), count=values.size)


def class_distance_stats(index: EmbeddingIndex, test_entries: list[EmbeddingEntry]) -> DistanceStats:
    """Pairwise train-test distance table (overall, pos-pos, neg-neg, cross)."""
    if len(index) == 0 or not test_entries:
        raise RetrievalError("both the index and the test set must be nonempty")
    if any(len(e.vector) != index.dim for e in test_entries):
        raise RetrievalError("test entry dimension does not match index")
    train_labels = np.asarray([e.label == POSITIVE for e in index.entries])
    test_labels = np.asarray([e.label == POSITIVE for e in test_entries])
    test_matrix = np.asarray([e.vector for e in test_entries], dtype=np.float64)

    all_d = np.empty((len(test_entries), len(index)), dtype=np.float64)
    for i, row in enumerate(test_matrix):
        all_d[i] = euclidean_distances(index.matrix, row)

    pp = all_d[np.ix_(test_labels, train_labels)].ravel()
    nn = all_d[np.ix_(~test_labels, ~train_labels)].ravel()
    cross = np.concatenate(
        [
            all_d[np.ix_(test_labels, ~train_labels)].ravel(),
            all_d[np.ix_(~test_labels, train_labels)].ravel(),
        ]
    )
    return DistanceStats(
        overall=_cell(all_d.ravel()),
        pos_pos=_cell(pp),
        neg_neg=_cell(nn),
        cross=_cell(cross),
    )


def distance_stats_to_text(stats: DistanceStats) -> str:
    lines = ["pair\tmean\tstd\tcount"]
    for name, cell in (
        ("overall", stats.overall),
        ("pos_pos", stats.pos_pos),
        ("neg_neg", stats.neg_neg),
        ("cross", stats.cross),
    ):
        if cell is None:
            lines.append(f"{name}\tabsent\tabsent\t0")
        else:
            lines.append(f"{name}\t{cell.mean:.9g}\t{cell.std:.9g}\t{cell.count}")
    return "\n".join(lines) + "\n"


def project_entries(
    entries: list[EmbeddingEntry],
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
) -> tuple[list[ProjectedPoint], TsneResult]:
    """t-SNE projection of embedding entries to labeled 2-D points."""
    if not entries:
        raise RetrievalError("nothing to project")
    vectors = np.asarray([e.vector for e in entries], dtype=np.float64)
    result = tsne(vectors, perplexity=perplexity, iterations=iterations, seed=seed)
    points = [
        ProjectedPoint(
            scan_id=e.scan_id,
            label=e.label,
            xy=(float(result.embedding[i, 0]), float(result.embedding[i, 1])),
        )
        for i, e in enumerate(entries)
    ]
    return points, result


# ---------------------------------------------------------------------------
# Text round-trip formats (exact at 9 significant digits). Files are written
# via atomic rename so a reloading service never sees a partial index.

def _sig(value: float) -> str:
    return f"{value:.9g}"


def _atomic_write_text(path: Path, text: str) -> Path:
    import os

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def save_index(index: EmbeddingIndex, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        f"{INDEX_FORMAT} v{INDEX_VERSION}",
        f"dim={index.dim} count={len(index)} distance={index.distance}",
    ]
    for e in index.entries:
        vec = " ".join(_sig(v) for v in e.vector)
        lines.append(f"{e.scan_id}\t{e.label}\t{e.split}\t{vec}")
    return _atomic_write_text(path, "\n".join(lines) + "\n")


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    if not path.exists():
        raise RetrievalError(f"index file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith(INDEX_FORMAT):
        raise RetrievalError(f"{path}: not an embedding index file")
    header = dict(kv.split("=") for kv in lines[1].split())
    dim, count = int(header["dim"]), int(header["count"])
    entries = []
    for line in lines[2:]:
        if not line.strip():
            continue
        scan_id, label, split, vec = line.split("\t")
        vector = tuple(float(v) for v in vec.split())
        if len(vector) != dim:
            raise RetrievalError(f"{path}: entry {scan_id} has wrong dimension")
        entries.append(EmbeddingEntry(scan_id=scan_id, label=label, vector=vector, split=split))
    if len(entries) != count:
        raise RetrievalError(f"{path}: expected {count} entries, found {len(entries)}")
    return EmbeddingIndex(entries=entries, dim=dim, distance=header.get("distance", "euclidean"))


def save_embeddings(entries: list[EmbeddingEntry], path: str | Path) -> Path:
    """Same record layout as the index file, but holding every split."""
    path = Path(path)
    if not entries:
        raise RetrievalError("no embeddings to save")
    dim = len(entries[0].vector)
    lines = [
        f"{INDEX_FORMAT} v{INDEX_VERSION}",
        f"dim={dim} count={len(entries)} distance=euclidean",
    ]
    for e in entries:
        vec = " ".join(_sig(v) for v in e.vector)
        lines.append(f"{e.scan_id}\t{e.label}\t{e.split}\t{vec}")
    return _atomic_write_text(path, "\n".join(lines) + "\n")


def load_embeddings(path: str | Path) -> list[EmbeddingEntry]:
    return load_index(path).entries


def save_projection(points: list[ProjectedPoint], path: str | Path) -> Path:
    path = Path(path)
    lines = ["scan_id\tlabel\tx\ty"]
    for p in points:
        lines.append(f"{p.scan_id}\t{p.label}\t{_sig(p.xy[0])}\t{_sig(p.xy[1])}")
    return _atomic_write_text(path, "\n".join(lines) + "\n")


def load_projection(path: str | Path) -> list[ProjectedPoint]:
    path = Path(path)
    if not path.exists():
        raise RetrievalError(f"projection file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    points = []
    for line in lines[1:]:
        if not line.strip():
            continue
        scan_id, label, x, y = line.split("\t")
        points.append(ProjectedPoint(scan_id=scan_id, label=label, xy=(float(x), float(y))))
    return points
