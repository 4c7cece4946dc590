"""Class-level cluster analysis of embeddings.

Centroids and intra-class distance spread, single-linkage merging of class
centroids, PCA by SVD, and three internal validity indices (silhouette,
Davies-Bouldin, Calinski-Harabasz).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedding_io import EmbeddingSet

__all__ = [
    "AnalyticsError",
    "ClusterReport",
    "IntraStats",
    "Linkage",
    "Merge",
    "PcaModel",
    "analyze",
    "calinski_harabasz",
    "class_centroids",
    "davies_bouldin",
    "intra_class_stats",
    "pca_fit",
    "pca_transform",
    "silhouette",
    "single_linkage",
    "validity_indices",
]

_CHUNK = 512


class AnalyticsError(ValueError):
    pass


def _xy(data, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, EmbeddingSet):
        x = data.vectors.astype(np.float64)
        y = data.labels if labels is None else np.asarray(labels)
    else:
        x = np.asarray(data, dtype=np.float64)
        if labels is None:
            raise AnalyticsError("labels are required for raw arrays")
        y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise AnalyticsError(f"shape mismatch: vectors {x.shape}, labels {y.shape}")
    return x, y


def class_centroids(data, labels=None) -> dict[int, np.ndarray]:
    """Mean vector of every class (the fixed point of one-prototype k-means)."""
    x, y = _xy(data, labels)
    if x.shape[0] == 0:
        raise AnalyticsError("empty class: no vectors")
    return {int(c): x[y == c].mean(axis=0) for c in np.unique(y)}


@dataclass(frozen=True)
class IntraStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    stddev: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[tuple[str, float], ...] = ()

    def to_json(self) -> dict:
        d = dict(vars(self))
        d["outliers"] = [list(o) for o in self.outliers]
        return d


def intra_class_stats(data, centroids: Mapping[int, np.ndarray], labels=None,
                      ids: Sequence[str] | None = None) -> dict[int, IntraStats]:
    """Box-plot summary of member-to-centroid distances per class.

    Whiskers reach the most extreme distances within 1.5 IQR of the
    quartiles; points beyond are listed as outliers. Standard deviation is
    the population one.
    """
    x, y = _xy(data, labels)
    if ids is None:
        ids = data.patch_ids if isinstance(data, EmbeddingSet) else [str(i) for i in range(len(y))]
    out = {}
    for c, centre in sorted(centroids.items()):
        idx = np.flatnonzero(y == c)
        if idx.size == 0:
            raise AnalyticsError(f"empty class {c}")
        d = np.sqrt(((x[idx] - centre) ** 2).sum(axis=1))
        q1, med, q3 = np.percentile(d, [25, 50, 75])
        iqr = q3 - q1
        lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = d[(d >= lo_fence) & (d <= hi_fence)]
        outliers = tuple((ids[i], float(v)) for i, v in zip(idx, d) if v < lo_fence or v > hi_fence)
        out[int(c)] = IntraStats(
            min=float(d.min()), q1=float(q1), median=float(med), q3=float(q3), max=float(d.max()),
            mean=float(d.mean()), stddev=float(d.std()),
            whisker_low=float(inside.min()), whisker_high=float(inside.max()),
            outliers=outliers,
        )
    return out


# ---------------------------------------------------------------------------
# single linkage


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Linkage:
    """Merge tree over ``leaves``.

    Node ids follow the usual convention: leaf i is ``leaves[i]`` and the
    i-th merge creates node ``len(leaves) + i``.
    """

    leaves: tuple[int, ...]
    merges: tuple[Merge, ...]

    def as_array(self) -> np.ndarray:
        """(n-1) x 4 array [left, right, height, size]."""
        return np.array([[m.left, m.right, m.height, m.size] for m in self.merges], dtype=np.float64)

    def to_newick(self) -> str:
        n = len(self.leaves)
        text: dict[int, str] = {i: str(label) for i, label in enumerate(self.leaves)}
        height = {i: 0.0 for i in range(n)}
        for i, m in enumerate(self.merges):
            node = n + i
            parts = []
            for child in (m.left, m.right):
                parts.append(f"{text.pop(child)}:{m.height - height[child]:.6g}")
            text[node] = "(" + ",".join(parts) + ")"
            height[node] = m.height
        (root,) = text.values() if text else ("",)
        return root + ";"

    def to_json(self) -> dict:
        return {"leaves": list(self.leaves),
                "merges": [{"left": m.left, "right": m.right, "height": m.height, "size": m.size}
                           for m in self.merges]}


def single_linkage(centroids: Mapping[int, np.ndarray]) -> Linkage:
    """Agglomerate class centroids by minimum pairwise Euclidean distance.

    Equal-distance candidates are ordered by (smaller label, larger label),
    where a cluster is represented by the smallest label it contains.
    """
    if len(centroids) < 2:
        raise AnalyticsError("single linkage needs at least 2 centroids")
    leaves = tuple(sorted(int(k) for k in centroids))
    pts = np.array([np.asarray(centroids[k], dtype=np.float64) for k in leaves])
    n = len(leaves)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)

    key = list(leaves)              # smallest label in the cluster at slot i
    node = list(range(n))           # current node id at slot i
    size = [1] * n
    active = np.ones(n, dtype=bool)
    merges = []
    for step in range(n - 1):
        masked = np.where(active[:, None] & active[None, :], dist, np.inf)
        best = masked.min()
        ii, jj = np.nonzero(masked == best)
        pairs = [(min(key[a], key[b]), max(key[a], key[b]), a, b) for a, b in zip(ii, jj) if a < b]
        _, _, a, b = min(pairs)
        if key[b] < key[a]:
            a, b = b, a
        merges.append(Merge(node[a], node[b], float(best), size[a] + size[b]))
        # the merged cluster lives in slot a
        dist[a, :] = np.minimum(dist[a, :], dist[b, :])
        dist[:, a] = dist[a, :]
        dist[a, a] = np.inf
        active[b] = False
        key[a] = min(key[a], key[b])
        node[a] = n + step
        size[a] += size[b]
    return Linkage(leaves, tuple(merges))


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean


def pca_fit(data, k: int = 50) -> PcaModel:
    """Top-k principal axes from the SVD of the mean-centred data.

    Each component is sign-fixed so that its largest-magnitude entry is
    positive.
    """
    x = data.vectors.astype(np.float64) if isinstance(data, EmbeddingSet) else np.asarray(data, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n - 1, d):
        raise AnalyticsError(f"k out of range: {k} (need 1 <= k <= min(count-1, dim) = {min(n - 1, d)})")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    var = s ** 2 / (n - 1)
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(mean, comps, var[:k], ratio)


def pca_transform(model: PcaModel, data):
    """Project with a frozen model; EmbeddingSets keep their records."""
    if isinstance(data, EmbeddingSet):
        if data.dim != model.mean.shape[0]:
            raise AnalyticsError(f"dim mismatch: got {data.dim}, model {model.mean.shape[0]}")
        return data.with_vectors(model.transform(data.vectors))
    return model.transform(data)


# ---------------------------------------------------------------------------
# validity indices


def _class_index(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes, inv = np.unique(y, return_inverse=True)
    return classes, inv


def _pairwise(a: np.ndarray, b: np.ndarray, b_sq: np.ndarray) -> np.ndarray:
    a_sq = np.einsum("ij,ij->i", a, a)
    d2 = a_sq[:, None] + b_sq[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def silhouette(data, labels=None) -> float:
    """Mean silhouette width; members of singleton classes score 0."""
    x, y = _xy(data, labels)
    classes, inv = _class_index(y)
    if classes.size < 2:
        raise AnalyticsError("silhouette needs at least 2 classes")
    x = x - x.mean(axis=0)
    n = x.shape[0]
    counts = np.bincount(inv).astype(np.float64)
    onehot = np.zeros((n, classes.size))
    onehot[np.arange(n), inv] = 1.0
    x_sq = np.einsum("ij,ij->i", x, x)
    scores = np.empty(n)
    for s in range(0, n, _CHUNK):
        rows = slice(s, min(s + _CHUNK, n))
        d = _pairwise(x[rows], x, x_sq)
        d[np.arange(d.shape[0]), np.arange(rows.start, rows.stop)] = 0.0
        sums = d @ onehot
        own = inv[rows]
        own_n = counts[own]
        a = np.where(own_n > 1, sums[np.arange(len(own)), own] / np.maximum(own_n - 1, 1), 0.0)
        means = sums / counts[None, :]
        means[np.arange(len(own)), own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        sc = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[rows] = np.where(own_n > 1, sc, 0.0)
    return float(scores.mean())


def _centroids_array(x: np.ndarray, inv: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, inv, x)
    return sums / np.bincount(inv, minlength=k)[:, None]


def davies_bouldin(data, labels=None) -> float:
    x, y = _xy(data, labels)
    classes, inv = _class_index(y)
    k = classes.size
    if k < 2:
        raise AnalyticsError("Davies-Bouldin needs at least 2 classes")
    cents = _centroids_array(x, inv, k)
    spread = np.zeros(k)
    np.add.at(spread, inv, np.sqrt(((x - cents[inv]) ** 2).sum(axis=1)))
    spread /= np.bincount(inv, minlength=k)
    gaps = np.sqrt(((cents[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
    off = ~np.eye(k, dtype=bool)
    if np.any(gaps[off] == 0):
        i, j = np.argwhere((gaps == 0) & off)[0]
        raise AnalyticsError(f"duplicate centroids for classes {classes[i]} and {classes[j]}")
    ratio = (spread[:, None] + spread[None, :]) / np.where(off, gaps, 1.0)
    ratio[~off] = -np.inf
    return float(ratio.max(axis=1).mean())


def calinski_harabasz(data, labels=None) -> float:
    x, y = _xy(data, labels)
    classes, inv = _class_index(y)
    k, n = classes.size, x.shape[0]
    if k < 2:
        raise AnalyticsError("Calinski-Harabasz needs at least 2 classes")
    if n <= k:
        raise AnalyticsError(f"Calinski-Harabasz needs more samples than classes (n={n}, k={k})")
    cents = _centroids_array(x, inv, k)
    counts = np.bincount(inv, minlength=k)
    between = float((counts * ((cents - x.mean(axis=0)) ** 2).sum(axis=1)).sum())
    within = float(((x - cents[inv]) ** 2).sum())
    if within == 0:
        raise AnalyticsError("zero within-class dispersion")
    return (between / (k - 1)) / (within / (n - k))


def validity_indices(data, labels=None) -> dict[str, float]:
    return {
        "silhouette": silhouette(data, labels),
        "davies_bouldin": davies_bouldin(data, labels),
        "calinski_harabasz": calinski_harabasz(data, labels),
    }


# ---------------------------------------------------------------------------
# report


@dataclass
class ClusterReport:
    centroids: dict[int, np.ndarray]
    intra_stats: dict[int, IntraStats]
    linkage: Linkage
    validity: dict[str, dict[str, float]]
    pca: PcaModel | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "centroids": {str(k): v.tolist() for k, v in self.centroids.items()},
            "intra_stats": {str(k): s.to_json() for k, s in self.intra_stats.items()},
            "linkage": self.linkage.to_json(),
            "validity": self.validity,
            "pca": None if self.pca is None else {
                "k": self.pca.k,
                "explained_variance": self.pca.explained_variance.tolist(),
                "explained_variance_ratio": self.pca.explained_variance_ratio.tolist(),
            },
        }

    def write(self, out_dir: str | Path, label_names: Mapping[int, str] | None = None) -> list[Path]:
        from . import plots

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "cluster_report.json", out / "dendrogram.nwk", out / "intra_class.csv"]
        paths[0].write_text(json.dumps(self.to_json(), indent=2) + "\n")
        paths[1].write_text(self.linkage.to_newick() + "\n")
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["min", "q1", "median", "q3", "max", "mean", "stddev", "whisker_low", "whisker_high"]
            w.writerow(["label_id"] + cols + ["n_outliers"])
            for label, s in self.intra_stats.items():
                w.writerow([label] + [f"{getattr(s, c):.6g}" for c in cols] + [len(s.outliers)])
        svg = out / "dendrogram.svg"
        plots.dendrogram(self.linkage, svg, label_names=label_names)
        box = out / "intra_class_boxplot.svg"
        plots.boxplot(self.intra_stats, box)
        return paths + [svg, box]


def analyze(atlas_set: EmbeddingSet, pca_k: int | None = 50) -> ClusterReport:
    """Centroids, intra-class spread, centroid linkage and validity indices.

    Indices are reported for the full vectors and, when ``pca_k`` is set,
    for the top-``pca_k`` principal components fitted on the same set.
    """
    cents = class_centroids(atlas_set)
    report = ClusterReport(
        centroids=cents,
        intra_stats=intra_class_stats(atlas_set, cents),
        linkage=single_linkage(cents),
        validity={"full": validity_indices(atlas_set)},
    )
    if pca_k:
        model = pca_fit(atlas_set, pca_k)
        report.pca = model
        report.validity[f"pca_{pca_k}"] = validity_indices(model.transform(atlas_set.vectors), atlas_set.labels)
    return report
