"""Static SVG figures: confusion heatmaps, dendrogram, box plots, scatter maps.

SVG output is made byte-reproducible by pinning matplotlib's id salt and
dropping the date metadata.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: str | Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "histoatlas", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)


def confusion_heatmap(matrix: np.ndarray, labels: Sequence[int], path, title: str = "") -> None:
    m = np.asarray(matrix, dtype=np.float64)
    support = m.sum(axis=1, keepdims=True)
    rel = np.divide(m, support, out=np.zeros_like(m), where=support > 0)
    size = max(4.0, 0.25 * len(labels) + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(rel, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(labels)), [str(x) for x in labels], rotation=90, fontsize=7)
    ax.set_yticks(range(len(labels)), [str(x) for x in labels], fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, label="row fraction")
    _save(fig, path)


def _leaf_order(linkage) -> list[int]:
    n = len(linkage.leaves)
    children = {n + i: (m.left, m.right) for i, m in enumerate(linkage.merges)}
    order, stack = [], [n + len(linkage.merges) - 1]
    while stack:
        node = stack.pop()
        if node < n:
            order.append(node)
        else:
            left, right = children[node]
            stack.extend([right, left])
    return order


def dendrogram(linkage, path, label_names: Mapping[int, str] | None = None) -> None:
    n = len(linkage.leaves)
    order = _leaf_order(linkage)
    xpos = {leaf: float(i) for i, leaf in enumerate(order)}
    ypos = {leaf: 0.0 for leaf in range(n)}
    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * n + 2), 4.5))
    for i, m in enumerate(linkage.merges):
        node = n + i
        xl, xr = xpos[m.left], xpos[m.right]
        ax.plot([xl, xl, xr, xr], [ypos[m.left], m.height, m.height, ypos[m.right]], color="k", lw=0.8)
        xpos[node] = 0.5 * (xl + xr)
        ypos[node] = m.height
    names = [str(linkage.leaves[i]) for i in order]
    if label_names:
        names = [f"{label_names.get(linkage.leaves[i], '')} ({linkage.leaves[i]})".strip() for i in order]
    ax.set_xticks(range(n), names, rotation=90, fontsize=7)
    ax.set_ylabel("single-linkage distance")
    ax.set_xlim(-0.5, n - 0.5)
    _save(fig, path)


def boxplot(intra_stats: Mapping[int, object], path) -> None:
    stats = []
    for label, s in intra_stats.items():
        stats.append({
            "label": str(label), "med": s.median, "q1": s.q1, "q3": s.q3,
            "whislo": s.whisker_low, "whishi": s.whisker_high, "mean": s.mean,
            "fliers": [d for _, d in s.outliers],
        })
    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * len(stats) + 2), 4.0))
    ax.bxp(stats, showmeans=True, flierprops={"markersize": 2})
    ax.set_xlabel("class")
    ax.set_ylabel("distance to class centroid")
    ax.tick_params(axis="x", labelrotation=90, labelsize=7)
    _save(fig, path)


def scatter(coords: np.ndarray, labels: Sequence[int], path, is_test: Sequence[bool] | None = None,
            title: str = "") -> None:
    coords = np.asarray(coords)
    labels = np.asarray(labels)
    flags = np.zeros(len(labels), dtype=bool) if is_test is None else np.asarray(is_test, dtype=bool)
    uniq = sorted(set(labels[~flags].tolist()))
    cmap = plt.get_cmap("tab20" if len(uniq) <= 20 else "gist_ncar")
    fig, ax = plt.subplots(figsize=(8, 6.5))
    for i, label in enumerate(uniq):
        sel = (labels == label) & ~flags
        ax.scatter(coords[sel, 0], coords[sel, 1], s=4, color=cmap(i / max(len(uniq) - 1, 1)), label=str(label))
    if flags.any():
        ax.scatter(coords[flags, 0], coords[flags, 1], s=6, facecolors="none", edgecolors="red",
                   linewidths=0.5, label="test")
    ax.legend(fontsize=6, markerscale=2, ncol=2 if len(uniq) > 18 else 1, loc="center left",
              bbox_to_anchor=(1.0, 0.5))
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    _save(fig, path)
