"""Synthetic fixtures: Gaussian class embeddings and painted H&E-like slides."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .annotation import AnnotatedRegion, LabelTable, REFERENCE_TAXONOMY, serialize_annotations
from .embedding_io import EmbeddingSet, write_embeddings
from .patching import PatchRecord, StainMatrix, synthesize


def simplex_centers(n_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class centres on scaled coordinate axes; every pair is ``separation`` apart."""
    if n_classes > dim:
        raise ValueError("need dim >= n_classes")
    centers = np.zeros((n_classes, dim))
    centers[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2.0)
    return centers


def gaussian_classes(
    centers: np.ndarray,
    n: int,
    sigma: float,
    rng: np.random.Generator,
    prefix: str = "p",
    labels: Sequence[int] | None = None,
    slide_per_class: bool = True,
) -> EmbeddingSet:
    """``n`` isotropic Gaussian draws spread round-robin over the classes."""
    k, dim = centers.shape
    labels = list(range(k)) if labels is None else list(labels)
    cls = np.arange(n) % k
    x = centers[cls] + rng.normal(0.0, sigma, size=(n, dim))
    records = [
        PatchRecord(
            patch_id=f"{prefix}{i:06d}",
            slide_id=f"{prefix}slide{labels[c]}" if slide_per_class else f"{prefix}slide",
            label_id=labels[c],
        )
        for i, c in enumerate(cls)
    ]
    return EmbeddingSet(x, records)


def painted_slide(
    size: tuple[int, int],
    regions: Sequence[tuple[Sequence[tuple[float, float]], float]],
    seed: int = 0,
    stains: StainMatrix | None = None,
) -> np.ndarray:
    """White slide with polygons painted as eosin tissue plus hematoxylin nuclei.

    Each region is (vertices, nucleus_fraction): the fraction of its pixels
    that carry a strong hematoxylin signal.
    """
    from matplotlib.path import Path as MplPath

    stains = stains or StainMatrix.ruifrok_he()
    w, h = size
    rng = np.random.default_rng(seed)
    conc = np.zeros((h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    centres = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    for vertices, frac in regions:
        inside = MplPath(np.asarray(vertices, dtype=float)).contains_points(centres).reshape(h, w)
        conc[inside, 1] = 0.3
        nuclei = inside & (rng.random((h, w)) < frac)
        conc[nuclei, 0] = 1.0
    rgb = synthesize(conc, stains)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_demo_fixture(out_dir: str | Path, seed: int = 0) -> dict[str, Path]:
    """Small end-to-end fixture: label table, atlas/test embeddings, slide + annotations."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = LabelTable({i: REFERENCE_TAXONOMY[i] for i in range(5)})
    centers = simplex_centers(5, 64, 10.0)
    atlas = gaussian_classes(centers, 2000, 1.0, rng, prefix="atlas")
    test = gaussian_classes(centers, 500, 1.0, rng, prefix="test")

    paths = {
        "labels": out / "labels.json",
        "atlas_embeddings": out / "atlas.emb",
        "test_embeddings": out / "test.emb",
        "slide": out / "slide.png",
        "annotations": out / "annotations.xml",
    }
    labels.to_json(paths["labels"])
    write_embeddings(atlas, paths["atlas_embeddings"])
    write_embeddings(test, paths["test_embeddings"])

    cellular = ((64, 64), (1088, 64), (1088, 1088), (64, 1088))
    pale = ((1200, 200), (1900, 200), (1900, 900), (1200, 900))
    tiny = ((1300, 1300), (1500, 1300), (1400, 1480))
    img = painted_slide((2048, 2048), [(cellular, 0.25), (pale, 0.01), (tiny, 0.3)], seed=seed)
    Image.fromarray(img).save(paths["slide"])
    regions = [
        AnnotatedRegion("cellular", 0, cellular, "demo"),
        AnnotatedRegion("pale", 1, pale, "demo"),
        AnnotatedRegion("tiny", 2, tiny, "demo"),
    ]
    paths["annotations"].write_bytes(serialize_annotations(regions, labels))
    return paths
