"""Area-adaptive patch grids, H&E colour deconvolution and cellularity filtering."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .annotation import AnnotatedRegion

log = logging.getLogger(__name__)

__all__ = [
    "ArrayRaster",
    "ExtractionError",
    "ExtractionResult",
    "GridPlan",
    "PatchFailure",
    "PatchRecord",
    "PatchSpec",
    "RasterReadError",
    "StainMatrix",
    "TileGridRaster",
    "cellularity",
    "deconvolve",
    "extract_patches",
    "inside_fraction",
    "open_raster",
    "plan_grid",
    "read_manifest",
    "synthesize",
    "write_manifest",
]

Image.MAX_IMAGE_PIXELS = None


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 512
    overlap_min: float = 0.20
    overlap_max: float = 0.80
    min_patches_target: int = 32
    cellularity_threshold: float = 0.08
    hematoxylin_od_threshold: float = 0.15
    inside_fraction: float = 0.75
    overlap_step: float = 0.05

    def __post_init__(self) -> None:
        if not 0 <= self.overlap_min < self.overlap_max < 1:
            raise ValueError("need 0 <= overlap_min < overlap_max < 1")
        if not 0 < self.cellularity_threshold < 1:
            raise ValueError("cellularity_threshold must lie in (0, 1)")
        if self.patch_size < 32:
            raise ValueError("patch_size must be >= 32")
        if not 0 <= self.inside_fraction <= 1:
            raise ValueError("inside_fraction must lie in [0, 1]")
        if self.overlap_step <= 0:
            raise ValueError("overlap_step must be positive")
        if self.min_patches_target < 1:
            raise ValueError("min_patches_target must be >= 1")

    def overlap_grid(self) -> list[float]:
        """Overlap fractions tried by plan_grid, ascending, ending at overlap_max."""
        steps = int(math.floor((self.overlap_max - self.overlap_min) / self.overlap_step + 1e-9))
        grid = [round(self.overlap_min + i * self.overlap_step, 10) for i in range(steps + 1)]
        if grid[-1] < self.overlap_max:
            grid.append(self.overlap_max)
        return grid

    def stride(self, overlap: float) -> int:
        return max(1, int(math.floor(self.patch_size * (1.0 - overlap) + 0.5)))


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    slide_id: str
    label_id: int
    origin: tuple[int, int] | None = None
    size: int | None = None
    cellularity: float | None = None
    retained: bool = True

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        if d["origin"] is not None:
            d["origin"] = list(d["origin"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown PatchRecord fields: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("origin") is not None:
            kw["origin"] = (int(kw["origin"][0]), int(kw["origin"][1]))
        kw["label_id"] = int(kw["label_id"])
        kw["patch_id"] = str(kw["patch_id"])
        kw["slide_id"] = str(kw["slide_id"])
        return cls(**kw)


class StainMatrix:
    """Rows are unit optical-density vectors: hematoxylin, eosin, residual."""

    def __init__(self, rows: Sequence[Sequence[float]], normalize: bool = True):
        m = np.asarray(rows, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("stain matrix must be a finite 3x3 array")
        norms = np.linalg.norm(m, axis=1)
        if normalize:
            if np.any(norms == 0):
                raise ValueError("stain vectors must be non-zero")
            m = m / norms[:, None]
        elif np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"stain rows must have unit norm, got {norms}")
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ValueError("stain matrix is singular")
        m.setflags(write=False)
        self.matrix = m
        inv = np.linalg.inv(m)
        inv.setflags(write=False)
        self.inverse = inv

    @classmethod
    def ruifrok_he(cls) -> "StainMatrix":
        return cls([
            (0.650, 0.704, 0.286),
            (0.072, 0.990, 0.105),
            (0.268, 0.570, 0.776),
        ])

    def tolist(self) -> list[list[float]]:
        return self.matrix.tolist()

    def __repr__(self) -> str:
        return f"StainMatrix({np.round(self.matrix, 4).tolist()})"


def deconvolve(rgb: np.ndarray, stains: StainMatrix | None = None) -> np.ndarray:
    """Per-pixel stain concentrations (H x W x 3, channel 0 = hematoxylin)."""
    stains = stains or StainMatrix.ruifrok_he()
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    intensity = np.maximum(rgb[..., :3].astype(np.float64), 1.0)
    od = -np.log10(intensity / 255.0)
    return od @ stains.inverse


def synthesize(concentrations: np.ndarray, stains: StainMatrix | None = None) -> np.ndarray:
    """Inverse of :func:`deconvolve`: float RGB intensities from concentrations."""
    stains = stains or StainMatrix.ruifrok_he()
    return 255.0 * np.power(10.0, -(np.asarray(concentrations, dtype=np.float64) @ stains.matrix))


def cellularity(
    rgb: np.ndarray,
    spec: PatchSpec | None = None,
    stains: StainMatrix | None = None,
) -> float:
    spec = spec or PatchSpec()
    h = deconvolve(rgb, stains)[..., 0]
    if h.size == 0:
        return 0.0
    return float(np.count_nonzero(h > spec.hematoxylin_od_threshold)) / h.size


# ---------------------------------------------------------------------------
# grid planning


class _RowSpans:
    """Even-odd scanline rasterisation of a polygon, sampled at pixel centres.

    For each image row the inside pixel columns form closed integer spans
    [lo, hi]; counting inside pixels of any axis-aligned window is then a
    clip-and-sum over spans.
    """

    def __init__(self, vertices: Sequence[tuple[float, float]], y0: int, y1: int):
        self.y0 = y0
        v = np.asarray(vertices, dtype=np.float64)
        ax, ay = v[:, 0], v[:, 1]
        bx, by = np.roll(ax, -1), np.roll(ay, -1)
        rows = []
        max_spans = 0
        for y in range(y0, y1):
            yc = y + 0.5
            hit = (ay > yc) != (by > yc)
            xs = np.sort(ax[hit] + (yc - ay[hit]) * (bx[hit] - ax[hit]) / (by[hit] - ay[hit]))
            lo = np.ceil(xs[0::2] - 0.5).astype(np.int64)
            hi = np.floor(xs[1::2] - 0.5).astype(np.int64)
            rows.append((lo, hi))
            max_spans = max(max_spans, len(lo))
        n = len(rows)
        self.lo = np.zeros((n, max(max_spans, 1)), dtype=np.int64)
        self.hi = np.full((n, max(max_spans, 1)), -1, dtype=np.int64)
        for i, (lo, hi) in enumerate(rows):
            self.lo[i, : len(lo)] = lo
            self.hi[i, : len(hi)] = hi

    def _below(self, rows: slice, x: int) -> np.ndarray:
        lo, hi = self.lo[rows], self.hi[rows]
        return np.clip(x - lo, 0, np.maximum(hi - lo + 1, 0)).sum(axis=1)

    def count(self, x: int, y: int, w: int, h: int) -> int:
        r0 = max(y - self.y0, 0)
        r1 = max(min(y + h - self.y0, self.lo.shape[0]), r0)
        rows = slice(r0, r1)
        return int((self._below(rows, x + w) - self._below(rows, x)).sum())


def inside_fraction(region: AnnotatedRegion, x: int, y: int, size: int) -> float:
    """Fraction of the size x size window's pixel centres inside the region."""
    spans = _RowSpans(region.vertices, y, y + size)
    return spans.count(x, y, size, size) / float(size * size)


@dataclass(frozen=True)
class GridPlan:
    origins: list[tuple[int, int]]
    overlap: float | None
    stride: int | None


def _axis_positions(start: int, length: int, patch: int, stride: int) -> list[int]:
    if length < patch:
        return []
    return [start + i * stride for i in range((length - patch) // stride + 1)]


def plan_grid(
    region: AnnotatedRegion,
    spec: PatchSpec | None = None,
    image_size: tuple[int, int] | None = None,
    overlap: float | None = None,
) -> GridPlan:
    """Candidate patch origins for one region.

    The overlap is the smallest value on ``spec.overlap_grid()`` whose grid
    yields at least ``min_patches_target`` patches passing the inside-fraction
    test; if none does, ``overlap_max`` is used. Passing ``overlap`` pins it.
    """
    spec = spec or PatchSpec()
    p = spec.patch_size
    minx, miny, maxx, maxy = region.bbox
    x0, y0 = int(math.floor(minx)), int(math.floor(miny))
    x1, y1 = int(math.ceil(maxx)), int(math.ceil(maxy))
    if image_size is not None:
        img_w, img_h = image_size
        if x0 >= img_w or y0 >= img_h or x1 <= 0 or y1 <= 0:
            raise ValueError(
                f"region {region.region_id!r} lies entirely outside the {img_w}x{img_h} image"
            )
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, img_w), min(y1, img_h)
    w, h = x1 - x0, y1 - y0

    if w < p or h < p:
        ox = int(math.floor((x0 + x1) / 2.0 - p / 2.0 + 0.5))
        oy = int(math.floor((y0 + y1) / 2.0 - p / 2.0 + 0.5))
        if image_size is not None:
            ox = min(max(ox, 0), max(image_size[0] - p, 0))
            oy = min(max(oy, 0), max(image_size[1] - p, 0))
        return GridPlan([(max(ox, 0), max(oy, 0))], None, None)

    spans = _RowSpans(region.vertices, y0, y1)
    need = spec.inside_fraction * p * p
    chosen: GridPlan | None = None
    for o in ([overlap] if overlap is not None else spec.overlap_grid()):
        stride = spec.stride(o)
        origins = [
            (x, y)
            for x in _axis_positions(x0, w, p, stride)
            for y in _axis_positions(y0, h, p, stride)
            if spans.count(x, y, p, p) >= need
        ]
        chosen = GridPlan(origins, o, stride)
        if len(origins) >= spec.min_patches_target:
            break
    assert chosen is not None
    return chosen


# ---------------------------------------------------------------------------
# rasters


class RasterReadError(IOError):
    pass


class ArrayRaster:
    """In-memory RGB raster."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] < 3:
            raise ValueError(f"expected H x W x 3 pixels, got {pixels.shape}")
        self.pixels = pixels[..., :3]

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        W, H = self.size
        if x < 0 or y < 0 or x + w > W or y + h > H:
            # pad with white outside the raster
            out = np.full((h, w, 3), 255, dtype=self.pixels.dtype)
            sx0, sy0 = max(x, 0), max(y, 0)
            sx1, sy1 = min(x + w, W), min(y + h, H)
            if sx1 > sx0 and sy1 > sy0:
                out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = self.pixels[sy0:sy1, sx0:sx1]
            return out
        return self.pixels[y : y + h, x : x + w]


_TILE_RE = re.compile(r"^(?P<slide>.+)_r(?P<row>\d+)_c(?P<col>\d+)\.(png|tif|tiff)$", re.IGNORECASE)


class TileGridRaster:
    """A slide exported as equally sized tiles named ``<slide>_r<row>_c<col>.png``."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.tiles: dict[tuple[int, int], Path] = {}
        slides = set()
        for path in sorted(self.directory.iterdir()):
            m = _TILE_RE.match(path.name)
            if m:
                self.tiles[(int(m["row"]), int(m["col"]))] = path
                slides.add(m["slide"])
        if not self.tiles:
            raise RasterReadError(f"no tiles matching <slide>_r<row>_c<col>.png in {self.directory}")
        if len(slides) > 1:
            raise RasterReadError(f"tiles from several slides in {self.directory}: {sorted(slides)}")
        self.slide_id = slides.pop()
        first = self.tiles[min(self.tiles)]
        with Image.open(first) as im:
            self.tile_w, self.tile_h = im.size
        self.n_rows = max(r for r, _ in self.tiles) + 1
        self.n_cols = max(c for _, c in self.tiles) + 1
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def size(self) -> tuple[int, int]:
        return self.n_cols * self.tile_w, self.n_rows * self.tile_h

    def _tile(self, row: int, col: int) -> np.ndarray:
        key = (row, col)
        if key not in self._cache:
            path = self.tiles.get(key)
            if path is None:
                raise RasterReadError(f"missing tile r{row} c{col} in {self.directory}")
            try:
                with Image.open(path) as im:
                    self._cache[key] = np.asarray(im.convert("RGB"))
            except OSError as exc:
                raise RasterReadError(f"unreadable tile {path}: {exc}") from exc
        return self._cache[key]

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        out = np.full((h, w, 3), 255, dtype=np.uint8)
        for row in range(max(y, 0) // self.tile_h, min((y + h - 1) // self.tile_h, self.n_rows - 1) + 1):
            for col in range(max(x, 0) // self.tile_w, min((x + w - 1) // self.tile_w, self.n_cols - 1) + 1):
                tile = self._tile(row, col)
                tx, ty = col * self.tile_w, row * self.tile_h
                sx0, sy0 = max(x, tx), max(y, ty)
                sx1, sy1 = min(x + w, tx + self.tile_w), min(y + h, ty + self.tile_h)
                out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = tile[sy0 - ty : sy1 - ty, sx0 - tx : sx1 - tx]
        return out


def open_raster(path: str | Path):
    path = Path(path)
    if path.is_dir():
        return TileGridRaster(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            return ArrayRaster(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise RasterReadError(f"unreadable image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# extraction


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchFailure:
    patch_id: str
    error: str


@dataclass
class ExtractionResult:
    records: list[PatchRecord] = field(default_factory=list)
    failures: list[PatchFailure] = field(default_factory=list)

    @property
    def retained(self) -> list[PatchRecord]:
        return [r for r in self.records if r.retained]


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "-", name).strip("-") or "region"


def extract_patches(
    raster,
    regions: Iterable[AnnotatedRegion],
    spec: PatchSpec | None = None,
    stains: StainMatrix | None = None,
    patch_dir: str | Path | None = None,
    max_failure_rate: float = 0.10,
) -> ExtractionResult:
    """Plan, read and score patches for every region.

    Records come out ordered by (region_id, origin). When ``patch_dir`` is
    given, retained patches are written there as ``<patch_id>.png``.
    """
    spec = spec or PatchSpec()
    stains = stains or StainMatrix.ruifrok_he()
    if patch_dir is not None:
        patch_dir = Path(patch_dir)
        patch_dir.mkdir(parents=True, exist_ok=True)

    result = ExtractionResult()
    attempted = 0
    p = spec.patch_size
    for region in sorted(regions, key=lambda r: r.region_id):
        plan = plan_grid(region, spec, raster.size)
        for x, y in sorted(plan.origins):
            attempted += 1
            patch_id = f"{region.slide_id or 'slide'}_{_safe(region.region_id)}_{x}_{y}"
            try:
                pixels = raster.read_region(x, y, p, p)
            except (OSError, ValueError) as exc:
                result.failures.append(PatchFailure(patch_id, str(exc)))
                continue
            cell = cellularity(pixels, spec, stains)
            rec = PatchRecord(
                patch_id=patch_id,
                slide_id=region.slide_id,
                label_id=region.label_id,
                origin=(x, y),
                size=p,
                cellularity=cell,
                retained=cell > spec.cellularity_threshold,
            )
            result.records.append(rec)
            if rec.retained and patch_dir is not None:
                Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(patch_dir / f"{patch_id}.png")
    if attempted and len(result.failures) / attempted > max_failure_rate:
        raise ExtractionError(
            f"{len(result.failures)} of {attempted} patches failed "
            f"(limit {max_failure_rate:.0%}); first: {result.failures[0].error}"
        )
    log.info("retained %d / candidates %d", len(result.retained), len(result.records))
    return result


def write_manifest(records: Iterable[PatchRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def read_manifest(path: str | Path) -> list[PatchRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PatchRecord.from_json(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
    return out
