"""ASAP polygon annotations: parsing, validation and geometry queries.

Regions are kept as plain vertex tuples; geometry is computed with the
shoelace formula (area) and an even-odd ray cast (containment).
"""

from __future__ import annotations

import json
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AnnotatedRegion",
    "AnnotationError",
    "LabelTable",
    "ParsedAnnotations",
    "RejectedRegion",
    "REFERENCE_TAXONOMY",
    "contains",
    "parse_annotations",
    "polygon_area",
    "serialize_annotations",
]

# WHO breast tumour taxonomy, index == label_id.
REFERENCE_TAXONOMY: tuple[str, ...] = (
    "Acinic Cell Carcinoma",
    "Adenoid Cystic Carcinoma",
    "Adenomyoepithelioma",
    "Apocrine Adenosis and Adenoma",
    "Atypical Ductal Hyperplasia",
    "Atypical Lobular Hyperplasia",
    "Carcinoma with Apocrine Differentiation",
    "Columnar Cell Lesions, Including Flat Epithelial Atypia",
    "Cribriform Carcinoma",
    "Ductal Adenoma",
    "Ductal Carcinoma in Situ",
    "Encapsulated Papillary Carcinoma",
    "Intraductal Papilloma",
    "Invasive Breast Carcinoma of No Special Type",
    "Invasive Lobular Carcinoma",
    "Invasive micropapillary Carcinoma",
    "Invasive Papillary Carcinoma",
    "Lactating Adenoma",
    "Lobular Carcinoma in Situ",
    "Malignant Adenomyoepithelioma",
    "Metplastic Carcinoma",
    "Microglandular Adenosis",
    "Microinvasive Carcinoma",
    "Mucinous Carcinoma",
    "Mucinous Cystadenocarcinoma",
    "Neuroendocrine Carcinoma",
    "Neuroendocrine Tumor",
    "Papillary Ductal Carcinoma in Situ",
    "Pleomorphic Adenoma",
    "Radial Scar / Complex Sclerosing Lesion",
    "Sclerosing Adenosis",
    "Secretory Carcinoma",
    "Solid Papillary Carcinoma (in Situ and Invasive)",
    "Tubular Adenoma",
    "Tubular Carcinoma",
)


class AnnotationError(ValueError):
    """Raised for malformed annotation XML or unmappable labels."""


def _normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name).strip().casefold()


@dataclass(frozen=True)
class LabelTable:
    """Mapping label_id -> diagnosis name with contiguous integer ids."""

    entries: Mapping[int, str]

    def __post_init__(self) -> None:
        ids = sorted(self.entries)
        if not ids:
            raise ValueError("label table is empty")
        if ids != list(range(ids[0], ids[0] + len(ids))):
            raise ValueError(f"label ids must be contiguous, got {ids}")
        seen: dict[str, int] = {}
        for label_id in ids:
            key = _normalize_name(self.entries[label_id])
            if key in seen:
                raise ValueError(
                    f"duplicate label name {self.entries[label_id]!r} "
                    f"for ids {seen[key]} and {label_id}"
                )
            seen[key] = label_id
        object.__setattr__(self, "entries", {i: self.entries[i] for i in ids})
        object.__setattr__(self, "_by_name", seen)

    @classmethod
    def reference(cls) -> "LabelTable":
        return cls(dict(enumerate(REFERENCE_TAXONOMY)))

    @classmethod
    def from_json(cls, path: str | Path) -> "LabelTable":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Mapping[str, str]) -> "LabelTable":
        return cls({int(k): str(v) for k, v in raw.items()})

    def to_dict(self) -> dict[str, str]:
        return {str(k): v for k, v in self.entries.items()}

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @property
    def ids(self) -> list[int]:
        return list(self.entries)

    def __contains__(self, label_id: object) -> bool:
        return label_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, name: str) -> int:
        """Resolve a group name (case/whitespace-insensitive) to its label id."""
        try:
            return self._by_name[_normalize_name(name)]  # type: ignore[attr-defined]
        except KeyError:
            known = ", ".join(repr(v) for v in self.entries.values())
            raise AnnotationError(
                f"unknown annotation group {name!r}; known labels: {known}"
            ) from None


@dataclass(frozen=True)
class AnnotatedRegion:
    region_id: str
    label_id: int
    vertices: tuple[tuple[float, float], ...]
    slide_id: str = ""

    def __post_init__(self) -> None:
        problem = _geometry_problem(self.vertices)
        if problem:
            raise ValueError(f"region {self.region_id!r}: {problem}")

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y)."""
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass(frozen=True)
class RejectedRegion:
    name: str
    group: str
    reason: str


@dataclass
class ParsedAnnotations:
    regions: list[AnnotatedRegion] = field(default_factory=list)
    rejected: list[RejectedRegion] = field(default_factory=list)


def _shoelace(vertices: Sequence[tuple[float, float]]) -> float:
    xy = np.asarray(vertices, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _geometry_problem(vertices: Sequence[tuple[float, float]]) -> str | None:
    if len(vertices) < 3:
        return f"polygon has {len(vertices)} vertices, need at least 3"
    for x, y in vertices:
        if not (math.isfinite(x) and math.isfinite(y)):
            return "non-finite coordinate"
        if x < 0 or y < 0:
            return "negative coordinate"
    if abs(_shoelace(vertices)) <= 0.0:
        return "degenerate polygon (zero area)"
    return None


def polygon_area(region: AnnotatedRegion) -> float:
    return abs(_shoelace(region.vertices))


def _on_segment(px, py, ax, ay, bx, by) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if cross != 0.0:
        return False
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def contains(region: AnnotatedRegion, point: tuple[float, float]) -> bool:
    """Even-odd containment test; points on an edge count as inside."""
    px, py = float(point[0]), float(point[1])
    verts = region.vertices
    inside = False
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        if _on_segment(px, py, ax, ay, bx, by):
            return True
        if (ay > py) != (by > py):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_cross:
                inside = not inside
    return inside


def _element_context(elem: ET.Element) -> str:
    return f"<{elem.tag} Name={elem.get('Name')!r}>"


def parse_annotations(
    xml_bytes: bytes | str,
    label_table: LabelTable,
    slide_id: str = "",
) -> ParsedAnnotations:
    """Parse ASAP annotation XML into validated regions.

    Polygons that fail geometry validation and non-polygon annotation types
    end up in ``rejected``; an unknown group name raises immediately.
    """
    if isinstance(xml_bytes, str):
        xml_bytes = xml_bytes.encode("utf-8")
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationError(f"malformed XML at line {line}, column {col}: {exc}") from exc

    out = ParsedAnnotations()
    for idx, ann in enumerate(root.iter("Annotation")):
        name = ann.get("Name") or f"Annotation {idx}"
        group = ann.get("PartOfGroup") or ""
        ann_type = ann.get("Type", "Polygon")
        if ann_type != "Polygon":
            out.rejected.append(RejectedRegion(name, group, f"unsupported type {ann_type!r}"))
            continue
        label_id = label_table.lookup(group)

        coords = []
        for c in ann.iter("Coordinate"):
            try:
                coords.append((int(c.get("Order", len(coords))), float(c.get("X")), float(c.get("Y"))))
            except (TypeError, ValueError) as exc:
                raise AnnotationError(
                    f"bad Coordinate in {_element_context(ann)}: {c.attrib}"
                ) from exc
        coords.sort(key=lambda t: t[0])
        vertices = tuple((x, y) for _, x, y in coords)

        problem = _geometry_problem(vertices)
        if problem:
            out.rejected.append(RejectedRegion(name, group, problem))
            continue
        out.regions.append(AnnotatedRegion(name, label_id, vertices, slide_id))
    return out


def serialize_annotations(regions: Iterable[AnnotatedRegion], label_table: LabelTable) -> bytes:
    """Write regions back out in the ASAP XML schema."""
    root = ET.Element("ASAP_Annotations")
    anns = ET.SubElement(root, "Annotations")
    groups: dict[int, str] = {}
    for region in regions:
        group = label_table.entries[region.label_id]
        groups[region.label_id] = group
        ann = ET.SubElement(
            anns,
            "Annotation",
            Name=region.region_id,
            Type="Polygon",
            PartOfGroup=group,
            Color="#F4FA58",
        )
        coords = ET.SubElement(ann, "Coordinates")
        for order, (x, y) in enumerate(region.vertices):
            ET.SubElement(coords, "Coordinate", Order=str(order), X=repr(float(x)), Y=repr(float(y)))
    groups_el = ET.SubElement(root, "AnnotationGroups")
    for label_id in sorted(groups):
        ET.SubElement(groups_el, "Group", Name=groups[label_id], PartOfGroup="None", Color="#64FE2E")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)
