"""Pixel-grid geometry: run-length masks, boxes and disease/anatomy relations."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

ANATOMIES: tuple[str, ...] = (
    "right upper lung",
    "right middle lung",
    "right lower lung",
    "left upper lung",
    "left middle lung",
    "left lower lung",
    "mediastinum",
    "heart",
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PixelMask:
    """Binary mask stored as sorted ``(start, length)`` runs over row-major pixels."""

    width: int
    height: int
    runs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple((int(s), int(n)) for s, n in self.runs))
        total = self.width * self.height
        prev_end = 0
        for start, length in self.runs:
            if length <= 0 or start < prev_end or start + length > total:
                raise GeometryError(f"invalid run ({start}, {length}) for {self.width}x{self.height} mask")
            prev_end = start + length

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "runs": [list(r) for r in self.runs]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PixelMask":
        return cls(int(d["width"]), int(d["height"]), tuple(tuple(r) for r in d["runs"]))


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive-exclusive pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise GeometryError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def fits(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def to_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class SceneAnnotation:
    scene_id: str
    image: np.ndarray  # (height, width) float64 in [0, 1]
    anatomies: dict[str, PixelMask]
    diseases: list[tuple[str, BoundingBox]] = field(default_factory=list)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def validate(self) -> None:
        if set(self.anatomies) != set(ANATOMIES):
            raise GeometryError(f"scene {self.scene_id}: anatomy labels must be exactly {ANATOMIES}")
        for label, mask in self.anatomies.items():
            if (mask.width, mask.height) != (self.width, self.height):
                raise GeometryError(f"scene {self.scene_id}: mask {label!r} does not match image grid")
        for label, box in self.diseases:
            if not box.fits(self.width, self.height):
                raise GeometryError(f"scene {self.scene_id}: box for {label!r} exceeds image grid")


@dataclass(frozen=True)
class RelationMap:
    scene_id: str
    pairs: frozenset[tuple[str, str]] = frozenset()

    def diseases_at(self, anatomy: str) -> list[str]:
        return sorted(d for a, d in self.pairs if a == anatomy)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs


def rle_encode(bits: np.ndarray) -> PixelMask:
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise GeometryError("expected a 2-D grid")
    height, width = bits.shape
    flat = bits.reshape(-1).astype(bool)
    padded = np.concatenate([[False], flat, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return PixelMask(width, height, tuple(zip(starts.tolist(), (ends - starts).tolist())))


def rle_decode(mask: PixelMask) -> np.ndarray:
    flat = np.zeros(mask.width * mask.height, dtype=bool)
    for start, length in mask.runs:
        flat[start:start + length] = True
    return flat.reshape(mask.height, mask.width)


def mask_area(mask: PixelMask) -> int:
    return sum(length for _, length in mask.runs)


def box_mask(box: BoundingBox, width: int, height: int) -> PixelMask:
    if not box.fits(width, height):
        raise GeometryError(f"box {box} exceeds {width}x{height} grid")
    runs = tuple((y * width + box.x0, box.x1 - box.x0) for y in range(box.y0, box.y1))
    return PixelMask(width, height, runs)


def intersection_with_box(box: BoundingBox, mask: PixelMask) -> int:
    """Number of mask pixels inside ``box``, computed run by run."""
    w = mask.width
    total = 0
    for start, length in mask.runs:
        end = start + length
        row_a, row_b = start // w, (end - 1) // w
        for row in range(max(row_a, box.y0), min(row_b, box.y1 - 1) + 1):
            lo = max(start, row * w + box.x0)
            hi = min(end, row * w + box.x1)
            if hi > lo:
                total += hi - lo
    return total


def iou_over_disease(box: BoundingBox, mask: PixelMask) -> float:
    """Fraction of the disease box covered by the anatomy mask."""
    return float(iou_over_disease_exact(box, mask))


def iou_over_disease_exact(box: BoundingBox, mask: PixelMask) -> Fraction:
    if not box.fits(mask.width, mask.height):
        raise GeometryError(f"box {box.to_list()} does not fit {mask.width}x{mask.height} mask")
    return Fraction(intersection_with_box(box, mask), box.area)


def map_relations(scene: SceneAnnotation, delta: float = 0.5) -> RelationMap:
    """Pairs ``(anatomy, disease)`` whose box overlap strictly exceeds ``delta``."""
    threshold = Fraction(delta)
    pairs = set()
    for disease, box in scene.diseases:
        for anatomy, mask in scene.anatomies.items():
            if iou_over_disease_exact(box, mask) > threshold:
                pairs.add((anatomy, disease))
    return RelationMap(scene.scene_id, frozenset(pairs))


def relations_to_dict(rel: RelationMap) -> dict:
    return {"scene_id": rel.scene_id, "pairs": [list(p) for p in sorted(rel.pairs)]}


def relations_from_dict(d: Mapping) -> RelationMap:
    return RelationMap(d["scene_id"], frozenset((a, b) for a, b in d["pairs"]))


def bounding_rect(mask: PixelMask) -> BoundingBox | None:
    bits = rle_decode(mask)
    ys, xs = np.nonzero(bits)
    if len(ys) == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
