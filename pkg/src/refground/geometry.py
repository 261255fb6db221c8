"""Pure bounding-box algebra.

Pixel boxes use the detector-native convention: origin at the image top-left
corner, y growing downward, corners as (x_min, y_min, x_max, y_max).
Normalized boxes use a bottom-left origin (y growing upward) and the
center-based (center_x, center_y, width, height) layout, every field a
fraction of the image dimensions rounded half-up to three decimals. The
y-axis flip happens in exactly one place: :func:`normalize`.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import BoxOutsideImageError, GeometryError

__all__ = [
    "ImageDims",
    "PixelBox",
    "NormalizedBox",
    "iou",
    "area_fraction",
    "filter_by_area",
    "nms",
    "nms_indices",
    "sort_by_area_desc",
    "normalize",
    "denormalize",
]


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image dims must be >= 1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in pixel coordinates, top-left origin."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self.as_list()}")
        if min(self.x_min, self.y_min) < 0:
            raise GeometryError(f"negative coordinates in {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def _round3(value: float) -> float:
    # Half-up, fixed so a coordinate has exactly one 3-decimal rendering.
    return float(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class NormalizedBox:
    """Center-based box as fractions of the image, bottom-left origin.

    Fields are pre-rounded to three decimals; ``format_fields`` is the one
    serialization used when boxes are rendered into prompt text.
    """

    center_x: float
    center_y: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("center_x", "center_y"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GeometryError(f"{name}={v} outside [0, 1]")
        for name in ("width", "height"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise GeometryError(f"{name}={v} outside (0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.center_x, self.center_y, self.width, self.height)

    def format_fields(self) -> tuple[str, str, str, str]:
        """Each field rendered with exactly three decimals."""
        return tuple(f"{v:.3f}" for v in self.as_tuple())


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union; 0.0 when the boxes are disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def _check_within(box: PixelBox, dims: ImageDims) -> None:
    if box.x_max > dims.width or box.y_max > dims.height:
        raise BoxOutsideImageError(
            f"box {box.as_list()} exceeds image {dims.width}x{dims.height}"
        )


def area_fraction(box: PixelBox, dims: ImageDims) -> float:
    """Box area as a fraction of the image area."""
    _check_within(box, dims)
    return box.area / (dims.width * dims.height)


def filter_by_area(
    boxes: list[PixelBox], dims: ImageDims, min_fraction: float = 0.025
) -> list[PixelBox]:
    """Keep boxes covering at least ``min_fraction`` of the image.

    The boundary is inclusive: a box at exactly the threshold survives.
    Input order is preserved.
    """
    if not 0.0 <= min_fraction < 1.0:
        raise GeometryError(f"min_fraction={min_fraction} outside [0, 1)")
    return [b for b in boxes if area_fraction(b, dims) >= min_fraction]


def sort_by_area_desc(boxes: list[PixelBox]) -> list[PixelBox]:
    """Stable sort, largest area first; equal areas keep input order."""
    return sorted(boxes, key=lambda b: -b.area)


def nms_indices(boxes: list[PixelBox], iou_threshold: float) -> list[int]:
    """Greedy NMS with box area as the priority score.

    Returns indices into ``boxes`` ordered by descending area (ties keep
    input order). A box is suppressed when its IoU with any already-kept
    box strictly exceeds the threshold. No detector score is involved:
    area is the only ranking signal this pipeline admits.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise GeometryError(f"iou_threshold={iou_threshold} outside (0, 1]")
    n = len(boxes)
    if n == 0:
        return []
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    x0, y0, x1, y1 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    areas = (x1 - x0) * (y1 - y0)
    order = np.argsort(-areas, kind="stable")
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        ix = np.minimum(x1[i], x1) - np.maximum(x0[i], x0)
        iy = np.minimum(y1[i], y1) - np.maximum(y0[i], y0)
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        overlap = inter / (areas[i] + areas - inter)
        suppressed |= overlap > iou_threshold
    return keep


def nms(boxes: list[PixelBox], iou_threshold: float) -> list[PixelBox]:
    """Greedy area-priority NMS; see :func:`nms_indices`."""
    return [boxes[i] for i in nms_indices(boxes, iou_threshold)]


def normalize(box: PixelBox, dims: ImageDims) -> NormalizedBox:
    """Convert a pixel box to the normalized bottom-left-origin format.

    The vertical flip happens here and only here: a box hugging the image
    top edge gets center_y near 1.0.
    """
    _check_within(box, dims)
    cx = (box.x_min + box.x_max) / 2.0 / dims.width
    cy = (dims.height - (box.y_min + box.y_max) / 2.0) / dims.height
    return NormalizedBox(
        center_x=_round3(cx),
        center_y=_round3(cy),
        width=_round3(box.width / dims.width),
        height=_round3(box.height / dims.height),
    )


def denormalize(box: NormalizedBox, dims: ImageDims) -> PixelBox:
    """Inverse of :func:`normalize` up to the 3-decimal rounding."""
    cx_px = box.center_x * dims.width
    cy_px = dims.height - box.center_y * dims.height
    w_px = box.width * dims.width
    h_px = box.height * dims.height
    return PixelBox(
        x_min=max(0.0, cx_px - w_px / 2.0),
        y_min=max(0.0, cy_px - h_px / 2.0),
        x_max=min(float(dims.width), cx_px + w_px / 2.0),
        y_max=min(float(dims.height), cy_px + h_px / 2.0),
    )
