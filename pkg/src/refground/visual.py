"""Raster visual prompt: red outline on the target box, blurred background.

Pixel contract: every pixel covered by the box keeps its original value, a
band of ``outline_width`` pixels just outside the box is painted the outline
color, and everything beyond the band is Gaussian-blurred. The blur kernel
is truncated at three standard deviations with edge-clamp padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, floor

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import GeometryError
from .gateway import ImagePayload
from .geometry import PixelBox


@dataclass(frozen=True)
class VisualPromptSpec:
    outline_color: tuple[int, int, int] = (255, 0, 0)
    outline_width: int = 3
    blur_sigma: float = 10.0

    def __post_init__(self):
        if self.outline_width < 1:
            raise GeometryError("outline_width must be >= 1")
        if self.blur_sigma <= 0:
            raise GeometryError("blur_sigma must be positive")


def render_visual_prompt_image(
    image: ImagePayload, box: PixelBox, spec: VisualPromptSpec = VisualPromptSpec()
) -> ImagePayload:
    dims = image.dims
    if box.x_max > dims.width or box.y_max > dims.height:
        raise GeometryError(f"box {box.as_list()} outside image {dims.width}x{dims.height}")

    src = np.asarray(image.to_pil(), dtype=np.float64)
    out = gaussian_filter(
        src, sigma=(spec.blur_sigma, spec.blur_sigma, 0), truncate=3.0, mode="nearest"
    )

    ix0, iy0 = int(floor(box.x_min)), int(floor(box.y_min))
    ix1, iy1 = int(ceil(box.x_max)), int(ceil(box.y_max))
    w = spec.outline_width
    bx0, by0 = max(ix0 - w, 0), max(iy0 - w, 0)
    bx1, by1 = min(ix1 + w, dims.width), min(iy1 + w, dims.height)

    out[by0:by1, bx0:bx1] = np.array(spec.outline_color, dtype=np.float64)
    out[iy0:iy1, ix0:ix1] = src[iy0:iy1, ix0:ix1]

    rendered = Image.fromarray(np.round(out).clip(0, 255).astype(np.uint8))
    return ImagePayload.from_pil(rendered, source_path=image.source_path)


def outline_band(
    box: PixelBox, dims_width: int, dims_height: int, outline_width: int
) -> tuple[tuple[int, int, int, int], tuple[int, int, int, int]]:
    """(outer, inner) integer rectangles bounding the painted band.

    ``outer`` is clipped to the image; pixels in outer minus inner carry the
    outline color. Exposed so tests and renderers agree on the footprint.
    """
    ix0, iy0 = int(floor(box.x_min)), int(floor(box.y_min))
    ix1, iy1 = int(ceil(box.x_max)), int(ceil(box.y_max))
    w = outline_width
    outer = (max(ix0 - w, 0), max(iy0 - w, 0), min(ix1 + w, dims_width), min(iy1 + w, dims_height))
    inner = (ix0, iy0, ix1, iy1)
    return outer, inner
