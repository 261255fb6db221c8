"""Box algebra walkthrough: IoU, area filtering, NMS, and coordinate conversion.

Run: python3 demos/01_box_geometry.py
"""

from refground.geometry import (
    ImageDims,
    PixelBox,
    area_fraction,
    denormalize,
    filter_by_area,
    iou,
    nms,
    normalize,
    sort_by_area_desc,
)

dims = ImageDims(640, 480)

# Pixel boxes are detector-native: top-left origin, y grows downward.
big = PixelBox(40, 40, 240, 200)
overlapping = PixelBox(60, 60, 250, 210)
small = PixelBox(500, 400, 530, 430)

print("IoU of two overlapping boxes:", round(iou(big, overlapping), 4))
print("IoU of disjoint boxes:", iou(big, small))

# The refinement stage drops regions below 2.5% of the image area.
print("\nArea fractions:")
for box in (big, overlapping, small):
    print(f"  {box.as_list()} -> {area_fraction(box, dims):.4f}")
survivors = filter_by_area([big, overlapping, small], dims, min_fraction=0.025)
print("after 2.5% filter:", [b.as_list() for b in survivors])

# NMS uses box area as its only priority signal: no detector scores exist
# anywhere in this engine. The larger box wins; output is area-descending.
kept = nms([overlapping, big], iou_threshold=0.7)
print("\nNMS on near-duplicates keeps:", [b.as_list() for b in kept])
print("area-descending sort:", [b.area for b in sort_by_area_desc([small, big, overlapping])])

# Normalized boxes flip to a bottom-left origin and render at 3 decimals,
# so a box hugging the image top edge has center_y near 1.0.
top_edge = PixelBox(100, 0, 220, 60)
norm = normalize(top_edge, dims)
print("\ntop-edge box normalized:", norm.format_fields())
print("round-trip:", [round(v, 2) for v in denormalize(norm, dims).as_list()])
