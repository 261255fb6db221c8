"""Synthetic scene manifests and deterministic scene generation.

A scene is a flat-color composition: solid rectangles on a plain background,
each with a label, a color, a grid position, and a one-line attribute
sentence. Manifests double as ground truth for the oracle model backends,
so every generated pixel and sentence is exactly predictable from the seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, ImageDraw

from .errors import ConfigError
from .geometry import ImageDims, PixelBox, area_fraction, iou

# Object vocabulary. Every label carries at least one synonym so that
# no-target queries can name an object family without using any word that
# appears in an attribute sentence.
LABEL_SYNONYMS = {
    "chair": ["seat"],
    "table": ["desk"],
    "dog": ["animal", "puppy"],
    "cat": ["animal", "kitten"],
    "car": ["vehicle"],
    "ball": ["sphere"],
    "cup": ["mug"],
    "lamp": ["light"],
    "book": ["volume"],
    "plant": ["shrub"],
}

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 160, 60),
    "blue": (45, 90, 210),
    "yellow": (230, 210, 60),
    "purple": (130, 60, 180),
    "orange": (240, 140, 40),
    "teal": (40, 170, 170),
    "brown": (140, 90, 50),
    "gray": (120, 120, 120),
    "black": (30, 30, 30),
}

# Reserved for no-target queries; never assigned to a placed object.
REJECTION_COLORS = ["pink", "magenta", "crimson"]

BACKGROUND_RGB = (235, 235, 235)

# 3x3 grid cell -> position descriptor used in sentences and queries.
CELL_NAMES = {
    (0, 0): "top left", (0, 1): "top center", (0, 2): "top right",
    (1, 0): "middle left", (1, 1): "center", (1, 2): "middle right",
    (2, 0): "bottom left", (2, 1): "bottom center", (2, 2): "bottom right",
}


@dataclass
class SceneObject:
    object_id: str
    label: str
    synonyms: list[str]
    color: str
    color_rgb: tuple[int, int, int]
    position: str
    attribute_sentence: str
    box: PixelBox

    def matches_term(self, term: str) -> bool:
        t = term.strip().lower()
        return t == self.label or t in self.synonyms


@dataclass
class SceneQuery:
    text: str
    target_id: str | None  # None marks a no-target (rejection) query


@dataclass
class SceneManifest:
    scene_id: str
    dims: ImageDims
    background_rgb: tuple[int, int, int]
    global_caption: str
    objects: list[SceneObject]
    queries: list[SceneQuery]
    metadata: dict = field(default_factory=dict)

    def object_by_id(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)

    def match_box(self, box: PixelBox, min_iou: float = 0.5) -> SceneObject | None:
        """Best-overlapping object at or above ``min_iou``, else None."""
        best, best_iou = None, min_iou
        for obj in self.objects:
            v = iou(obj.box, box)
            if v >= best_iou:
                best, best_iou = obj, v
        return best

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "width": self.dims.width,
            "height": self.dims.height,
            "background_rgb": list(self.background_rgb),
            "global_caption": self.global_caption,
            "objects": [
                {
                    "id": o.object_id,
                    "label": o.label,
                    "synonyms": o.synonyms,
                    "color": o.color,
                    "color_rgb": list(o.color_rgb),
                    "position": o.position,
                    "attribute_sentence": o.attribute_sentence,
                    "box": o.box.as_list(),
                }
                for o in self.objects
            ],
            "queries": [{"text": q.text, "target": q.target_id} for q in self.queries],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneManifest":
        dims = ImageDims(data["width"], data["height"])
        objects = [
            SceneObject(
                object_id=o["id"],
                label=o["label"],
                synonyms=list(o["synonyms"]),
                color=o["color"],
                color_rgb=tuple(o["color_rgb"]),
                position=o["position"],
                attribute_sentence=o["attribute_sentence"],
                box=PixelBox(*o["box"]),
            )
            for o in data["objects"]
        ]
        for obj in objects:
            if obj.box.x_max > dims.width or obj.box.y_max > dims.height:
                raise ConfigError(f"{data['scene_id']}: object {obj.object_id} outside image")
        queries = [SceneQuery(q["text"], q["target"]) for q in data["queries"]]
        for q in queries:
            if q.target_id is not None and all(o.object_id != q.target_id for o in objects):
                raise ConfigError(f"{data['scene_id']}: query target {q.target_id} unresolved")
        return cls(
            scene_id=data["scene_id"],
            dims=dims,
            background_rgb=tuple(data["background_rgb"]),
            global_caption=data["global_caption"],
            objects=objects,
            queries=queries,
            metadata=dict(data.get("metadata", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SceneManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def render_scene(manifest: SceneManifest) -> Image.Image:
    img = Image.new("RGB", (manifest.dims.width, manifest.dims.height), manifest.background_rgb)
    draw = ImageDraw.Draw(img)
    for obj in manifest.objects:
        b = obj.box
        draw.rectangle(
            [round(b.x_min), round(b.y_min), round(b.x_max) - 1, round(b.y_max) - 1],
            fill=obj.color_rgb,
        )
    return img


def _caption(objects: list[SceneObject]) -> str:
    parts = [o.attribute_sentence for o in objects]
    if len(parts) == 1:
        listing = parts[0]
    else:
        listing = ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"A plain scene containing {listing}."


def generate_scene(
    rng: random.Random,
    scene_id: str,
    dims: ImageDims = ImageDims(320, 240),
    small_target: bool = False,
    rejection_query: bool = False,
    n_objects: int | None = None,
) -> SceneManifest:
    """One deterministic scene with a single query.

    Objects occupy distinct 3x3 grid cells, so boxes never overlap, each
    position descriptor is exact, and (color, label) pairs are unique.
    ``small_target`` shrinks the query target below 2.5% of the image area;
    ``rejection_query`` swaps the query for one that names an object family
    by synonym but demands a color no object has.
    """
    if dims.width < 60 or dims.height < 60:
        raise ConfigError("scene generation needs at least a 60x60 image")
    k = n_objects if n_objects is not None else rng.randint(2, 5)
    if k > 9:
        raise ConfigError("at most 9 objects fit the placement grid")
    cells = rng.sample(sorted(CELL_NAMES), k)
    combos = rng.sample([(c, l) for c in COLOR_RGB for l in LABEL_SYNONYMS], k)
    cell_w = dims.width / 3.0
    cell_h = dims.height / 3.0
    target_idx = rng.randrange(k)

    objects = []
    for i, ((row, col), (color, label)) in enumerate(zip(cells, combos)):
        if small_target and i == target_idx:
            frac = rng.uniform(0.010, 0.020)  # below the 2.5% filter
        else:
            frac = rng.uniform(0.035, 0.090)
        aspect = rng.uniform(0.6, 1.6)
        area = frac * dims.width * dims.height
        w = min((area * aspect) ** 0.5, cell_w - 6)
        h = min(area / w, cell_h - 6)
        x0 = col * cell_w + rng.uniform(2, cell_w - w - 2)
        y0 = row * cell_h + rng.uniform(2, cell_h - h - 2)
        position = CELL_NAMES[(row, col)]
        objects.append(
            SceneObject(
                object_id=f"obj{i}",
                label=label,
                synonyms=list(LABEL_SYNONYMS[label]),
                color=color,
                color_rgb=COLOR_RGB[color],
                position=position,
                attribute_sentence=f"a {color} {label} in the {position}",
                box=PixelBox(round(x0, 1), round(y0, 1), round(x0 + w, 1), round(y0 + h, 1)),
            )
        )

    target = objects[target_idx]
    if rejection_query:
        color = rng.choice(REJECTION_COLORS)
        synonym = rng.choice(target.synonyms)
        query = SceneQuery(f"the {color} {synonym}", None)
    else:
        query = SceneQuery(f"the {target.color} {target.label} in the {target.position}", target.object_id)

    any_small = any(area_fraction(o.box, dims) < 0.025 for o in objects)
    return SceneManifest(
        scene_id=scene_id,
        dims=dims,
        background_rgb=BACKGROUND_RGB,
        global_caption=_caption(objects),
        objects=objects,
        queries=[query],
        metadata={"small_target": any_small},
    )


def generate_scene_set(
    out_dir: str | Path,
    n_scenes: int,
    seed: int,
    dims: ImageDims = ImageDims(320, 240),
    small_fraction: float = 0.0,
    rejection_fraction: float = 0.0,
    split: str = "synthetic",
) -> Path:
    """Write ``n_scenes`` manifests + PNGs + a dataset file; returns the dataset path.

    The first round(n * small_fraction) scenes carry sub-2.5% targets and the
    following round(n * rejection_fraction) scenes carry no-target queries, so
    the constructed fractions are exact rather than sampled.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_small = round(n_scenes * small_fraction)
    n_reject = round(n_scenes * rejection_fraction)
    if n_small + n_reject > n_scenes:
        raise ConfigError("small_fraction + rejection_fraction exceed 1")
    rng = random.Random(seed)
    records = []
    for i in range(n_scenes):
        scene_id = f"scene_{i:04d}"
        manifest = generate_scene(
            rng,
            scene_id,
            dims=dims,
            small_target=i < n_small,
            rejection_query=n_small <= i < n_small + n_reject,
        )
        manifest.save(out / f"{scene_id}.json")
        render_scene(manifest).save(out / f"{scene_id}.png")
        query = manifest.queries[0]
        gt = None
        if query.target_id is not None:
            gt = manifest.object_by_id(query.target_id).box.as_list()
        records.append(
            {
                "sample_id": f"{scene_id}_q0",
                "image_path": f"{scene_id}.png",
                "query": query.text,
                "gt_box": gt,
                "split": split,
            }
        )
    dataset_path = out / "dataset.jsonl"
    with dataset_path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return dataset_path


class SceneIndex:
    """Maps generated image files back to their manifests for the oracles."""

    def __init__(self, scenes_dir: str | Path):
        self.scenes_dir = Path(scenes_dir)
        if not self.scenes_dir.is_dir():
            raise ConfigError(f"scene directory not found: {scenes_dir}")
        self._by_image: dict[str, SceneManifest] = {}
        for manifest_path in sorted(self.scenes_dir.glob("*.json")):
            try:
                manifest = SceneManifest.load(manifest_path)
            except (KeyError, json.JSONDecodeError):
                continue  # not a scene manifest
            self._by_image[manifest.scene_id + ".png"] = manifest
        if not self._by_image:
            raise ConfigError(f"no scene manifests under {scenes_dir}")

    def for_image_name(self, name: str) -> SceneManifest:
        try:
            return self._by_image[Path(name).name]
        except KeyError:
            raise ConfigError(f"no manifest for image {name!r} in {self.scenes_dir}") from None

    def manifests(self) -> list[SceneManifest]:
        return [self._by_image[name] for name in sorted(self._by_image)]

    def __len__(self) -> int:
        return len(self._by_image)
