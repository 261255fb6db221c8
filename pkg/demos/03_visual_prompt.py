"""Build the marked image variant the describer sees: red outline, blurred background.

Run: python3 demos/03_visual_prompt.py   (writes PNGs into ./demo_output)
"""

import random
from pathlib import Path

from refground.gateway import ImagePayload
from refground.scenes import generate_scene, render_scene
from refground.visual import VisualPromptSpec, render_visual_prompt_image

out_dir = Path("demo_output")
out_dir.mkdir(exist_ok=True)

scene = generate_scene(random.Random(7), "demo_scene")
image = render_scene(scene)
image.save(out_dir / "scene.png")
print("scene:", scene.global_caption)

payload = ImagePayload.from_pil(image)
target = scene.objects[0]
print("marking:", target.attribute_sentence, "at", target.box.as_list())

# Defaults: red outline 3px just outside the box, Gaussian blur sigma 10
# everywhere else; pixels covered by the box itself stay untouched.
marked = render_visual_prompt_image(payload, target.box, VisualPromptSpec())
marked.to_pil().save(out_dir / "scene_marked.png")
print("wrote", out_dir / "scene.png", "and", out_dir / "scene_marked.png")
