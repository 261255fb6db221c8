"""Render each prompt template the pipeline sends to its three model roles.

Run: python3 demos/02_prompt_rendering.py
"""

from refground.geometry import NormalizedBox
from refground.prompts import (
    render_aggregation_prompt,
    render_concept_extraction,
    render_global_caption_prompt,
    render_instance_description_prompt,
    render_selection_prompt,
)


def show(title, bundle):
    print("=" * 72)
    print(title)
    print("=" * 72)
    if bundle.system_text is not None:
        print("[system]")
        print(bundle.system_text)
    print("[user]")
    print(bundle.user_text)
    print()


# Stage 1: the captioner prompt is a single constant sentence.
show("global caption", render_global_caption_prompt())

# Stage 2: concept extraction sees the query plus the global caption and
# must answer with a bare comma-separated noun list.
show("concept extraction", render_concept_extraction(
    "left kid in blue shirt", "two kids playing in the park",
    noun_examples=["kid", "person", "shirt", "ball"],
))

# Stage 4: each primary candidate is described from a marked image; the
# coordinates are the 3-decimal normalized center/size form.
show("instance description", render_instance_description_prompt(
    "chair", NormalizedBox(0.2, 0.8, 0.2, 0.2),
))

# Stage 5: one selection call sees every candidate; primaries carry their
# descriptions, the rest only concept + coordinates.
show("selection", render_selection_prompt(
    query="the white chair by the fireplace",
    global_desc="A living room with two chairs near a fireplace.",
    main=[(1, "chair", NormalizedBox(0.2, 0.8, 0.2, 0.2),
           "a white chair near the fireplace")],
    other=[(2, "chair", NormalizedBox(0.7, 0.3, 0.15, 0.2))],
))

# Self-consistency: several sampled descriptions get consolidated into one.
show("aggregation", render_aggregation_prompt(
    ["a white chair", "a white wooden chair", "a white chair",
     "a pale chair", "a white chair"],
))
