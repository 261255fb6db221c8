"""Prompt templates and deterministic rendering.

Every template is rendered with plain ``str.format``; rendering identical
inputs always yields identical bytes. Box coordinates are substituted as
floats that the templates themselves pin to three decimals, matching the
normalized-box serialization contract. A config-named directory can override
any template for prompt ablation (one ``<name>.txt`` file per template).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .gateway import ChatMessage, ImagePayload
from .geometry import NormalizedBox

CONCEPT_EXTRACTION_SYSTEM = '''\
You are an object extractor for referred object positioning queries, and you need to extract all related objects from the object positioning query I give you.
You cannot see the image, but you can use the provided image description to more accurately extract possible involved objects when the object positioning query is very vague.

Your task: Extract all possible object names from the object positioning query given by the user. You can refer to the image description, but do not directly extract object names from the image description.

Instructions:
- Do not ask any questions to the user, even if the user's query contains questions or is ambiguous. Treat all user inputs as queries.
- You need to list all possible nouns. For example, if I provide "left kid in blue shirt," your output should be "kid, child, person, shirt", with as many similar nouns as possible.
- Your output should only be the extracted nouns. If there are multiple objects, you can separate them with commas. Do not add any extra information, such as reasoning or annotations.

Available noun examples: {noun_examples}

Example:
<user>
Image description: ... (For example, two kids playing in the park)
Query: left kid in blue shirt
<assistant>
kid, child, person, shirt, clothing
'''

CONCEPT_EXTRACTION_USER = '''\
Image description: {image_desc}
Query: {query}
'''

GLOBAL_CAPTION_PROMPT = "Describe the image in a few sentences."

INSTANCE_DESCRIPTION_USER = (
    "Describe the object marked by {visual_prompt}: "
    "{name}[{a1:.3f}, {a2:.3f}, {a3:.3f}, {a4:.3f}]. "
    "Note: The coordinates [*, *, *, *] are in the {box_format} format."
)

INSTANCE_DESCRIPTION_SYSTEM = (
    "You are a fine-grained description multimodal model. Your task is to provide "
    "a detailed description (or captioning) of the object marked by {visual_prompt}."
)

MAIN_CANDIDATE_LINE = (
    "{idx}. {category_name}[{center_x:.3f}, {center_y:.3f}, {width:.3f}, {height:.3f}]"
    "\nInstance Description: {description}"
)

OTHER_CANDIDATE_LINE = (
    "{idx}. {category_name}[{center_x:.3f}, {center_y:.3f}, {width:.3f}, {height:.3f}]"
)

SELECTION_CONTEXT = """\
## Main Instance Descriptions
{main_instance_descs}

## Other Instance Descriptions
{other_instance_descs}

IMPORTANT NOTE: The coordinates [*, *, *, *] are in the {box_format} format. The {box_format} values are normalized to the range [0, 1]. A higher y value indicates a higher/top position, while a lower value indicates a lower/bottom position. Similarly, a higher x value indicates a position to the right, and a lower value to the left. By carefully observing the center_x and center_y of an instance, you can determine its position on the image, while width and height indicate its size or proximity.
"""

SELECTION_SYSTEM = """\
You are known as the "Blind Teacher," a highly intelligent educator specializing in reasoning and critical thinking.
Although you cannot see the image, you can understand it through textual descriptions. You will be provided with a description of the image and the main objects in it, and you need to answer questions based on these descriptions.
Your task: Identify the object referred to by the user from the given list of objects.

Here is the textual description:
# Image Description
{global_desc}
# Instance Description
{instance_desc}

Think step by step to identify the object referred to by the user. Carefully analyze the descriptions provided and match them with the user's query.

Your output format: Directly output the index of the object. Do not include any additional information in Answer.

Example:

Input:
User: The person wearing red clothes
Output:
Reasoning Step 1: ...(Identify the person and red clothes in the image. Analyze the descriptions provided.)
Reasoning Step 2: ...(Identify the person wearing red clothes. Analyze the descriptions provided.)
...
Answer: 1
"""

AGGREGATION_PROMPT = """\
You are a description aggregator for image regions. You are given {n} independent descriptions of the same region. Combine them into one consolidated description, keeping the attributes that are consistent across the descriptions and dropping details that appear in only one of them.
Output only the consolidated description.

Descriptions:
{numbered_descriptions}
"""

AGGREGATION_SINGLE_PROMPT = """\
You are a description aggregator for image regions. You are given 1 description of a region. Return it unchanged.

Descriptions:
{numbered_descriptions}
"""

DEFAULT_BOX_FORMAT_LABEL = "center-based [center_x, center_y, width, height]"
DEFAULT_VISUAL_PROMPT_NAME = "a red rectangle"

# 80 everyday object categories used as the default noun examples for
# concept extraction; override via config for domain-specific vocabularies.
DEFAULT_NOUN_EXAMPLES = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign", "parking meter", "bench",
    "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup",
    "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
]


@dataclass(frozen=True)
class PromptBundle:
    user_text: str
    system_text: str | None = None
    image: ImagePayload | None = None

    def to_messages(self) -> list[ChatMessage]:
        messages = []
        if self.system_text is not None:
            messages.append(ChatMessage("system", self.system_text))
        messages.append(ChatMessage("user", self.user_text, image=self.image))
        return messages


@dataclass(frozen=True)
class TemplateSet:
    """All templates in one bundle so overrides stay explicit."""

    concept_extraction_system: str = CONCEPT_EXTRACTION_SYSTEM
    concept_extraction_user: str = CONCEPT_EXTRACTION_USER
    global_caption: str = GLOBAL_CAPTION_PROMPT
    instance_description_user: str = INSTANCE_DESCRIPTION_USER
    instance_description_system: str = INSTANCE_DESCRIPTION_SYSTEM
    main_candidate_line: str = MAIN_CANDIDATE_LINE
    other_candidate_line: str = OTHER_CANDIDATE_LINE
    selection_context: str = SELECTION_CONTEXT
    selection_system: str = SELECTION_SYSTEM
    aggregation: str = AGGREGATION_PROMPT
    aggregation_single: str = AGGREGATION_SINGLE_PROMPT


DEFAULT_TEMPLATES = TemplateSet()


def load_template_overrides(directory: str | Path) -> TemplateSet:
    """Build a TemplateSet from ``<field>.txt`` files; missing files keep defaults."""
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"template override directory not found: {directory}")
    overrides = {}
    for f in fields(TemplateSet):
        path = root / f"{f.name}.txt"
        if path.exists():
            overrides[f.name] = path.read_text()
    return replace(DEFAULT_TEMPLATES, **overrides)


_PLACEHOLDER = re.compile(r"\{[A-Za-z_][A-Za-z_0-9]*(?::[^{}]*)?\}")


def find_unsubstituted(text: str) -> list[str]:
    """Placeholder-looking brace pairs left in rendered output (should be none)."""
    return _PLACEHOLDER.findall(text)


def render_concept_extraction(
    query: str,
    global_caption: str,
    noun_examples: list[str] | None = None,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> PromptBundle:
    if not query:
        raise ConfigError("query must be non-empty")
    nouns = DEFAULT_NOUN_EXAMPLES if noun_examples is None else noun_examples
    return PromptBundle(
        system_text=templates.concept_extraction_system.format(noun_examples=", ".join(nouns)),
        user_text=templates.concept_extraction_user.format(image_desc=global_caption, query=query),
    )


def render_global_caption_prompt(
    image: ImagePayload | None = None,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> PromptBundle:
    return PromptBundle(user_text=templates.global_caption, image=image)


def render_instance_description_prompt(
    concept: str,
    box: NormalizedBox,
    box_format_label: str = DEFAULT_BOX_FORMAT_LABEL,
    visual_prompt_name: str = DEFAULT_VISUAL_PROMPT_NAME,
    image: ImagePayload | None = None,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> PromptBundle:
    cx, cy, w, h = box.as_tuple()
    return PromptBundle(
        system_text=templates.instance_description_system.format(visual_prompt=visual_prompt_name),
        user_text=templates.instance_description_user.format(
            visual_prompt=visual_prompt_name,
            name=concept,
            a1=cx, a2=cy, a3=w, a4=h,
            box_format=box_format_label,
        ),
        image=image,
    )


def render_selection_prompt(
    query: str,
    global_desc: str,
    main: list[tuple[int, str, NormalizedBox, str]],
    other: list[tuple[int, str, NormalizedBox]],
    box_format_label: str = DEFAULT_BOX_FORMAT_LABEL,
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> PromptBundle:
    indices = [entry[0] for entry in main] + [entry[0] for entry in other]
    if indices != list(range(1, len(indices) + 1)):
        raise ConfigError(
            f"candidate indices must be 1-based and consecutive with main first, got {indices}"
        )
    main_lines = []
    for idx, concept, box, description in main:
        cx, cy, w, h = box.as_tuple()
        main_lines.append(
            templates.main_candidate_line.format(
                idx=idx, category_name=concept,
                center_x=cx, center_y=cy, width=w, height=h,
                description=description,
            )
        )
    other_lines = []
    for idx, concept, box in other:
        cx, cy, w, h = box.as_tuple()
        other_lines.append(
            templates.other_candidate_line.format(
                idx=idx, category_name=concept,
                center_x=cx, center_y=cy, width=w, height=h,
            )
        )
    instance_desc = templates.selection_context.format(
        main_instance_descs="\n".join(main_lines),
        other_instance_descs="\n".join(other_lines),
        box_format=box_format_label,
    )
    return PromptBundle(
        system_text=templates.selection_system.format(
            global_desc=global_desc, instance_desc=instance_desc
        ),
        user_text=query,
    )


def render_aggregation_prompt(
    descriptions: list[str],
    templates: TemplateSet = DEFAULT_TEMPLATES,
) -> PromptBundle:
    if not descriptions:
        raise ConfigError("need at least one description to aggregate")
    numbered = "\n".join(f"{i}. {d}" for i, d in enumerate(descriptions, start=1))
    template = templates.aggregation_single if len(descriptions) == 1 else templates.aggregation
    return PromptBundle(
        user_text=template.format(n=len(descriptions), numbered_descriptions=numbered)
    )
