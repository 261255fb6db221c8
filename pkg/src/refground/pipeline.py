"""End-to-end grounding pipeline.

Stages, in order: global caption, concept extraction, per-concept detection
fan-out, geometric refinement (area filter, area-priority NMS, descending
area sort, primary/other split), region description for primary candidates
(optionally with multi-sample self-consistency), and a single selection call
that returns a chain-of-thought trace ending in one candidate index or a
rejection.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import (
    EmptyCandidateSetError,
    EmptyConceptSetError,
    PipelineError,
    RefGroundError,
    SelectionFailureError,
)
from .gateway import Detection, ImagePayload, detect, llm_complete, mllm_complete
from .geometry import (
    ImageDims,
    NormalizedBox,
    PixelBox,
    area_fraction,
    nms_indices,
    normalize,
)
from .prompts import (
    DEFAULT_BOX_FORMAT_LABEL,
    DEFAULT_TEMPLATES,
    DEFAULT_VISUAL_PROMPT_NAME,
    TemplateSet,
    render_aggregation_prompt,
    render_concept_extraction,
    render_global_caption_prompt,
    render_instance_description_prompt,
    render_selection_prompt,
)
from .visual import VisualPromptSpec, render_visual_prompt_image

DEFAULT_REJECTION_TOKENS = ("none", "no match", "reject")


@dataclass
class PipelineConfig:
    min_area_fraction: float = 0.025
    nms_iou: float = 0.7
    max_primary: int = 10
    self_consistency_n: int = 1
    rejection_tokens: tuple[str, ...] = DEFAULT_REJECTION_TOKENS
    max_reprompts: int = 1
    box_format_label: str = DEFAULT_BOX_FORMAT_LABEL
    visual_prompt_name: str = DEFAULT_VISUAL_PROMPT_NAME
    noun_examples: list[str] | None = None
    visual_prompt: VisualPromptSpec = field(default_factory=VisualPromptSpec)
    templates: TemplateSet = field(default_factory=lambda: DEFAULT_TEMPLATES)
    confidence_threshold: float | None = None
    parallel_calls: int = 1

    def __post_init__(self):
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise PipelineError("config", "min_area_fraction outside [0, 1)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise PipelineError("config", "nms_iou outside (0, 1]")
        if self.max_primary < 1 or self.self_consistency_n < 1:
            raise PipelineError("config", "max_primary and self_consistency_n must be >= 1")
        if self.max_reprompts < 0:
            raise PipelineError("config", "max_reprompts must be >= 0")


@dataclass
class Backends:
    llm: object
    mllm: object
    detector: object


@dataclass(frozen=True)
class ConceptSet:
    concepts: tuple[str, ...]

    def __post_init__(self):
        if not self.concepts:
            raise EmptyConceptSetError()
        if any(not c or c != c.strip().lower() for c in self.concepts):
            raise PipelineError("concepts", f"malformed concept in {self.concepts}")
        if len(set(self.concepts)) != len(self.concepts):
            raise PipelineError("concepts", f"duplicate concepts in {self.concepts}")

    @classmethod
    def from_reply(cls, reply: str) -> "ConceptSet":
        seen = []
        for token in reply.split(","):
            cleaned = token.strip().strip(".,;:!?\"'()[]").strip().lower()
            cleaned = re.sub(r"\s+", " ", cleaned)
            if cleaned and cleaned not in seen:
                seen.append(cleaned)
        return cls(tuple(seen))

    def __iter__(self):
        return iter(self.concepts)

    def __len__(self):
        return len(self.concepts)


@dataclass
class Candidate:
    box: PixelBox
    norm_box: NormalizedBox
    concept: str
    tier: str  # "primary" or "other"
    index: int  # 1-based, assigned after refinement
    description: str | None = None


@dataclass
class CandidateSet:
    image_dims: ImageDims
    candidates: list[Candidate]
    global_caption: str

    @property
    def primaries(self) -> list[Candidate]:
        return [c for c in self.candidates if c.tier == "primary"]

    @property
    def others(self) -> list[Candidate]:
        return [c for c in self.candidates if c.tier == "other"]


@dataclass
class ReasoningTrace:
    raw_text: str
    steps: list[str]
    answer_index: int | None  # 1-based; None when rejected or unparseable
    rejected: bool
    parse_quality: str  # "clean", "fallback", or "unparseable"

    @classmethod
    def synthetic_rejection(cls, reason: str) -> "ReasoningTrace":
        return cls(raw_text=reason, steps=[], answer_index=None, rejected=True,
                   parse_quality="clean")


@dataclass
class GroundingResult:
    predicted_box: PixelBox | None
    rejected: bool
    trace: ReasoningTrace
    candidate_set: CandidateSet
    stage_timings: dict[str, float]
    rejected_reason: str | None = None

    def __post_init__(self):
        if (self.predicted_box is None) != self.rejected:
            raise PipelineError("result", "exactly one of predicted_box / rejected must be set")


DescribeOverride = Callable[[Candidate, CandidateSet], Optional[str]]


def _ordered_map(fn, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def generate_global_caption(backends: Backends, image: ImagePayload,
                            cfg: PipelineConfig) -> str:
    bundle = render_global_caption_prompt(image, templates=cfg.templates)
    try:
        caption = mllm_complete(backends.mllm, bundle.to_messages())
    except RefGroundError as exc:
        raise PipelineError("caption", str(exc)) from exc
    if not caption.strip():
        raise PipelineError("caption", "model returned an empty caption")
    return caption


def extract_concepts(backends: Backends, query: str, caption: str,
                     cfg: PipelineConfig) -> ConceptSet:
    bundle = render_concept_extraction(
        query, caption, noun_examples=cfg.noun_examples, templates=cfg.templates
    )
    try:
        reply = llm_complete(backends.llm, bundle.to_messages())
    except RefGroundError as exc:
        raise PipelineError("concepts", str(exc)) from exc
    return ConceptSet.from_reply(reply)


def generate_candidates(backends: Backends, image: ImagePayload, concepts: ConceptSet,
                        caption: str, cfg: PipelineConfig) -> CandidateSet:
    """Detection fan-out (one call per concept) plus geometric refinement."""

    def run_detect(concept: str) -> list[Detection]:
        try:
            return detect(backends.detector, image, [concept],
                          confidence_threshold=cfg.confidence_threshold)
        except RefGroundError as exc:
            raise PipelineError("detection", f"concept {concept!r}: {exc}") from exc

    per_concept = _ordered_map(run_detect, list(concepts), cfg.parallel_calls)
    union: list[Detection] = [d for batch in per_concept for d in batch]

    surviving = [
        d for d in union
        if area_fraction(d.box, image.dims) >= cfg.min_area_fraction
    ]
    keep = nms_indices([d.box for d in surviving], cfg.nms_iou)
    if not keep:
        raise EmptyCandidateSetError()

    candidates = []
    for rank, det_idx in enumerate(keep):
        det = surviving[det_idx]
        candidates.append(
            Candidate(
                box=det.box,
                norm_box=normalize(det.box, image.dims),
                concept=det.concept,
                tier="primary" if rank < cfg.max_primary else "other",
                index=rank + 1,
            )
        )
    return CandidateSet(image_dims=image.dims, candidates=candidates, global_caption=caption)


def describe_candidate(backends: Backends, image: ImagePayload, candidate: Candidate,
                       cfg: PipelineConfig) -> str:
    if candidate.tier != "primary":
        raise PipelineError("description", f"candidate {candidate.index} is not primary")
    marked = render_visual_prompt_image(image, candidate.box, cfg.visual_prompt)
    bundle = render_instance_description_prompt(
        candidate.concept,
        candidate.norm_box,
        box_format_label=cfg.box_format_label,
        visual_prompt_name=cfg.visual_prompt_name,
        image=marked,
        templates=cfg.templates,
    )
    try:
        return mllm_complete(backends.mllm, bundle.to_messages())
    except RefGroundError as exc:
        raise PipelineError("description", f"candidate {candidate.index}: {exc}") from exc


def _backend_temperature(backend) -> float | None:
    config = getattr(backend, "config", None)
    if config is not None and hasattr(config, "temperature"):
        return config.temperature
    return None


def describe_with_self_consistency(backends: Backends, image: ImagePayload,
                                   candidate: Candidate, n: int,
                                   cfg: PipelineConfig) -> str:
    """n independent descriptions consolidated by the LLM; n=1 skips aggregation."""
    if n < 1:
        raise PipelineError("description", "self-consistency n must be >= 1")
    if n > 1:
        temp = _backend_temperature(backends.mllm)
        if temp is not None and temp <= 0:
            raise PipelineError(
                "description", "self-consistency with n > 1 needs sampling temperature > 0"
            )
    samples = [describe_candidate(backends, image, candidate, cfg) for _ in range(n)]
    if n == 1:
        return samples[0]
    bundle = render_aggregation_prompt(samples, templates=cfg.templates)
    try:
        return llm_complete(backends.llm, bundle.to_messages())
    except RefGroundError as exc:
        raise PipelineError("description", f"aggregation failed: {exc}") from exc


_STEP_LINE = re.compile(r"^\s*reasoning step\s+\d+\s*:", re.IGNORECASE)
_ANSWER_LINE = re.compile(r"^\s*answer\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)
_STRIP_CHARS = ".,;:!?\"'()[]{}<>*"


def _integer_tokens(text: str) -> list[int]:
    out = []
    for token in text.split():
        t = token.strip(_STRIP_CHARS)
        if t.isdigit():
            out.append(int(t))
    return out


def _has_refusal(text: str, tokens: Sequence[str]) -> bool:
    return any(
        re.search(rf"\b{re.escape(tok)}\b", text, re.IGNORECASE) for tok in tokens
    )


def parse_reasoning_trace(raw: str, n_candidates: int,
                          rejection_tokens: Sequence[str] = DEFAULT_REJECTION_TOKENS,
                          ) -> ReasoningTrace:
    """Parse a selection reply into steps plus an answer index or rejection.

    Quality ladder: ``clean`` needs both step lines and a usable final
    "Answer:" line; ``fallback`` covers answers recovered without both (a
    bare answer line, the last standalone integer in the text, or a refusal
    phrase outside an answer line); anything unrecoverable, including
    out-of-range indices, is ``unparseable``.
    """
    if n_candidates < 1:
        raise PipelineError("selection", "n_candidates must be >= 1")
    steps = [line.strip() for line in raw.splitlines() if _STEP_LINE.match(line)]
    has_steps = bool(steps)

    def build(answer: int | None, rejected: bool, quality: str) -> ReasoningTrace:
        return ReasoningTrace(raw_text=raw, steps=steps, answer_index=answer,
                              rejected=rejected, parse_quality=quality)

    answer_matches = list(_ANSWER_LINE.finditer(raw))
    if answer_matches:
        content = answer_matches[-1].group(1)
        if _has_refusal(content, rejection_tokens):
            return build(None, True, "clean" if has_steps else "fallback")
        integers = _integer_tokens(content)
        if integers:
            k = integers[0]
            if 1 <= k <= n_candidates:
                return build(k, False, "clean" if has_steps else "fallback")
            return build(None, False, "unparseable")

    integers = _integer_tokens(raw)
    if integers:
        k = integers[-1]
        if 1 <= k <= n_candidates:
            return build(k, False, "fallback")
        return build(None, False, "unparseable")
    if _has_refusal(raw, rejection_tokens):
        return build(None, True, "fallback")
    return build(None, False, "unparseable")


def select_candidate(backends: Backends, query: str, candidate_set: CandidateSet,
                     cfg: PipelineConfig) -> ReasoningTrace:
    """One selection call over all candidates; bounded re-prompt on garbage."""
    if not candidate_set.candidates:
        raise PipelineError("selection", "candidate set is empty")
    main = [
        (c.index, c.concept, c.norm_box, c.description or "")
        for c in candidate_set.primaries
    ]
    other = [(c.index, c.concept, c.norm_box) for c in candidate_set.others]
    bundle = render_selection_prompt(
        query, candidate_set.global_caption, main, other,
        box_format_label=cfg.box_format_label, templates=cfg.templates,
    )
    n = len(candidate_set.candidates)
    last_trace = None
    for _ in range(1 + cfg.max_reprompts):
        try:
            reply = llm_complete(backends.llm, bundle.to_messages())
        except RefGroundError as exc:
            raise PipelineError("selection", str(exc)) from exc
        last_trace = parse_reasoning_trace(reply, n, cfg.rejection_tokens)
        if last_trace.parse_quality != "unparseable":
            return last_trace
    raise SelectionFailureError(
        f"unparseable selection reply after {1 + cfg.max_reprompts} attempts: "
        f"{last_trace.raw_text[:120]!r}"
    )


def ground(backends: Backends, image: ImagePayload, query: str, cfg: PipelineConfig,
           describe_override: DescribeOverride | None = None) -> GroundingResult:
    """Run the full pipeline for one (image, query) pair."""
    if not query:
        raise PipelineError("input", "query must be non-empty")
    timings: dict[str, float] = {}

    def timed(stage: str, fn):
        start = time.perf_counter()
        try:
            return fn()
        finally:
            timings[stage] = time.perf_counter() - start

    caption = timed("caption", lambda: generate_global_caption(backends, image, cfg))

    empty_carrier = CandidateSet(image.dims, [], caption)
    try:
        concepts = timed("concepts", lambda: extract_concepts(backends, query, caption, cfg))
    except EmptyConceptSetError:
        return GroundingResult(None, True, ReasoningTrace.synthetic_rejection("empty-concept-set"),
                               empty_carrier, timings, rejected_reason="empty-concept-set")
    try:
        candidate_set = timed(
            "detection", lambda: generate_candidates(backends, image, concepts, caption, cfg)
        )
    except EmptyCandidateSetError:
        return GroundingResult(None, True, ReasoningTrace.synthetic_rejection("empty-candidate-set"),
                               empty_carrier, timings, rejected_reason="empty-candidate-set")

    def describe_all():
        def describe_one(candidate: Candidate) -> str:
            if describe_override is not None:
                override = describe_override(candidate, candidate_set)
                if override is not None:
                    return override
            if cfg.self_consistency_n > 1:
                return describe_with_self_consistency(
                    backends, image, candidate, cfg.self_consistency_n, cfg
                )
            return describe_candidate(backends, image, candidate, cfg)

        primaries = candidate_set.primaries
        for candidate, text in zip(
            primaries, _ordered_map(describe_one, primaries, cfg.parallel_calls)
        ):
            candidate.description = text

    timed("description", describe_all)
    trace = timed("selection", lambda: select_candidate(backends, query, candidate_set, cfg))

    if trace.rejected:
        return GroundingResult(None, True, trace, candidate_set, timings,
                               rejected_reason="selector-rejection")
    chosen = candidate_set.candidates[trace.answer_index - 1]
    return GroundingResult(chosen.box, False, trace, candidate_set, timings)
