"""Deterministic oracle backends defined over synthetic scene manifests.

These stand-ins answer the same rendered requests the live models would see:
the concept-extractor oracle reads the query out of the extraction prompt,
the describer oracle parses the normalized coordinates out of the instance
prompt, and the selector oracle scores candidates by token overlap with the
query. Every reply is a pure function of (manifest, request), which makes
whole-pipeline runs exactly predictable.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

from .errors import NoMatchingObjectError, OracleError
from .gateway import ChatMessage, Detection, ImagePayload
from .geometry import NormalizedBox, denormalize
from .scenes import SceneIndex, SceneManifest

STOPWORDS = {"the", "a", "an", "in", "of", "at", "on", "and", "by", "to", "is"}

CORRUPT_DESCRIPTION = "an unidentifiable blurry shape"

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _WORD.findall(text.lower()) if t not in STOPWORDS]


def oracle_describe(
    scene: SceneManifest,
    box,
    mode: str = "attributes",
    query: str | None = None,
) -> str:
    """Ground-truth region description for the object best matching ``box``.

    ``attributes`` returns the manifest attribute sentence; ``query_echo``
    returns the query verbatim; ``query_plus`` appends the scene's global
    caption to the query.
    """
    obj = scene.match_box(box, min_iou=0.5)
    if obj is None:
        raise NoMatchingObjectError(f"no object in {scene.scene_id} matches {box.as_list()}")
    if mode == "attributes":
        return obj.attribute_sentence
    if mode in ("query_echo", "query_plus"):
        if query is None:
            raise OracleError(f"mode {mode} requires the query")
        return query if mode == "query_echo" else f"{query} {scene.global_caption}"
    raise OracleError(f"unknown describe mode {mode!r}")


class _SceneResolver:
    """Either a fixed manifest or a directory index keyed by image filename."""

    def __init__(self, scene: SceneManifest | None = None,
                 scenes_dir: str | Path | None = None):
        if (scene is None) == (scenes_dir is None):
            raise OracleError("provide exactly one of scene / scenes_dir")
        self.scene = scene
        self.index = SceneIndex(scenes_dir) if scenes_dir is not None else None
        self._by_caption: dict[str, SceneManifest] | None = None

    def for_image(self, image: ImagePayload) -> SceneManifest:
        if self.scene is not None:
            return self.scene
        if image.source_path is None:
            raise OracleError("oracle needs image.source_path to find its manifest")
        return self.index.for_image_name(image.source_path)

    def for_caption(self, caption: str) -> SceneManifest:
        # Captions are functions of the object list, so two scenes sharing a
        # caption share the vocabulary the extractor cares about.
        if self.scene is not None:
            return self.scene
        if self._by_caption is None:
            self._by_caption = {}
            for manifest in self.index.manifests():
                self._by_caption.setdefault(manifest.global_caption, manifest)
        try:
            return self._by_caption[caption]
        except KeyError:
            raise OracleError(f"no scene with caption {caption!r}") from None


class OracleDetector:
    """Returns the manifest box of every object whose label or synonym matches."""

    def __init__(self, scene: SceneManifest | None = None,
                 scenes_dir: str | Path | None = None,
                 default_confidence_threshold: float = 0.3):
        self._resolver = _SceneResolver(scene, scenes_dir)
        self.default_confidence_threshold = default_confidence_threshold

    def detect(self, image: ImagePayload, vocabulary: list[str],
               confidence_threshold: float | None = None) -> list[Detection]:
        # Threshold is accepted for sweep pass-through but the oracle has
        # perfect recall at every setting.
        scene = self._resolver.for_image(image)
        out = []
        for term in vocabulary:
            concept = term.strip().lower()
            for obj in scene.objects:
                if obj.matches_term(concept):
                    out.append(Detection(concept, obj.box))
        return out


class OracleMLLM:
    """Global captions and region descriptions straight from the manifest.

    ``corrupt_fraction`` deterministically replaces that share of region
    descriptions with an unusable sentence (keyed on scene id, the region's
    prompt coordinates, and ``corrupt_seed``), which models a describer whose
    captions go wrong on some regions.
    """

    _COORDS = re.compile(r"\[(\d\.\d{3}), (\d\.\d{3}), (\d\.\d{3}), (\d\.\d{3})\]")

    def __init__(self, scene: SceneManifest | None = None,
                 scenes_dir: str | Path | None = None,
                 corrupt_fraction: float = 0.0, corrupt_seed: int = 0):
        if not 0.0 <= corrupt_fraction <= 1.0:
            raise OracleError("corrupt_fraction must be within [0, 1]")
        self._resolver = _SceneResolver(scene, scenes_dir)
        self.corrupt_fraction = corrupt_fraction
        self.corrupt_seed = corrupt_seed

    def _should_corrupt(self, scene_id: str, coord_text: str) -> bool:
        if self.corrupt_fraction <= 0.0:
            return False
        key = f"{scene_id}|{coord_text}|{self.corrupt_seed}".encode()
        bucket = int.from_bytes(hashlib.sha256(key).digest()[:4], "big") / 2**32
        return bucket < self.corrupt_fraction

    def complete(self, messages: list[ChatMessage]) -> str:
        image = next((m.image for m in messages if m.image is not None), None)
        if image is None:
            raise OracleError("MLLM oracle expects an image-bearing message")
        user_text = next(m.text for m in messages if m.role == "user")
        scene = self._resolver.for_image(image)

        if user_text == "Describe the image in a few sentences.":
            return scene.global_caption

        if user_text.startswith("Describe the object marked by"):
            m = self._COORDS.search(user_text)
            if m is None:
                raise OracleError(f"no coordinates found in instance prompt: {user_text!r}")
            nb = NormalizedBox(*(float(g) for g in m.groups()))
            box = denormalize(nb, scene.dims)
            if self._should_corrupt(scene.scene_id, m.group(0)):
                return CORRUPT_DESCRIPTION
            return oracle_describe(scene, box, mode="attributes")

        raise OracleError(f"MLLM oracle cannot interpret prompt: {user_text[:80]!r}")


class OracleLLM:
    """Concept extraction, candidate selection, and description aggregation.

    Selection scores each candidate by informative-token overlap between the
    query and the candidate's description (its concept name for candidates
    listed without a description). Overlap below ``min_overlap`` rejects.
    Ties go to the lower index.
    """

    def __init__(self, scene: SceneManifest | None = None,
                 scenes_dir: str | Path | None = None, min_overlap: int = 1):
        self._resolver = _SceneResolver(scene, scenes_dir)
        self.min_overlap = min_overlap

    def complete(self, messages: list[ChatMessage]) -> str:
        system = next((m.text for m in messages if m.role == "system"), "")
        user = next((m.text for m in messages if m.role == "user"), "")
        if system.startswith("You are an object extractor"):
            return self._extract_concepts(user)
        if '"Blind Teacher,"' in system:
            return self._select(system, user)
        if user.startswith("You are a description aggregator"):
            return self._aggregate(user)
        raise OracleError(f"LLM oracle cannot interpret prompt: {(system or user)[:80]!r}")

    def _extract_concepts(self, user_text: str) -> str:
        caption, query = "", ""
        for line in user_text.splitlines():
            if line.startswith("Image description: "):
                caption = line[len("Image description: "):]
            elif line.startswith("Query: "):
                query = line[len("Query: "):]
        scene = self._resolver.for_caption(caption)
        query_tokens = set(tokenize(query))
        terms: list[str] = []
        for obj in scene.objects:
            for term in [obj.label, *obj.synonyms]:
                if term in query_tokens and term not in terms:
                    terms.append(term)
                    for syn in [obj.label, *obj.synonyms]:
                        if syn not in terms:
                            terms.append(syn)
        return ", ".join(terms)

    _CAND_LINE = re.compile(r"^(\d+)\.\s(.+?)\[\d\.\d{3}, \d\.\d{3}, \d\.\d{3}, \d\.\d{3}\]$")

    def _parse_candidates(self, system_text: str) -> list[tuple[int, str, str | None]]:
        candidates = []
        lines = system_text.splitlines()
        section = None
        for i, line in enumerate(lines):
            if line == "## Main Instance Descriptions":
                section = "main"
            elif line == "## Other Instance Descriptions":
                section = "other"
            elif line.startswith("IMPORTANT NOTE:"):
                break
            elif section:
                m = self._CAND_LINE.match(line)
                if m:
                    desc = None
                    if (section == "main" and i + 1 < len(lines)
                            and lines[i + 1].startswith("Instance Description: ")):
                        desc = lines[i + 1][len("Instance Description: "):]
                    candidates.append((int(m.group(1)), m.group(2), desc))
        return candidates

    def _select(self, system_text: str, query: str) -> str:
        candidates = self._parse_candidates(system_text)
        if not candidates:
            raise OracleError("selector oracle found no candidate lines in the prompt")
        query_tokens = set(tokenize(query))
        mentioned = ", ".join(sorted(query_tokens))
        best_idx, best_score = None, -1
        for idx, concept, desc in candidates:
            score = len(query_tokens & set(tokenize(desc if desc is not None else concept)))
            if score > best_score:
                best_idx, best_score = idx, score
        if best_score < self.min_overlap:
            return (
                f"Reasoning Step 1: The query mentions: {mentioned}.\n"
                "Reasoning Step 2: No candidate description shares enough of these terms.\n"
                "Answer: none"
            )
        return (
            f"Reasoning Step 1: The query mentions: {mentioned}.\n"
            f"Reasoning Step 2: Candidate {best_idx} shares {best_score} of these terms, "
            "the most of any candidate.\n"
            f"Answer: {best_idx}"
        )

    _NUMBERED = re.compile(r"^(\d+)\.\s(.*)$")

    def _aggregate(self, user_text: str) -> str:
        descriptions = []
        in_block = False
        for line in user_text.splitlines():
            if line == "Descriptions:":
                in_block = True
                continue
            if in_block:
                m = self._NUMBERED.match(line)
                if m:
                    descriptions.append(m.group(2))
        if not descriptions:
            raise OracleError("aggregator oracle found no descriptions in the prompt")
        counts: dict[str, int] = {}
        for d in descriptions:
            counts[d] = counts.get(d, 0) + 1
        best = max(counts, key=lambda d: (counts[d], -descriptions.index(d)))
        return best
