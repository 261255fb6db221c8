"""Record/replay cassettes: request digest -> recorded response.

Cassette files are newline-delimited JSON, one ``{digest, role_kind,
response}`` object per line. They hold digests and responses only, never
request bodies, so no prompt text, image bytes, or credential material can
leak through them.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import CassetteIOError, CassetteMissError
from .gateway import (
    ChatMessage,
    Detection,
    ImagePayload,
    chat_digest,
    detect_digest,
)
from .geometry import PixelBox


@dataclass(frozen=True)
class CassetteEntry:
    digest: str
    role_kind: str  # "llm", "mllm", or "detector"
    response: str | list  # text, or [{label, box}] for the detector


def _entry_to_json(entry: CassetteEntry) -> str:
    return json.dumps(
        {"digest": entry.digest, "role_kind": entry.role_kind, "response": entry.response},
        sort_keys=True,
    )


def write_cassette(path: str | Path, entries: list[CassetteEntry]) -> None:
    try:
        with Path(path).open("w") as fh:
            for entry in entries:
                fh.write(_entry_to_json(entry) + "\n")
    except OSError as exc:
        raise CassetteIOError(f"cannot write cassette {path}: {exc}") from exc


def read_cassette(path: str | Path) -> dict[str, CassetteEntry]:
    entries: dict[str, CassetteEntry] = {}
    try:
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                entry = CassetteEntry(row["digest"], row["role_kind"], row["response"])
                entries[entry.digest] = entry
    except OSError as exc:
        raise CassetteIOError(f"cannot read cassette {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise CassetteIOError(f"corrupt cassette {path}: {exc}") from exc
    return entries


def replay_lookup(path: str | Path, digest: str) -> str | list:
    """One-shot strict lookup; prefer the backend classes for repeated use."""
    entries = read_cassette(path)
    if digest not in entries:
        raise CassetteMissError(digest, context=str(path))
    return entries[digest].response


class CassetteRecorder:
    """Collects entries during a live run and writes them on flush."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, CassetteEntry] = {}
        self._lock = threading.Lock()

    def add(self, digest: str, role_kind: str, response: str | list) -> None:
        with self._lock:
            self._entries[digest] = CassetteEntry(digest, role_kind, response)

    def flush(self) -> None:
        with self._lock:
            ordered = [self._entries[d] for d in sorted(self._entries)]
        write_cassette(self.path, ordered)


class RecordingChatBackend:
    def __init__(self, inner, role_kind: str, recorder: CassetteRecorder):
        self.inner = inner
        self.role_kind = role_kind
        self.recorder = recorder

    def complete(self, messages: list[ChatMessage]) -> str:
        text = self.inner.complete(messages)
        self.recorder.add(chat_digest(self.role_kind, messages), self.role_kind, text)
        return text


class RecordingDetectorBackend:
    def __init__(self, inner, recorder: CassetteRecorder,
                 default_confidence_threshold: float = 0.3):
        self.inner = inner
        self.recorder = recorder
        self.default_confidence_threshold = getattr(
            inner, "default_confidence_threshold", default_confidence_threshold
        )

    def detect(self, image: ImagePayload, vocabulary: list[str],
               confidence_threshold: float | None = None) -> list[Detection]:
        if confidence_threshold is None:
            confidence_threshold = self.default_confidence_threshold
        detections = self.inner.detect(image, vocabulary, confidence_threshold)
        serialized = [{"label": d.concept, "box": d.box.as_list()} for d in detections]
        self.recorder.add(
            detect_digest(image, vocabulary, confidence_threshold), "detector", serialized
        )
        return detections


class ReplayChatBackend:
    """Strict replay: identical requests yield byte-identical responses, no network."""

    def __init__(self, path: str | Path, role_kind: str):
        self.role_kind = role_kind
        self.path = Path(path)
        self._entries = read_cassette(path)

    def complete(self, messages: list[ChatMessage]) -> str:
        digest = chat_digest(self.role_kind, messages)
        if digest not in self._entries:
            raise CassetteMissError(digest, context=f"{self.role_kind} @ {self.path}")
        response = self._entries[digest].response
        if not isinstance(response, str):
            raise CassetteIOError(f"chat entry {digest} holds a non-text response")
        return response


class ReplayDetectorBackend:
    def __init__(self, path: str | Path, default_confidence_threshold: float = 0.3):
        self.path = Path(path)
        self.default_confidence_threshold = default_confidence_threshold
        self._entries = read_cassette(path)

    def detect(self, image: ImagePayload, vocabulary: list[str],
               confidence_threshold: float | None = None) -> list[Detection]:
        if confidence_threshold is None:
            confidence_threshold = self.default_confidence_threshold
        digest = detect_digest(image, vocabulary, confidence_threshold)
        if digest not in self._entries:
            raise CassetteMissError(digest, context=f"detector @ {self.path}")
        rows = self._entries[digest].response
        if not isinstance(rows, list):
            raise CassetteIOError(f"detector entry {digest} holds a non-list response")
        return [Detection(row["label"], PixelBox(*row["box"])) for row in rows]
