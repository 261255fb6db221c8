"""Uniform clients for the three model roles: LLM, MLLM, and detector.

Backends are duck-typed: a chat backend exposes ``complete(messages) -> str``
and a detector backend ``detect(image, vocabulary, confidence_threshold) ->
list[Detection]``. Live HTTP, record/replay cassette, and scene-manifest
oracle backends all share those two surfaces, so the pipeline never knows
which one it is talking to.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests
from PIL import Image

from .errors import (
    AuthFailureError,
    GatewayError,
    MalformedResponseError,
    TransportFailureError,
)
from .geometry import ImageDims, PixelBox

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ImagePayload:
    """Encoded raster plus its decoded dimensions."""

    data: bytes
    format: str  # "png" or "jpeg"
    dims: ImageDims
    source_path: str | None = None

    def __post_init__(self):
        if self.format not in ("png", "jpeg"):
            raise GatewayError(f"unsupported image format {self.format!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "ImagePayload":
        raw = Path(path).read_bytes()
        with Image.open(io.BytesIO(raw)) as img:
            fmt = (img.format or "").lower()
            fmt = "jpeg" if fmt == "jpg" else fmt
            dims = ImageDims(img.width, img.height)
        return cls(data=raw, format=fmt, dims=dims, source_path=str(path))

    @classmethod
    def from_pil(cls, img: Image.Image, source_path: str | None = None) -> "ImagePayload":
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return cls(
            data=buf.getvalue(),
            format="png",
            dims=ImageDims(img.width, img.height),
            source_path=source_path,
        )

    def to_pil(self) -> Image.Image:
        return Image.open(io.BytesIO(self.data)).convert("RGB")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    image: ImagePayload | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise GatewayError(f"unknown role {self.role!r}")
        if self.image is not None and self.role != "user":
            raise GatewayError("images are only allowed on user messages")


@dataclass(frozen=True)
class Detection:
    concept: str
    box: PixelBox

    def __post_init__(self):
        c = self.concept
        if not c or c != c.strip().lower():
            raise GatewayError(f"concept must be non-empty lowercase trimmed, got {c!r}")


@dataclass
class EndpointConfig:
    base_url: str = ""
    model_name: str = ""
    api_key_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0  # seconds; doubles per retry
    temperature: float = 0.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise GatewayError("timeout must be positive")
        if self.max_retries < 0 or self.temperature < 0:
            raise GatewayError("max_retries and temperature must be non-negative")


# --------------------------------------------------------------------------
# Request digests (cassette keys). Only the rendered request participates:
# role kind, message texts, image content hashes, detector vocabulary and
# threshold. Endpoint identity and sampling settings stay out so cassettes
# survive config edits.

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def chat_digest(role_kind: str, messages: list[ChatMessage]) -> str:
    payload = {
        "kind": role_kind,
        "messages": [
            {
                "role": m.role,
                "text": m.text,
                "image": m.image.sha256 if m.image else None,
            }
            for m in messages
        ],
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def detect_digest(image: ImagePayload, vocabulary: list[str], confidence_threshold: float) -> str:
    payload = {
        "kind": "detector",
        "image": image.sha256,
        "vocabulary": list(vocabulary),
        "confidence_threshold": confidence_threshold,
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


# --------------------------------------------------------------------------
# Role-level entry points: precondition checks are uniform across backends.

def llm_complete(backend, messages: list[ChatMessage]) -> str:
    if any(m.image is not None for m in messages):
        raise GatewayError("LLM role accepts text-only messages")
    return backend.complete(messages)


def mllm_complete(backend, messages: list[ChatMessage]) -> str:
    if sum(1 for m in messages if m.image is not None) != 1:
        raise GatewayError("MLLM role requires exactly one image-bearing message")
    return backend.complete(messages)


def detect(
    backend,
    image: ImagePayload,
    vocabulary: list[str],
    confidence_threshold: float | None = None,
) -> list[Detection]:
    if not vocabulary:
        raise GatewayError("detector vocabulary must be non-empty")
    detections = backend.detect(image, vocabulary, confidence_threshold)
    return clamp_detections(detections, image.dims)


def clamp_detections(detections: list[Detection], dims: ImageDims) -> list[Detection]:
    """Clip boxes to image bounds; degenerate results are dropped, both logged."""
    out = []
    for det in detections:
        b = det.box
        if b.x_min >= 0 and b.y_min >= 0 and b.x_max <= dims.width and b.y_max <= dims.height:
            out.append(det)
            continue
        x0 = min(max(b.x_min, 0.0), float(dims.width))
        y0 = min(max(b.y_min, 0.0), float(dims.height))
        x1 = min(max(b.x_max, 0.0), float(dims.width))
        y1 = min(max(b.y_max, 0.0), float(dims.height))
        if x0 >= x1 or y0 >= y1:
            logger.warning("dropping detection fully outside image: %s %s", det.concept, b.as_list())
            continue
        logger.warning("clamping detection to image bounds: %s %s", det.concept, b.as_list())
        out.append(Detection(det.concept, PixelBox(x0, y0, x1, y1)))
    return out


# --------------------------------------------------------------------------
# Live HTTP backends.

class _RetryingHttp:
    """Shared POST-with-retries plumbing for the live backends."""

    def __init__(self, config: EndpointConfig, max_inflight: int = 4, session=None):
        self.config = config
        self._session = session or requests.Session()
        self._limiter = threading.BoundedSemaphore(max_inflight)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def post_json(self, path: str, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + path
        attempts = self.config.max_retries + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.config.retry_backoff * 2 ** (attempt - 1))
            with self._limiter:
                try:
                    resp = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=self.config.timeout
                    )
                except requests.RequestException as exc:
                    last_exc = exc
                    logger.warning("transport error on %s (attempt %d): %s", url, attempt + 1, exc)
                    continue
            if resp.status_code in (401, 403):
                raise AuthFailureError(f"{url} returned {resp.status_code}")
            if resp.status_code >= 500:
                last_exc = TransportFailureError(f"{url} returned {resp.status_code}")
                logger.warning("server error on %s (attempt %d): %d", url, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise MalformedResponseError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise MalformedResponseError(f"{url} returned non-JSON body") from exc
        raise TransportFailureError(f"{url} failed after {attempts} attempts: {last_exc}")


def _encode_content(message: ChatMessage):
    if message.image is None:
        return message.text
    return [
        {"type": "text", "text": message.text},
        {
            "type": "image",
            "format": message.image.format,
            "data": base64.b64encode(message.image.data).decode("ascii"),
        },
    ]


class HttpChatBackend:
    """Chat-completion endpoint with role-tagged messages and inline base64 images."""

    def __init__(self, config: EndpointConfig, max_inflight: int = 4, session=None):
        self.config = config
        self._http = _RetryingHttp(config, max_inflight, session)

    def complete(self, messages: list[ChatMessage]) -> str:
        payload = {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [{"role": m.role, "content": _encode_content(m)} for m in messages],
        }
        body = self._http.post_json("/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat response shape: {body!r:.200}") from exc
        if not isinstance(text, str):
            raise MalformedResponseError("chat response content is not a string")
        return text


class HttpDetectorBackend:
    """Detector endpoint: (image, vocabulary, threshold) in, labeled pixel boxes out."""

    def __init__(self, config: EndpointConfig, max_inflight: int = 4,
                 default_confidence_threshold: float = 0.3, session=None):
        self.config = config
        self.default_confidence_threshold = default_confidence_threshold
        self._http = _RetryingHttp(config, max_inflight, session)

    def detect(self, image: ImagePayload, vocabulary: list[str],
               confidence_threshold: float | None = None) -> list[Detection]:
        payload = {
            "image": base64.b64encode(image.data).decode("ascii"),
            "format": image.format,
            "vocabulary": list(vocabulary),
            "confidence_threshold": (
                self.default_confidence_threshold
                if confidence_threshold is None
                else confidence_threshold
            ),
        }
        body = self._http.post_json("/detect", payload)
        try:
            rows = body["detections"]
            return [
                Detection(concept=row["label"].strip().lower(), box=PixelBox(*row["box"]))
                for row in rows
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponseError(f"unexpected detector response shape: {body!r:.200}") from exc


class EchoChatBackend:
    """Test backend returning one canned reply regardless of input."""

    def __init__(self, reply: str):
        self.reply = reply
        self.calls: list[list[ChatMessage]] = []

    def complete(self, messages: list[ChatMessage]) -> str:
        self.calls.append(list(messages))
        return self.reply
