"""Run configuration: a single YAML tree validated before any model traffic.

Endpoint entries pick a backend kind per model role:

    endpoints:
      llm:      {kind: oracle, scenes_dir: ./scenes}
      mllm:     {kind: http, base_url: "http://host:8000", model_name: m,
                 api_key_env: MLLM_API_KEY, temperature: 0.7}
      detector: {kind: replay, cassette: ./run.cassette.jsonl}

Secrets are referenced by environment-variable name only and never written
to any file this package produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cassette import (
    CassetteRecorder,
    RecordingChatBackend,
    RecordingDetectorBackend,
    ReplayChatBackend,
    ReplayDetectorBackend,
)
from .errors import ConfigError
from .gateway import EndpointConfig, GatewayError, HttpChatBackend, HttpDetectorBackend
from .oracle import OracleDetector, OracleLLM, OracleMLLM
from .pipeline import DEFAULT_REJECTION_TOKENS, Backends, PipelineConfig
from .prompts import load_template_overrides
from .visual import VisualPromptSpec

ROLE_NAMES = ("llm", "mllm", "detector")
ENDPOINT_KINDS = ("http", "oracle", "replay")


@dataclass
class EndpointSpec:
    kind: str
    # http
    base_url: str = ""
    model_name: str = ""
    api_key_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    temperature: float = 0.0
    # oracle
    scenes_dir: str | None = None
    min_overlap: int = 1
    corrupt_fraction: float = 0.0
    corrupt_seed: int = 0
    # replay
    cassette: str | None = None

    def validate(self, role: str) -> None:
        if self.kind not in ENDPOINT_KINDS:
            raise ConfigError(f"{role}: unknown endpoint kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError(f"{role}: http endpoint needs base_url")
        if self.kind == "oracle" and not self.scenes_dir:
            raise ConfigError(f"{role}: oracle endpoint needs scenes_dir")
        if self.kind == "replay" and not self.cassette:
            raise ConfigError(f"{role}: replay endpoint needs cassette")
        try:
            self.endpoint_config()
        except GatewayError as exc:
            raise ConfigError(f"{role}: {exc}") from exc

    def endpoint_config(self) -> EndpointConfig:
        return EndpointConfig(
            base_url=self.base_url,
            model_name=self.model_name,
            api_key_env=self.api_key_env,
            timeout=self.timeout,
            max_retries=self.max_retries,
            retry_backoff=self.retry_backoff,
            temperature=self.temperature,
        )


@dataclass
class ConcurrencyConfig:
    per_endpoint: int = 4
    samples: int = 1
    pipeline_calls: int = 1

    def validate(self) -> None:
        if min(self.per_endpoint, self.samples, self.pipeline_calls) < 1:
            raise ConfigError("concurrency limits must be >= 1")


@dataclass
class RunConfig:
    endpoints: dict[str, EndpointSpec]
    seed: int = 0
    min_area_fraction: float = 0.025
    nms_iou: float = 0.7
    max_primary: int = 10
    self_consistency_n: int = 1
    rejection_tokens: tuple[str, ...] = DEFAULT_REJECTION_TOKENS
    max_reprompts: int = 1
    box_format_label: str | None = None
    visual_prompt_name: str | None = None
    noun_examples: list[str] | None = None
    visual_prompt: VisualPromptSpec = field(default_factory=VisualPromptSpec)
    detector_confidence_threshold: float = 0.3
    recall_iou: float = 0.5
    concurrency: ConcurrencyConfig = field(default_factory=ConcurrencyConfig)
    prompt_overrides_dir: str | None = None

    def validate(self) -> None:
        for role in ROLE_NAMES:
            if role not in self.endpoints:
                raise ConfigError(f"missing endpoint config for role {role!r}")
            self.endpoints[role].validate(role)
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise ConfigError("min_area_fraction outside [0, 1)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("nms_iou outside (0, 1]")
        if self.max_primary < 1:
            raise ConfigError("max_primary must be >= 1")
        if self.self_consistency_n < 1:
            raise ConfigError("self_consistency_n must be >= 1")
        if self.self_consistency_n > 1:
            mllm = self.endpoints["mllm"]
            if mllm.kind == "http" and mllm.temperature <= 0:
                raise ConfigError(
                    "self_consistency_n > 1 needs mllm sampling temperature > 0"
                )
        if not 0.0 <= self.detector_confidence_threshold <= 1.0:
            raise ConfigError("detector_confidence_threshold outside [0, 1]")
        if not 0.0 < self.recall_iou <= 1.0:
            raise ConfigError("recall_iou outside (0, 1]")
        self.concurrency.validate()
        if self.prompt_overrides_dir and not Path(self.prompt_overrides_dir).is_dir():
            raise ConfigError(f"prompt_overrides_dir not found: {self.prompt_overrides_dir}")
        self.pipeline_config()  # surfaces range errors early

    def pipeline_config(self) -> PipelineConfig:
        templates = (load_template_overrides(self.prompt_overrides_dir)
                     if self.prompt_overrides_dir else None)
        kwargs = dict(
            min_area_fraction=self.min_area_fraction,
            nms_iou=self.nms_iou,
            max_primary=self.max_primary,
            self_consistency_n=self.self_consistency_n,
            rejection_tokens=tuple(self.rejection_tokens),
            max_reprompts=self.max_reprompts,
            noun_examples=self.noun_examples,
            visual_prompt=self.visual_prompt,
            confidence_threshold=self.detector_confidence_threshold,
            parallel_calls=self.concurrency.pipeline_calls,
        )
        if self.box_format_label is not None:
            kwargs["box_format_label"] = self.box_format_label
        if self.visual_prompt_name is not None:
            kwargs["visual_prompt_name"] = self.visual_prompt_name
        if templates is not None:
            kwargs["templates"] = templates
        return PipelineConfig(**kwargs)


def _endpoint_from_dict(role: str, data: dict) -> EndpointSpec:
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError(f"{role}: endpoint entry must be a mapping with a 'kind'")
    known = {f for f in EndpointSpec.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{role}: unknown endpoint keys {sorted(unknown)}")
    return EndpointSpec(**data)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")

    endpoints_data = data.get("endpoints", {})
    endpoints = {
        role: _endpoint_from_dict(role, spec) for role, spec in endpoints_data.items()
    }
    concurrency = ConcurrencyConfig(**data.get("concurrency", {}))
    vp = data.get("visual_prompt", {})
    visual = VisualPromptSpec(
        outline_color=tuple(vp.get("outline_color", (255, 0, 0))),
        outline_width=vp.get("outline_width", 3),
        blur_sigma=vp.get("blur_sigma", 10.0),
    )
    pipeline_data = data.get("pipeline", {})
    known_pipeline = {
        "min_area_fraction", "nms_iou", "max_primary", "self_consistency_n",
        "rejection_tokens", "max_reprompts", "box_format_label",
        "visual_prompt_name", "noun_examples",
    }
    unknown = set(pipeline_data) - known_pipeline
    if unknown:
        raise ConfigError(f"unknown pipeline keys {sorted(unknown)}")
    cfg = RunConfig(
        endpoints=endpoints,
        seed=data.get("seed", 0),
        visual_prompt=visual,
        detector_confidence_threshold=data.get("detector_confidence_threshold", 0.3),
        recall_iou=data.get("recall_iou", 0.5),
        concurrency=concurrency,
        prompt_overrides_dir=data.get("prompt_overrides_dir"),
        **{k: tuple(v) if k == "rejection_tokens" else v for k, v in pipeline_data.items()},
    )
    cfg.validate()
    return cfg


def build_backends(cfg: RunConfig) -> Backends:
    """Instantiate one backend per role. No network traffic happens here."""
    built = {}
    for role in ROLE_NAMES:
        spec = cfg.endpoints[role]
        if spec.kind == "http":
            endpoint = spec.endpoint_config()
            if role == "detector":
                built[role] = HttpDetectorBackend(
                    endpoint,
                    max_inflight=cfg.concurrency.per_endpoint,
                    default_confidence_threshold=cfg.detector_confidence_threshold,
                )
            else:
                built[role] = HttpChatBackend(endpoint, max_inflight=cfg.concurrency.per_endpoint)
        elif spec.kind == "oracle":
            if role == "llm":
                built[role] = OracleLLM(scenes_dir=spec.scenes_dir, min_overlap=spec.min_overlap)
            elif role == "mllm":
                built[role] = OracleMLLM(
                    scenes_dir=spec.scenes_dir,
                    corrupt_fraction=spec.corrupt_fraction,
                    corrupt_seed=spec.corrupt_seed,
                )
            else:
                built[role] = OracleDetector(
                    scenes_dir=spec.scenes_dir,
                    default_confidence_threshold=cfg.detector_confidence_threshold,
                )
        else:  # replay
            if role == "detector":
                built[role] = ReplayDetectorBackend(
                    spec.cassette,
                    default_confidence_threshold=cfg.detector_confidence_threshold,
                )
            else:
                built[role] = ReplayChatBackend(spec.cassette, role)
    return Backends(llm=built["llm"], mllm=built["mllm"], detector=built["detector"])


def wrap_recording(backends: Backends, recorder: CassetteRecorder,
                   default_confidence_threshold: float = 0.3) -> Backends:
    return Backends(
        llm=RecordingChatBackend(backends.llm, "llm", recorder),
        mllm=RecordingChatBackend(backends.mllm, "mllm", recorder),
        detector=RecordingDetectorBackend(
            backends.detector, recorder,
            default_confidence_threshold=default_confidence_threshold,
        ),
    )


def replay_backends(cassette: str | Path,
                    default_confidence_threshold: float = 0.3) -> Backends:
    return Backends(
        llm=ReplayChatBackend(cassette, "llm"),
        mllm=ReplayChatBackend(cassette, "mllm"),
        detector=ReplayDetectorBackend(
            cassette, default_confidence_threshold=default_confidence_threshold
        ),
    )
