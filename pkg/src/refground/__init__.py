"""refground: training-free visual grounding engine and REC evaluation harness."""

from .geometry import (
    ImageDims,
    NormalizedBox,
    PixelBox,
    area_fraction,
    denormalize,
    filter_by_area,
    iou,
    nms,
    normalize,
    sort_by_area_desc,
)
from .gateway import ChatMessage, Detection, EndpointConfig, ImagePayload
from .pipeline import (
    Backends,
    Candidate,
    CandidateSet,
    ConceptSet,
    GroundingResult,
    PipelineConfig,
    ReasoningTrace,
    ground,
    parse_reasoning_trace,
)
from .evaluation import (
    DatasetRecord,
    MetricsReport,
    SampleOutcome,
    aggregate,
    judge_sample,
    load_dataset,
    run_bench,
)
from .scenes import SceneManifest, generate_scene_set

__version__ = "0.1.0"

__all__ = [
    "ImageDims", "NormalizedBox", "PixelBox", "area_fraction", "denormalize",
    "filter_by_area", "iou", "nms", "normalize", "sort_by_area_desc",
    "ChatMessage", "Detection", "EndpointConfig", "ImagePayload",
    "Backends", "Candidate", "CandidateSet", "ConceptSet", "GroundingResult",
    "PipelineConfig", "ReasoningTrace", "ground", "parse_reasoning_trace",
    "DatasetRecord", "MetricsReport", "SampleOutcome", "aggregate",
    "judge_sample", "load_dataset", "run_bench",
    "SceneManifest", "generate_scene_set",
    "__version__",
]
