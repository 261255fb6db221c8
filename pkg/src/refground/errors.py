"""Exception hierarchy shared across the engine."""


class RefGroundError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RefGroundError):
    """Invalid or unloadable run configuration."""


class GeometryError(RefGroundError):
    """Invalid box arguments (degenerate box, box outside image, bad threshold)."""


class BoxOutsideImageError(GeometryError):
    """A pixel box extends beyond the image it supposedly lives in."""


class GatewayError(RefGroundError):
    """Base class for model-gateway failures."""


class TransportFailureError(GatewayError):
    """Network-level failure that persisted through the retry budget."""


class AuthFailureError(GatewayError):
    """The endpoint rejected our credentials."""


class MalformedResponseError(GatewayError):
    """The endpoint answered, but not in the expected shape."""


class CassetteMissError(GatewayError):
    """Strict replay could not find a recorded entry for this request digest."""

    def __init__(self, digest: str, context: str = ""):
        self.digest = digest
        detail = f" ({context})" if context else ""
        super().__init__(f"no cassette entry for digest {digest}{detail}")


class CassetteIOError(GatewayError):
    """Cassette file could not be read or written."""


class OracleError(GatewayError):
    """An oracle backend could not answer (unknown scene, no matching object)."""


class NoMatchingObjectError(OracleError):
    """No manifest object matches the requested region."""


class PipelineError(RefGroundError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class EmptyConceptSetError(PipelineError):
    def __init__(self, message: str = "no concepts could be parsed from the model reply"):
        super().__init__("concepts", message)


class EmptyCandidateSetError(PipelineError):
    def __init__(self, message: str = "no candidate boxes survived refinement"):
        super().__init__("detection", message)


class SelectionFailureError(PipelineError):
    def __init__(self, message: str):
        super().__init__("selection", message)


class EvaluationError(RefGroundError):
    """Dataset or metrics failure."""


class DatasetParseError(EvaluationError):
    """A dataset record failed validation; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")
