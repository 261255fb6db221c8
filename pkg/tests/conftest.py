import json
from pathlib import Path

import pytest

from refground.geometry import ImageDims
from refground.oracle import OracleDetector, OracleLLM, OracleMLLM
from refground.pipeline import Backends
from refground.scenes import generate_scene_set

FIXTURES = Path(__file__).parent / "fixtures"


def load_golden(name: str) -> list[dict]:
    return json.loads((FIXTURES / "golden" / f"{name}.json").read_text())["cases"]


def load_trace_corpus() -> list[dict]:
    return json.loads((FIXTURES / "trace_corpus.json").read_text())["cases"]


def oracle_backends(scenes_dir, min_overlap: int = 1, corrupt_fraction: float = 0.0,
                    corrupt_seed: int = 0) -> Backends:
    return Backends(
        llm=OracleLLM(scenes_dir=scenes_dir, min_overlap=min_overlap),
        mllm=OracleMLLM(scenes_dir=scenes_dir, corrupt_fraction=corrupt_fraction,
                        corrupt_seed=corrupt_seed),
        detector=OracleDetector(scenes_dir=scenes_dir),
    )


@pytest.fixture(scope="session")
def scene_dir_small(tmp_path_factory):
    """Ten plain scenes reused by cheap tests."""
    out = tmp_path_factory.mktemp("scenes_small")
    generate_scene_set(out, 10, seed=11, dims=ImageDims(320, 240))
    return out


@pytest.fixture(scope="session")
def scene_backends(scene_dir_small):
    return oracle_backends(scene_dir_small)
