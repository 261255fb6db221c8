"""Record a run into a cassette, then replay it byte-for-byte with no backends.

Run: python3 demos/06_record_replay.py
"""

import tempfile
from pathlib import Path

from refground.cassette import CassetteRecorder
from refground.config import replay_backends, wrap_recording
from refground.evaluation import load_dataset, run_bench, write_report
from refground.oracle import OracleDetector, OracleLLM, OracleMLLM
from refground.pipeline import Backends, PipelineConfig
from refground.scenes import generate_scene_set

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    dataset = generate_scene_set(tmp / "scenes", n_scenes=4, seed=7)
    records = load_dataset(dataset)
    cfg = PipelineConfig()

    # Pass 1: run against real backends (oracles here) while recording every
    # model interaction keyed by its request digest.
    cassette = tmp / "run.cassette.jsonl"
    recorder = CassetteRecorder(cassette)
    live = wrap_recording(Backends(
        llm=OracleLLM(scenes_dir=tmp / "scenes"),
        mllm=OracleMLLM(scenes_dir=tmp / "scenes"),
        detector=OracleDetector(scenes_dir=tmp / "scenes"),
    ), recorder)
    report_a, outcomes_a = run_bench(live, records, cfg)
    recorder.flush()
    write_report(report_a, outcomes_a, tmp / "recorded.jsonl")
    entries = len(cassette.read_text().splitlines())
    print(f"recorded {entries} model interactions:", report_a.summary_line())

    # Pass 2: every role answers strictly from the cassette. Identical
    # requests produce identical digests, so the replayed report matches the
    # recorded one byte for byte.
    replayed = replay_backends(cassette)
    report_b, outcomes_b = run_bench(replayed, records, cfg)
    write_report(report_b, outcomes_b, tmp / "replayed.jsonl")
    identical = (tmp / "recorded.jsonl").read_bytes() == (tmp / "replayed.jsonl").read_bytes()
    print("replayed report byte-identical:", identical)
