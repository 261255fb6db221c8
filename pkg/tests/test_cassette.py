"""Cassette record/replay: strict lookups, round-trips, and no secret leakage."""

import json

import pytest
from PIL import Image

from refground.cassette import (
    CassetteEntry,
    CassetteRecorder,
    RecordingChatBackend,
    RecordingDetectorBackend,
    ReplayChatBackend,
    ReplayDetectorBackend,
    read_cassette,
    replay_lookup,
    write_cassette,
)
from refground.errors import CassetteIOError, CassetteMissError
from refground.gateway import (
    ChatMessage,
    Detection,
    EchoChatBackend,
    ImagePayload,
    chat_digest,
)
from refground.geometry import PixelBox


def tiny_image(color=(5, 6, 7)) -> ImagePayload:
    return ImagePayload.from_pil(Image.new("RGB", (8, 8), color))


class FixedDetector:
    default_confidence_threshold = 0.3

    def detect(self, image, vocabulary, confidence_threshold=None):
        return [Detection(vocabulary[0], PixelBox(1, 1, 5, 5))]


def test_record_then_replay_chat(tmp_path):
    cassette = tmp_path / "run.cassette.jsonl"
    recorder = CassetteRecorder(cassette)
    live = RecordingChatBackend(EchoChatBackend("the reply"), "llm", recorder)
    messages = [ChatMessage("user", "hello")]
    assert live.complete(messages) == "the reply"
    recorder.flush()

    replay = ReplayChatBackend(cassette, "llm")
    assert replay.complete(messages) == "the reply"


def test_replay_miss_on_perturbed_prompt(tmp_path):
    cassette = tmp_path / "run.cassette.jsonl"
    recorder = CassetteRecorder(cassette)
    live = RecordingChatBackend(EchoChatBackend("r"), "llm", recorder)
    live.complete([ChatMessage("user", "hello")])
    recorder.flush()

    replay = ReplayChatBackend(cassette, "llm")
    with pytest.raises(CassetteMissError):
        replay.complete([ChatMessage("user", "hello!")])  # one byte differs


def test_role_kind_partitions_entries(tmp_path):
    cassette = tmp_path / "run.cassette.jsonl"
    recorder = CassetteRecorder(cassette)
    RecordingChatBackend(EchoChatBackend("r"), "llm", recorder).complete(
        [ChatMessage("user", "x")]
    )
    recorder.flush()
    with pytest.raises(CassetteMissError):
        ReplayChatBackend(cassette, "mllm").complete([ChatMessage("user", "x")])


def test_record_then_replay_detector(tmp_path):
    cassette = tmp_path / "run.cassette.jsonl"
    recorder = CassetteRecorder(cassette)
    live = RecordingDetectorBackend(FixedDetector(), recorder)
    img = tiny_image()
    out = live.detect(img, ["chair"])
    recorder.flush()

    replay = ReplayDetectorBackend(cassette)
    assert replay.detect(img, ["chair"]) == out
    with pytest.raises(CassetteMissError):
        replay.detect(img, ["table"])


def test_cassette_file_round_trip(tmp_path):
    path = tmp_path / "c.jsonl"
    entries = [
        CassetteEntry("d1", "llm", "text one"),
        CassetteEntry("d2", "detector", [{"label": "chair", "box": [1, 2, 3, 4]}]),
        CassetteEntry("d3", "mllm", "text\nwith\nnewlines"),
    ]
    write_cassette(path, entries)
    loaded = read_cassette(path)
    assert set(loaded) == {"d1", "d2", "d3"}
    assert [loaded[e.digest] for e in entries] == entries


def test_replay_lookup_function(tmp_path):
    path = tmp_path / "c.jsonl"
    write_cassette(path, [CassetteEntry("dd", "llm", "yes")])
    assert replay_lookup(path, "dd") == "yes"
    with pytest.raises(CassetteMissError):
        replay_lookup(path, "nope")


def test_missing_cassette_file(tmp_path):
    with pytest.raises(CassetteIOError):
        read_cassette(tmp_path / "absent.jsonl")


def test_corrupt_cassette_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("{broken\n")
    with pytest.raises(CassetteIOError):
        read_cassette(path)


def test_cassette_contains_digests_not_requests(tmp_path, monkeypatch):
    """Cassettes must not embed prompt text, image bytes, or secrets."""
    monkeypatch.setenv("SUPER_SECRET_KEY", "hunter2-token")
    cassette = tmp_path / "c.jsonl"
    recorder = CassetteRecorder(cassette)
    live = RecordingChatBackend(EchoChatBackend("fine"), "llm", recorder)
    secret_prompt = "do not persist me, key=hunter2-token"
    live.complete([ChatMessage("user", secret_prompt)])
    recorder.flush()

    raw = cassette.read_text()
    assert "hunter2-token" not in raw
    assert "do not persist me" not in raw
    row = json.loads(raw.splitlines()[0])
    assert set(row) == {"digest", "role_kind", "response"}
    assert row["digest"] == chat_digest("llm", [ChatMessage("user", secret_prompt)])
