"""Gateway: preconditions, digests, clamping, and HTTP backends against a stub server."""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from PIL import Image

from refground.errors import (
    AuthFailureError,
    GatewayError,
    MalformedResponseError,
    TransportFailureError,
)
from refground.gateway import (
    ChatMessage,
    Detection,
    EchoChatBackend,
    EndpointConfig,
    HttpChatBackend,
    HttpDetectorBackend,
    ImagePayload,
    chat_digest,
    clamp_detections,
    detect,
    detect_digest,
    llm_complete,
    mllm_complete,
)
from refground.geometry import ImageDims, PixelBox


def tiny_image(width=8, height=6, color=(10, 20, 30)) -> ImagePayload:
    return ImagePayload.from_pil(Image.new("RGB", (width, height), color))


class TestTypes:
    def test_image_payload_dims_match(self):
        payload = tiny_image(8, 6)
        assert payload.dims == ImageDims(8, 6)
        assert payload.format == "png"

    def test_image_payload_file_roundtrip(self, tmp_path):
        path = tmp_path / "img.png"
        Image.new("RGB", (12, 7), (1, 2, 3)).save(path)
        payload = ImagePayload.from_file(path)
        assert payload.dims == ImageDims(12, 7)
        assert payload.source_path == str(path)

    def test_chat_message_image_only_on_user(self):
        with pytest.raises(GatewayError):
            ChatMessage("system", "x", image=tiny_image())
        ChatMessage("user", "x", image=tiny_image())

    def test_detection_concept_normalized(self):
        with pytest.raises(GatewayError):
            Detection("Chair", PixelBox(0, 0, 1, 1))
        with pytest.raises(GatewayError):
            Detection(" chair", PixelBox(0, 0, 1, 1))
        Detection("chair", PixelBox(0, 0, 1, 1))

    def test_endpoint_config_validation(self):
        with pytest.raises(GatewayError):
            EndpointConfig(timeout=0)
        with pytest.raises(GatewayError):
            EndpointConfig(temperature=-1)


class TestRolePreconditions:
    def test_llm_rejects_images(self):
        backend = EchoChatBackend("hi")
        with pytest.raises(GatewayError):
            llm_complete(backend, [ChatMessage("user", "x", image=tiny_image())])

    def test_llm_echo(self):
        backend = EchoChatBackend("canned reply")
        assert llm_complete(backend, [ChatMessage("user", "x")]) == "canned reply"

    def test_mllm_requires_exactly_one_image(self):
        backend = EchoChatBackend("hi")
        with pytest.raises(GatewayError):
            mllm_complete(backend, [ChatMessage("user", "x")])
        messages = [
            ChatMessage("user", "a", image=tiny_image()),
            ChatMessage("user", "b", image=tiny_image()),
        ]
        with pytest.raises(GatewayError):
            mllm_complete(backend, messages)

    def test_detect_requires_vocabulary(self):
        with pytest.raises(GatewayError):
            detect(object(), tiny_image(), [])


class TestDigests:
    def test_chat_digest_stable(self):
        messages = [ChatMessage("system", "s"), ChatMessage("user", "u")]
        assert chat_digest("llm", messages) == chat_digest("llm", messages)

    def test_chat_digest_sensitive_to_text_and_kind(self):
        messages = [ChatMessage("user", "u")]
        assert chat_digest("llm", messages) != chat_digest("mllm", messages)
        assert chat_digest("llm", messages) != chat_digest("llm", [ChatMessage("user", "u!")])

    def test_chat_digest_includes_image_bytes(self):
        a = [ChatMessage("user", "u", image=tiny_image(color=(1, 1, 1)))]
        b = [ChatMessage("user", "u", image=tiny_image(color=(2, 2, 2)))]
        assert chat_digest("mllm", a) != chat_digest("mllm", b)

    def test_detect_digest_covers_all_inputs(self):
        img = tiny_image()
        base = detect_digest(img, ["chair"], 0.3)
        assert base == detect_digest(img, ["chair"], 0.3)
        assert base != detect_digest(img, ["chair", "dog"], 0.3)
        assert base != detect_digest(img, ["chair"], 0.4)
        assert base != detect_digest(tiny_image(color=(9, 9, 9)), ["chair"], 0.3)


class TestClamping:
    dims = ImageDims(100, 80)

    def test_in_bounds_untouched(self):
        det = Detection("chair", PixelBox(5, 5, 50, 40))
        assert clamp_detections([det], self.dims) == [det]

    def test_overflow_clamped(self):
        det = Detection("chair", PixelBox(50, 40, 150, 120))
        (out,) = clamp_detections([det], self.dims)
        assert out.box == PixelBox(50, 40, 100, 80)

    def test_fully_outside_dropped(self):
        det = Detection("chair", PixelBox(120, 90, 140, 100))
        assert clamp_detections([det], self.dims) == []


# --------------------------------------------------------------------------
# Stub HTTP endpoint exercising the live-backend error taxonomy.

class _StubHandler(BaseHTTPRequestHandler):
    behavior = "ok"
    fail_times = 0
    calls = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).calls.append((self.path, body, self.headers.get("Authorization")))
        behavior = type(self).behavior
        if behavior == "flaky" and type(self).fail_times > 0:
            type(self).fail_times -= 1
            self.send_response(503)
            self.end_headers()
            return
        if behavior == "auth":
            self.send_response(401)
            self.end_headers()
            return
        if behavior == "garbage":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"not json")
            return
        if behavior == "wrong_shape":
            payload = {"unexpected": True}
        elif self.path == "/detect":
            payload = {"detections": [{"label": "chair", "box": [1, 2, 30, 40]}]}
        else:
            payload = {"choices": [{"message": {"content": "stub reply"}}]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.behavior = "ok"
    _StubHandler.fail_times = 0
    _StubHandler.calls = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def fast_config(base_url, **kwargs) -> EndpointConfig:
    defaults = dict(base_url=base_url, model_name="stub", timeout=5,
                    max_retries=2, retry_backoff=0.01)
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


class TestHttpBackends:
    def test_chat_round_trip(self, stub_server):
        backend = HttpChatBackend(fast_config(stub_server))
        reply = llm_complete(backend, [ChatMessage("system", "s"), ChatMessage("user", "u")])
        assert reply == "stub reply"
        path, body, _ = _StubHandler.calls[-1]
        assert path == "/chat/completions"
        assert body["messages"] == [
            {"role": "system", "content": "s"}, {"role": "user", "content": "u"},
        ]

    def test_chat_image_encoded_inline(self, stub_server):
        backend = HttpChatBackend(fast_config(stub_server))
        img = tiny_image()
        mllm_complete(backend, [ChatMessage("user", "describe", image=img)])
        _, body, _ = _StubHandler.calls[-1]
        parts = body["messages"][0]["content"]
        assert parts[0] == {"type": "text", "text": "describe"}
        assert parts[1]["type"] == "image"
        assert base64.b64decode(parts[1]["data"]) == img.data

    def test_api_key_header_from_env(self, stub_server, monkeypatch):
        monkeypatch.setenv("STUB_KEY", "sekrit")
        backend = HttpChatBackend(fast_config(stub_server, api_key_env="STUB_KEY"))
        llm_complete(backend, [ChatMessage("user", "u")])
        _, _, auth = _StubHandler.calls[-1]
        assert auth == "Bearer sekrit"

    def test_transient_errors_retried(self, stub_server):
        _StubHandler.behavior = "flaky"
        _StubHandler.fail_times = 2
        backend = HttpChatBackend(fast_config(stub_server))
        assert backend.complete([ChatMessage("user", "u")]) == "stub reply"
        assert len(_StubHandler.calls) == 3

    def test_transport_failure_after_retries(self, stub_server):
        _StubHandler.behavior = "flaky"
        _StubHandler.fail_times = 99
        backend = HttpChatBackend(fast_config(stub_server))
        with pytest.raises(TransportFailureError):
            backend.complete([ChatMessage("user", "u")])
        assert len(_StubHandler.calls) == 3  # initial + max_retries, no more

    def test_auth_failure_not_retried(self, stub_server):
        _StubHandler.behavior = "auth"
        backend = HttpChatBackend(fast_config(stub_server))
        with pytest.raises(AuthFailureError):
            backend.complete([ChatMessage("user", "u")])
        assert len(_StubHandler.calls) == 1

    def test_malformed_json_body(self, stub_server):
        _StubHandler.behavior = "garbage"
        backend = HttpChatBackend(fast_config(stub_server))
        with pytest.raises(MalformedResponseError):
            backend.complete([ChatMessage("user", "u")])

    def test_malformed_shape(self, stub_server):
        _StubHandler.behavior = "wrong_shape"
        backend = HttpChatBackend(fast_config(stub_server))
        with pytest.raises(MalformedResponseError):
            backend.complete([ChatMessage("user", "u")])

    def test_connection_refused_is_transport_failure(self):
        backend = HttpChatBackend(fast_config("http://127.0.0.1:1", max_retries=0))
        with pytest.raises(TransportFailureError):
            backend.complete([ChatMessage("user", "u")])

    def test_detector_round_trip(self, stub_server):
        backend = HttpDetectorBackend(fast_config(stub_server))
        img = tiny_image(64, 48)
        detections = detect(backend, img, ["chair"], confidence_threshold=0.25)
        assert detections == [Detection("chair", PixelBox(1, 2, 30, 40))]
        _, body, _ = _StubHandler.calls[-1]
        assert body["vocabulary"] == ["chair"]
        assert body["confidence_threshold"] == 0.25

    def test_detector_default_threshold(self, stub_server):
        backend = HttpDetectorBackend(fast_config(stub_server),
                                      default_confidence_threshold=0.4)
        detect(backend, tiny_image(64, 48), ["chair"])
        _, body, _ = _StubHandler.calls[-1]
        assert body["confidence_threshold"] == 0.4

    def test_detector_wrong_shape(self, stub_server):
        _StubHandler.behavior = "wrong_shape"
        backend = HttpDetectorBackend(fast_config(stub_server))
        with pytest.raises(MalformedResponseError):
            backend.detect(tiny_image(), ["chair"], 0.3)

    def test_detector_out_of_bounds_clamped(self, stub_server):
        backend = HttpDetectorBackend(fast_config(stub_server))
        (det,) = detect(backend, tiny_image(20, 20), ["chair"])
        assert det.box == PixelBox(1, 2, 20, 20)  # stub box [1,2,30,40] clamped
