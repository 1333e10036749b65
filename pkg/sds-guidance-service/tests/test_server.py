"""Serving loop: handshake, guide handling, error recovery, transports."""

import base64
import json
import socket
import subprocess
import sys
import threading

import numpy as np
import pytest

from sds_guidance_service.cli import build_parser, main
from sds_guidance_service.protocol import (
    PROTOCOL_VERSION,
    decode_pixels,
    encode_pixels,
)
from sds_guidance_service.sds import AnalyticPredictor, ServiceConfig
from sds_guidance_service.server import GuidanceServer, _Session, serve_stdio

HELLO = json.dumps({"type": "hello", "version": PROTOCOL_VERSION}) + "\n"


def mock_config(**kw):
    return ServiceConfig(port=kw.pop("port", 0), mock=True, **kw)


def analytic_config(**kw):
    return ServiceConfig(
        port=kw.pop("port", 0),
        model="sds_guidance_service.sds:analytic_predictor_factory", **kw)


def session(cfg=None, predictor=None):
    return _Session(cfg or mock_config(), predictor)


def reply(sess, obj) -> dict:
    line = obj if isinstance(obj, bytes) else (
        json.dumps(obj) + "\n").encode()
    return json.loads(sess.respond(line))


def handshake(sess):
    msg = reply(sess, {"type": "hello", "version": PROTOCOL_VERSION})
    assert msg == {"type": "hello_ack", "version": PROTOCOL_VERSION}


def guide_line(image, prompt="a cube", stage=1, **extra):
    h, w, _ = image.shape
    msg = {"type": "guide", "prompt": prompt, "stage": stage,
           "width": w, "height": h, "pixels": encode_pixels(image)}
    msg.update(extra)
    return msg


class TestSession:
    def test_hello_gets_hello_ack_with_matching_version(self):
        handshake(session())

    def test_version_mismatch_is_reported(self):
        sess = session()
        msg = reply(sess, {"type": "hello", "version": 2})
        assert msg["type"] == "error"
        assert "2" in msg["message"] and str(PROTOCOL_VERSION) in msg["message"]
        handshake(sess)  # the right version still works afterwards

    def test_guide_before_handshake_is_an_error(self):
        sess = session()
        msg = reply(sess, guide_line(np.zeros((2, 2, 3))))
        assert msg["type"] == "error"
        assert "handshake" in msg["message"]

    def test_unknown_message_type_is_reported_not_fatal(self):
        sess = session()
        handshake(sess)
        msg = reply(sess, {"type": "negotiate"})
        assert msg["type"] == "error" and "negotiate" in msg["message"]

    def test_blank_lines_are_ignored(self):
        assert session().respond(b"\n") is None
        assert session().respond(b"   \n") is None

    def test_mock_guide_returns_zero_gradient_of_correct_byte_length(self):
        sess = session()
        handshake(sess)
        image = np.random.default_rng(0).uniform(size=(8, 8, 3))
        msg = reply(sess, guide_line(image))
        assert msg["type"] == "grad"
        raw = base64.b64decode(msg["pixels"])
        assert len(raw) == 8 * 8 * 3 * 4 == 768
        np.testing.assert_array_equal(decode_pixels(msg["pixels"], 8, 8), 0.0)

    def test_mock_mode_is_fully_deterministic(self):
        image = np.random.default_rng(1).uniform(size=(4, 4, 3))
        payloads = []
        for _ in range(2):
            sess = session()
            handshake(sess)
            payloads.append(reply(sess, guide_line(image))["pixels"])
        assert payloads[0] == payloads[1]

    def test_protocol_violation_keeps_connection_alive(self):
        sess = session()
        handshake(sess)
        bad = reply(sess, b"this is not json\n")
        assert bad["type"] == "error"
        truncated = guide_line(np.zeros((2, 2, 3)))
        truncated["pixels"] = truncated["pixels"][:8]
        assert reply(sess, truncated)["type"] == "error"
        good = reply(sess, guide_line(np.zeros((2, 2, 3))))
        assert good["type"] == "grad"  # same session still serves

    def test_model_backend_produces_finite_nonzero_gradient(self):
        sess = session(analytic_config(), AnalyticPredictor())
        handshake(sess)
        image = np.random.default_rng(2).uniform(size=(8, 8, 3))
        msg = reply(sess, guide_line(image, guidance_scale=20.0))
        assert msg["type"] == "grad"
        grad = decode_pixels(msg["pixels"], 8, 8)
        norm = float(np.linalg.norm(grad))
        assert np.isfinite(norm) and norm > 0.0

    def test_identical_requests_get_identical_gradients(self):
        image = np.random.default_rng(3).uniform(size=(6, 6, 3))
        line = guide_line(image, guidance_scale=5.0)
        results = []
        for _ in range(2):
            sess = session(analytic_config(), AnalyticPredictor())
            handshake(sess)
            results.append(reply(sess, line)["pixels"])
        assert results[0] == results[1]

    def test_different_pixels_get_different_gradients(self):
        rng = np.random.default_rng(4)
        sess = session(analytic_config(), AnalyticPredictor())
        handshake(sess)
        a = reply(sess, guide_line(rng.uniform(size=(4, 4, 3))))["pixels"]
        b = reply(sess, guide_line(rng.uniform(size=(4, 4, 3))))["pixels"]
        assert a != b

    def test_predictor_failure_becomes_error_response(self):
        class Exploding:
            def predict(self, noisy, t_fraction, prompt):
                raise RuntimeError("backend on fire")

        sess = session(analytic_config(), Exploding())
        handshake(sess)
        msg = reply(sess, guide_line(np.zeros((2, 2, 3))))
        assert msg["type"] == "error"
        assert "guidance failed" in msg["message"]
        assert "backend on fire" in msg["message"]

    def test_unknown_request_fields_are_ignored(self):
        sess = session()
        handshake(sess)
        msg = reply(sess, guide_line(np.zeros((2, 2, 3)), batch_hint=16))
        assert msg["type"] == "grad"


class TcpClient:
    def __init__(self, port):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=10)
        self.rfile = self.sock.makefile("rb")

    def round_trip(self, obj) -> dict:
        self.sock.sendall((json.dumps(obj) + "\n").encode())
        return json.loads(self.rfile.readline())

    def close(self):
        self.rfile.close()
        self.sock.close()


@pytest.fixture
def tcp_server():
    server = GuidanceServer(mock_config(), None)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)


class TestTcpServer:
    def test_serves_multiple_connections(self, tcp_server):
        image = np.zeros((2, 2, 3))
        for _ in range(2):
            client = TcpClient(tcp_server.bound_port)
            ack = client.round_trip(
                {"type": "hello", "version": PROTOCOL_VERSION})
            assert ack["type"] == "hello_ack"
            msg = client.round_trip(guide_line(image))
            assert msg["type"] == "grad"
            client.close()

    def test_concurrent_connections_have_independent_handshakes(
            self, tcp_server):
        first = TcpClient(tcp_server.bound_port)
        second = TcpClient(tcp_server.bound_port)
        ack = first.round_trip({"type": "hello", "version": PROTOCOL_VERSION})
        assert ack["type"] == "hello_ack"
        # second connection has not greeted: guide must be refused there
        msg = second.round_trip(guide_line(np.zeros((2, 2, 3))))
        assert msg["type"] == "error" and "handshake" in msg["message"]
        # ...while the first connection keeps working
        assert first.round_trip(guide_line(np.zeros((2, 2, 3))))[
            "type"] == "grad"
        first.close()
        second.close()


def test_stdio_loop_round_trips(tmp_path):
    inbox = tmp_path / "in.ndjson"
    image = np.random.default_rng(5).uniform(size=(3, 3, 3))
    with inbox.open("wb") as fh:
        fh.write(HELLO.encode())
        fh.write((json.dumps(guide_line(image)) + "\n").encode())
    out = tmp_path / "out.ndjson"
    with inbox.open("rb") as stdin, out.open("wb") as stdout:
        serve_stdio(mock_config(port=None, stdio=True), None, stdin, stdout)
    replies = [json.loads(line) for line in out.read_bytes().splitlines()]
    assert [r["type"] for r in replies] == ["hello_ack", "grad"]
    np.testing.assert_array_equal(decode_pixels(replies[1]["pixels"], 3, 3),
                                  0.0)


def test_stdio_subprocess_end_to_end():
    image = np.random.default_rng(6).uniform(size=(8, 8, 3))
    lines = HELLO + json.dumps(guide_line(image)) + "\n"
    proc = subprocess.run(
        [sys.executable, "-m", "sds_guidance_service.cli",
         "--stdio", "--mock"],
        input=lines.encode(), capture_output=True, timeout=60)
    assert proc.returncode == 0, proc.stderr.decode()
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    assert [r["type"] for r in replies] == ["hello_ack", "grad"]
    assert len(base64.b64decode(replies[1]["pixels"])) == 768


class TestCli:
    def test_parser_requires_a_listen_mode(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--mock"])
        assert exc.value.code == 2

    def test_parser_rejects_both_listen_modes(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--port", "0", "--stdio"])
        assert exc.value.code == 2

    def test_bad_range_flag_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--port", "0", "--mock",
                                       "--stage1-range", "nope"])
        assert exc.value.code == 2

    def test_invalid_config_reports_and_returns_1(self, capsys):
        assert main(["--port", "70000", "--mock"]) == 1
        assert "port" in capsys.readouterr().err
        assert main(["--port", "0"]) == 1  # neither --mock nor --model
        assert "--mock" in capsys.readouterr().err

    def test_defaults_match_documented_service_parameters(self):
        args = build_parser().parse_args(["--stdio", "--mock"])
        assert args.guidance_scale == 20.0
        assert args.stage1_range == (0.2, 0.98)
        assert args.stage2_range == (0.02, 0.5)
        assert args.weighting == "constant"
