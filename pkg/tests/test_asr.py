import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from voxveil.asr import AsrClient, AsrClientConfig, wer_via_asr
from voxveil.dsp import Waveform
from voxveil.exceptions import MetricUnavailable


class _Handler(BaseHTTPRequestHandler):
    reply = {"text": "sa ki to"}

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        assert body[:4] == b"RIFF"
        data = json.dumps(self.reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


def test_transcribe_and_wer(server):
    w = Waveform(np.zeros(1600))
    assert AsrClient(AsrClientConfig(server)).transcribe(w) == "sa ki to"
    assert wer_via_asr(w, "sa ki to", AsrClientConfig(server)) == 0.0
    assert wer_via_asr(w, "sa ki ta", AsrClientConfig(server)) == pytest.approx(100 / 3)


def test_missing_text_field(server, monkeypatch):
    monkeypatch.setattr(_Handler, "reply", {"words": []})
    with pytest.raises(MetricUnavailable, match="text"):
        AsrClient(AsrClientConfig(server)).transcribe(Waveform(np.zeros(10)))


def test_unreachable_endpoint_degrades_to_none():
    cfg = AsrClientConfig("http://127.0.0.1:9", timeout=0.5)
    with pytest.raises(MetricUnavailable):
        AsrClient(cfg).transcribe(Waveform(np.zeros(10)))
    assert wer_via_asr(Waveform(np.zeros(10)), "a", cfg) is None
    assert wer_via_asr(Waveform(np.zeros(10)), "a", None) is None
