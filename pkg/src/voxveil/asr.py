"""Minimal HTTP client for an external speech recogniser (``POST /transcribe``)."""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

from .dsp import Waveform
from .exceptions import MetricUnavailable
from .io import wav_bytes
from .metrics import wer

_LOCKS: dict[str, threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _lock_for(endpoint: str) -> threading.Lock:
    with _LOCKS_GUARD:
        return _LOCKS.setdefault(endpoint, threading.Lock())


@dataclass(frozen=True)
class AsrClientConfig:
    endpoint: str
    timeout: float = 30.0


class AsrClient:
    """Sends WAV bytes and reads ``{"text": ...}``; one request at a time per endpoint."""

    def __init__(self, config: AsrClientConfig):
        self.config = config

    @property
    def url(self) -> str:
        return self.config.endpoint.rstrip("/") + "/transcribe"

    def transcribe(self, w: Waveform) -> str:
        req = urllib.request.Request(self.url, data=wav_bytes(w), method="POST",
                                     headers={"Content-Type": "audio/wav"})
        try:
            with _lock_for(self.config.endpoint):
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise MetricUnavailable(f"ASR endpoint {self.url} unavailable: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise MetricUnavailable(f"ASR endpoint {self.url} returned no 'text' field")
        return payload["text"]


def wer_via_asr(w: Waveform, reference_text: str, config: AsrClientConfig | None) -> float | None:
    """WER in percent, or ``None`` when no endpoint is configured or it cannot be reached."""
    if config is None:
        return None
    try:
        hypothesis = AsrClient(config).transcribe(w)
    except MetricUnavailable:
        return None
    return wer(reference_text, hypothesis)
