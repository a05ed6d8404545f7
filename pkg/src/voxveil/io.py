"""WAV (PCM16 mono) and ``key = value`` config file I/O."""

from __future__ import annotations

import io as _io
import os
import wave
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import CANONICAL_RATE, Waveform
from .exceptions import UnsupportedRateError, WavFormatError


def _decode(fh, name: str) -> Waveform:
    try:
        with wave.open(fh, "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise WavFormatError(f"{name}: {channels} channels; only mono is accepted "
                                     "(downmix explicitly before protecting)")
            if width != 2:
                raise WavFormatError(f"{name}: {8 * width}-bit samples; only PCM16 is accepted")
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{name}: malformed WAV header ({exc})") from exc
    if len(raw) != 2 * n:
        raise WavFormatError(f"{name}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != CANONICAL_RATE:
        if rate not in dsp.SUPPORTED_RATES:
            raise UnsupportedRateError(f"{name}: sample rate {rate} Hz not in {dsp.SUPPORTED_RATES}")
        samples = np.clip(dsp.resample(samples, rate, CANONICAL_RATE), -1.0, 1.0)
    return Waveform(samples, CANONICAL_RATE, Path(name).stem, source_rate=rate)


def load_wav(path) -> Waveform:
    """Read a PCM16 mono WAV, resampled to 16 kHz; the file's rate is kept in ``source_rate``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WavFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    return _decode(_io.BytesIO(data), str(path))


def wav_bytes(w: Waveform) -> bytes:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    buf = _io.BytesIO()
    with wave.open(buf, "wb") as out:
        out.setnchannels(1)
        out.setsampwidth(2)
        out.setframerate(int(w.sample_rate))
        out.writeframes(pcm.tobytes())
    return buf.getvalue()


def save_wav(w: Waveform, path) -> Path:
    """Write PCM16 mono atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(wav_bytes(w))
    os.replace(tmp, path)
    return path


# --- config files -------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def write_config(values: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def quantize_within_ball(reference: np.ndarray, target: np.ndarray, epsilon: float) -> np.ndarray:
    """PCM16-exact version of ``target`` whose reloaded samples stay within ``epsilon`` of ``reference``.

    Saving rounds with a 32767 scale while loading divides by 32768, so a plain
    save can move a sample a couple of LSBs past the ball; this clamps the
    integer codes instead. The result survives :func:`save_wav` unchanged.
    """
    codes = np.round(np.clip(target, -1.0, 1.0) * 32767.0)
    low = np.ceil((reference - epsilon) * 32768.0)
    high = np.floor((reference + epsilon) * 32768.0)
    codes = np.clip(np.clip(codes, low, high), -32767, 32767)
    return codes / 32767.0
