"""Synthetic multi-speaker corpus and JSON-lines manifests.

Pseudo-speakers differ in pitch, vocal-tract length (formant scaling),
formant bandwidths, glottal spectral tilt, breathiness and fricative
colouring. An utterance is a sequence of consonant-vowel syllables rendered
with a source-filter model; its "text" is the syllable string.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .dsp import CANONICAL_RATE, Waveform

VOWELS = {
    "a": (730.0, 1090.0, 2440.0, 3400.0),
    "i": (270.0, 2290.0, 3010.0, 3700.0),
    "u": (300.0, 870.0, 2240.0, 3300.0),
    "e": (530.0, 1840.0, 2480.0, 3500.0),
    "o": (570.0, 840.0, 2410.0, 3300.0),
}
# consonant -> (noise band low, high) in Hz before speaker scaling, duration in s
CONSONANTS = {
    "s": (4000.0, 7500.0, 0.07),
    "sh": (2200.0, 5000.0, 0.07),
    "f": (1500.0, 7000.0, 0.06),
    "t": (3000.0, 6500.0, 0.025),
    "k": (1500.0, 3500.0, 0.03),
    "h": (800.0, 3000.0, 0.05),
}


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    tract_scale: float
    bandwidth_scale: float
    tilt_hz: float
    breathiness: float
    fricative_scale: float
    vibrato: float
    open_quotient: float = 0.6


@dataclass(eq=False)
class Utterance:
    waveform: Waveform
    speaker_id: str
    text: str
    split: str = "train"


def make_speaker(speaker_id: str, rng: np.random.Generator) -> SpeakerProfile:
    return SpeakerProfile(
        speaker_id=speaker_id,
        f0=float(rng.uniform(85.0, 250.0)),
        tract_scale=float(rng.uniform(0.82, 1.25)),
        bandwidth_scale=float(rng.uniform(0.7, 1.6)),
        tilt_hz=float(rng.uniform(120.0, 600.0)),
        breathiness=float(rng.uniform(0.01, 0.12)),
        fricative_scale=float(rng.uniform(0.8, 1.15)),
        vibrato=float(rng.uniform(0.0, 0.04)),
        open_quotient=float(rng.uniform(0.45, 0.75)),
    )


def _resonator(freq: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unit gain at DC


def _glottal_flow(frac: np.ndarray, open_quotient: float) -> np.ndarray:
    """Rosenberg glottal pulse as a function of the phase within each period."""
    tp = 0.7 * open_quotient
    tn = 0.3 * open_quotient
    g = np.zeros_like(frac)
    rise = frac < tp
    g[rise] = 0.5 * (1.0 - np.cos(np.pi * frac[rise] / tp))
    fall = (frac >= tp) & (frac < tp + tn)
    g[fall] = np.cos(0.5 * np.pi * (frac[fall] - tp) / tn)
    return g


def _vowel(spk: SpeakerProfile, vowel: str, dur: float, f0_start: float,
           rng: np.random.Generator, sr: int) -> np.ndarray:
    n = int(dur * sr)
    t = np.arange(n) / sr
    f0 = f0_start * (1.0 - 0.08 * t / max(dur, 1e-3)) * (1 + spk.vibrato * np.sin(2 * np.pi * 5.5 * t))
    f0 *= 1 + 0.005 * rng.standard_normal(n).cumsum() / np.sqrt(np.arange(1, n + 1))
    phase = np.cumsum(f0 / sr)
    excitation = np.diff(_glottal_flow(phase % 1.0, spk.open_quotient), prepend=0.0) * (sr / f0_start) * 0.05
    # glottal roll-off
    b, a = sp_signal.butter(2, min(spk.tilt_hz, 0.45 * sr) / (sr / 2))
    source = sp_signal.lfilter(b, a, excitation) * np.sqrt(f0_start / 120.0)
    source += spk.breathiness * 0.2 * rng.standard_normal(n)
    out = source
    for k, fc in enumerate(VOWELS[vowel]):
        fc = fc / spk.tract_scale
        if fc >= 0.45 * sr:
            continue
        bw = (60.0 + 25.0 * k) * spk.bandwidth_scale
        b, a = _resonator(fc, bw, sr)
        out = sp_signal.lfilter(b, a, out)
    env = np.minimum(1.0, np.minimum(t / 0.02, (dur - t) / 0.03))
    return out * np.clip(env, 0.0, 1.0)


def _consonant(spk: SpeakerProfile, cons: str, rng: np.random.Generator, sr: int) -> np.ndarray:
    lo, hi, dur = CONSONANTS[cons]
    lo = min(lo * spk.fricative_scale, 0.4 * sr)
    hi = min(hi * spk.fricative_scale, 0.47 * sr)
    n = int(dur * sr)
    b, a = sp_signal.butter(2, [lo / (sr / 2), hi / (sr / 2)], btype="band")
    noise = sp_signal.lfilter(b, a, rng.standard_normal(n))
    env = np.hanning(n)
    return 0.35 * noise * env


def render_utterance(spk: SpeakerProfile, text: str, seed: int, sr: int = CANONICAL_RATE,
                     rms: float = 0.12) -> np.ndarray:
    """Render a space-separated syllable string (e.g. ``"sa ki to"``) for one speaker."""
    rng = np.random.default_rng(seed)
    parts = [np.zeros(int(0.06 * sr))]
    syllables = text.split()
    for i, syl in enumerate(syllables):
        cons = syl[:-1]
        vowel = syl[-1]
        if cons:
            parts.append(_consonant(spk, cons, rng, sr))
        f0 = spk.f0 * (1.05 - 0.1 * i / max(len(syllables), 1))
        parts.append(_vowel(spk, vowel, float(rng.uniform(0.14, 0.2)), f0, rng, sr))
        parts.append(np.zeros(int(rng.uniform(0.02, 0.05) * sr)))
    parts.append(np.zeros(int(0.05 * sr)))
    y = np.concatenate(parts)
    y = y / (np.sqrt(np.mean(y ** 2)) + 1e-12) * rms
    y += 1e-4 * rng.standard_normal(y.shape[0])
    peak = np.max(np.abs(y))
    if peak > 0.95:
        y *= 0.95 / peak
    return y


def random_text(rng: np.random.Generator, n_syllables: int) -> str:
    cons = list(CONSONANTS) + [""]
    vowels = list(VOWELS)
    return " ".join(cons[rng.integers(len(cons))] + vowels[rng.integers(len(vowels))]
                    for _ in range(n_syllables))


def generate_corpus(n_speakers: int, clips_per_speaker: int, seed: int = 0,
                    prefix: str = "spk", train_fraction: float = 0.8,
                    n_syllables: int = 5) -> list[Utterance]:
    """Deterministic corpus; per-speaker split ``round(train_fraction * clips)`` train clips."""
    rng = np.random.default_rng(seed)
    corpus = []
    n_train = int(round(train_fraction * clips_per_speaker))
    for s in range(n_speakers):
        spk = make_speaker(f"{prefix}{s:02d}", rng)
        for c in range(clips_per_speaker):
            text = random_text(rng, n_syllables)
            clip_seed = int(rng.integers(2 ** 31))
            wav = Waveform(render_utterance(spk, text, clip_seed), CANONICAL_RATE, f"{spk.speaker_id}_{c:02d}")
            corpus.append(Utterance(wav, spk.speaker_id, text, "train" if c < n_train else "test"))
    return corpus


# --- manifests --------------------------------------------------------------

@dataclass
class ManifestEntry:
    audio_path: str
    speaker_id: str
    text: str
    split: str


def write_corpus(corpus: list[Utterance], directory) -> Path:
    """Write WAV files plus ``manifest.jsonl``; returns the manifest path."""
    from .io import save_wav

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in corpus:
        path = directory / f"{utt.waveform.id}.wav"
        save_wav(utt.waveform, path)
        entries.append(ManifestEntry(path.name, utt.speaker_id, utt.text, utt.split))
    manifest = directory / "manifest.jsonl"
    write_manifest(entries, manifest)
    return manifest


def write_manifest(entries: list[ManifestEntry], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e)) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        row = json.loads(line)
        missing = {"audio_path", "speaker_id", "text", "split"} - row.keys()
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if row["split"] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: split must be train or test")
        entries.append(ManifestEntry(**{k: row[k] for k in ("audio_path", "speaker_id", "text", "split")}))
    return entries


def load_corpus(manifest_path) -> list[Utterance]:
    from .io import load_wav

    manifest_path = Path(manifest_path)
    out = []
    for e in read_manifest(manifest_path):
        audio = Path(e.audio_path)
        if not audio.is_absolute():
            audio = manifest_path.parent / audio
        out.append(Utterance(load_wav(audio), e.speaker_id, e.text, e.split))
    return out
