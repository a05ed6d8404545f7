"""Evaluation metrics: MCD with DTW, SNR, speaker similarity, STOI, WER."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin

from . import dsp
from .dsp import DEFAULT_FFT, DEFAULT_MEL, FftParams, MelParams
from .exceptions import InsufficientVoicedError, ShapeMismatchError
from .intelligibility import stoi_score  # noqa: F401  (re-exported metric)

MCD_CONSTANT = 10.0 / np.log(10.0) * np.sqrt(2.0)
CLONE_THRESHOLD = 0.25
VAD_RANGE_DB = 40.0
MIN_VOICED_FRAMES = 10
EMBED_TOP_DB = 20.0


# --- MCD ------------------------------------------------------------------

def dtw_path_cost(cost: np.ndarray) -> tuple[float, int]:
    """Min accumulated cost over monotone paths from (0, 0) to (n-1, m-1).

    Steps are (1, 0), (0, 1) and (1, 1). Ties in cost are broken toward the
    shorter path. Returns ``(total_cost, path_length)``.
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    acc[0, 0] = cost[0, 0]
    length[0, 0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, best_len = np.inf, 0
            for pi, pj in ((i - 1, j), (i, j - 1), (i - 1, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                c, ln = acc[pi, pj], length[pi, pj]
                if c < best or (c == best and ln < best_len):
                    best, best_len = c, ln
            acc[i, j] = best + cost[i, j]
            length[i, j] = best_len + 1
    return float(acc[-1, -1]), int(length[-1, -1])


def mcd_dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Mel-cepstral distortion between two cepstral sequences (c0 already excluded)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("mcd_dtw needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"coefficient count differs: {a.shape[1]} vs {b.shape[1]}")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    total, length = dtw_path_cost(cost)
    return MCD_CONSTANT * total / length


# --- SNR ------------------------------------------------------------------

def snr_db(x: np.ndarray, delta: np.ndarray) -> float:
    """``10 log10(sum x^2 / sum delta^2)``; ``inf`` when delta is all zero."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeMismatchError("x and delta must have equal length")
    ex = float(np.sum(x * x))
    ed = float(np.sum(delta * delta))
    if ex == 0:
        raise ValueError("SNR undefined for an all-zero signal")
    if ed == 0:
        return float("inf")
    return 10.0 * np.log10(ex / ed)


# --- speaker similarity -----------------------------------------------------

def _deltas(c: np.ndarray, width: int = 2) -> np.ndarray:
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    n = c.shape[0]
    num = sum(k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
              for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def voiced_mask(mel: np.ndarray, range_db: float = VAD_RANGE_DB) -> np.ndarray:
    """Frames whose energy lies within ``range_db`` of the loudest frame."""
    energy_db = 10.0 / np.log(10.0) * logsumexp(mel, axis=1)
    return energy_db > energy_db.max() - range_db


def embedding_from_mel(mel: np.ndarray, top_db: float | None = EMBED_TOP_DB) -> np.ndarray:
    """52-dim statistics: mean and std of 13 MFCCs and their deltas over voiced frames.

    With ``top_db`` set, log-mel energies are floored at ``top_db`` below the
    utterance maximum before the cepstrum is taken.
    """
    mel = np.asarray(mel, dtype=np.float64)
    mask = voiced_mask(mel)
    if mask.sum() < MIN_VOICED_FRAMES:
        raise InsufficientVoicedError(f"only {int(mask.sum())} voiced frames (< {MIN_VOICED_FRAMES})")
    if top_db is not None:
        mel = np.maximum(mel, mel.max() - top_db * np.log(10.0) / 10.0)
    c = dsp.mfcc_from_mel(mel)
    feats = np.concatenate([c, _deltas(c)], axis=1)[mask]
    return np.concatenate([feats.mean(axis=0), feats.std(axis=0)])


def speaker_embedding(x: np.ndarray, p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL) -> np.ndarray:
    return embedding_from_mel(dsp.mel_spectrogram(x, p, m))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    # sqrt of the product (not product of norms) makes cosine(a, a) exactly 1
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa == 0 or bb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / np.sqrt(aa * bb), -1.0, 1.0))


class SpeakerEncoder(TransformerMixin, BaseEstimator):
    """MFCC-statistics speaker encoder with a fitted background normalisation.

    ``fit`` learns per-dimension mean and scale of the embedding over a
    reference population of utterances, so cosine scores are taken relative to
    the population rather than the raw (always positively correlated) stats.
    Unfitted, :meth:`similarity` uses the raw statistics.
    """

    def __init__(self, n_fft: int = 1024, hop: int = 256, n_mels: int = 80):
        self.n_fft = n_fft
        self.hop = hop
        self.n_mels = n_mels

    def _params(self):
        return FftParams(n_fft=self.n_fft, hop=self.hop, win=self.n_fft), MelParams(n_mels=self.n_mels)

    def embed(self, x) -> np.ndarray:
        p, m = self._params()
        return speaker_embedding(x, p, m)

    def fit(self, X, y=None):
        emb = np.stack([self.embed(x) for x in X])
        self.mean_ = emb.mean(axis=0)
        self.scale_ = emb.std(axis=0) + 1e-3 * (np.abs(emb).mean(axis=0) + 1e-12)
        return self

    def _normalise(self, emb: np.ndarray) -> np.ndarray:
        if hasattr(self, "mean_"):
            return (emb - self.mean_) / self.scale_
        return emb

    def transform(self, X):
        return np.stack([self._normalise(self.embed(x)) for x in X])

    def transform_mel(self, mels):
        return np.stack([self._normalise(embedding_from_mel(m)) for m in mels])

    def similarity(self, a, b) -> float:
        return cosine(self._normalise(self.embed(a)), self._normalise(self.embed(b)))

    def similarity_mel(self, mel_a, mel_b) -> float:
        return cosine(self._normalise(embedding_from_mel(mel_a)), self._normalise(embedding_from_mel(mel_b)))


def speaker_sim(a: np.ndarray, b: np.ndarray, encoder: SpeakerEncoder | None = None) -> float:
    """Cosine similarity of speaker embeddings, in [-1, 1]."""
    encoder = SpeakerEncoder() if encoder is None else encoder
    return encoder.similarity(a, b)


def attack_success_rate(sims) -> float:
    sims = list(sims)
    if not sims:
        raise ValueError("attack_success_rate needs at least one score")
    return 100.0 * sum(1 for s in sims if s > CLONE_THRESHOLD) / len(sims)


# --- WER ------------------------------------------------------------------

def word_edit_distance(reference: list[str], hypothesis: list[str]) -> int:
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate in percent; may exceed 100 with insertions."""
    ref = reference.split()
    if not ref:
        raise ValueError("reference transcript is empty")
    return 100.0 * word_edit_distance(ref, hypothesis.split()) / len(ref)


@dataclass
class MetricReport:
    """Per-clip metric bundle; fields that do not apply to a row are ``None``."""

    mcd: float | None = None
    snr_db: float | None = None
    sim: float | None = None
    stoi: float | None = None
    wer_pct: float | None = None
    clip_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        if self.sim is not None and not -1.0 <= self.sim <= 1.0:
            raise ValueError(f"sim out of range: {self.sim}")
        if self.stoi is not None and not 0.0 <= self.stoi <= 1.0:
            raise ValueError(f"stoi out of range: {self.stoi}")
        if self.mcd is not None and self.mcd < 0:
            raise ValueError(f"mcd must be non-negative: {self.mcd}")

    @property
    def attack_success(self) -> bool | None:
        return None if self.sim is None else self.sim > CLONE_THRESHOLD

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_success"] = self.attack_success
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d.get(k) for k in ("mcd", "snr_db", "sim", "stoi", "wer_pct")},
                   clip_id=d.get("clip_id", ""), speaker_id=d.get("speaker_id", ""))
