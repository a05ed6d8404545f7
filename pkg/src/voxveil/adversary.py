"""Adaptive-attacker toolbox: augmentations, denoising, adversarial
counter-perturbations and black-box recovery with natural evolution strategies.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal as sp_signal
from sklearn.base import BaseEstimator, TransformerMixin

from . import dsp
from .dsp import CANONICAL_RATE, DEFAULT_FFT, DEFAULT_MEL
from .exceptions import MetricUnavailable
from .objectives import ObjectiveSettings, ProtectionObjective
from .surrogate import SurrogateModel
from .validation import as_samples, check_in_range

AUGMENTATIONS = ("RS", "Mel", "QD", "FL", "Speed", "Mask", "LPF")
RHO_GRID = tuple(k / 255.0 for k in (0, 2, 4, 8, 10, 12, 16))

_DEFAULTS = {
    "RS": {"intermediate_rate": 8000},
    "Mel": {"n_iter": 32},
    "QD": {"bits": 8},
    "FL": {"low": 300.0, "high": 3400.0},
    "Speed": {"factor": 1.1},
    "Mask": {"span_s": 0.1},
    "LPF": {"cutoff": 4000.0},
}


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {AUGMENTATIONS}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind} does not accept {sorted(unknown)}")
        p = self.resolved
        if self.kind == "QD" and not (2 <= int(p["bits"]) <= 16):
            raise ValueError("QD bits must lie in [2, 16]")
        if self.kind == "Speed":
            check_in_range("speed factor", p["factor"], 0.5, 2.0)
        if self.kind == "Mask":
            check_in_range("mask span", p["span_s"], 0.0, 10.0, low_open=True)
        if self.kind == "FL" and not (0 < p["low"] < p["high"] < CANONICAL_RATE / 2):
            raise ValueError("FL band must satisfy 0 < low < high < Nyquist")
        if self.kind == "LPF":
            check_in_range("LPF cutoff", p["cutoff"], 0.0, CANONICAL_RATE / 2, low_open=True)
        if self.kind == "Mel":
            check_in_range("Griffin-Lim iterations", p["n_iter"], 1, 1000)
        if self.kind == "RS" and p["intermediate_rate"] not in dsp.SUPPORTED_RATES:
            raise ValueError(f"RS intermediate rate must be one of {dsp.SUPPORTED_RATES}")

    @property
    def resolved(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.params}

    @property
    def label(self) -> str:
        if self.kind == "Speed":
            return f"Speed{self.resolved['factor']:g}"
        return self.kind


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if y.shape[0] >= n:
        return y[:n]
    return np.pad(y, (0, n - y.shape[0]))


def quantize(x: np.ndarray, bits: int = 8) -> np.ndarray:
    """Mid-rise quantiser over [-1, 1]; reconstruction error at most 2**-bits."""
    levels = 2 ** bits
    half = levels / 2
    idx = np.clip(np.floor((x + 1.0) * half), 0, levels - 1)
    return (idx + 0.5) / half - 1.0


def change_speed(x: np.ndarray, factor: float) -> np.ndarray:
    """Play back ``factor`` times faster (pitch shifts too); length ``round(N / factor)``."""
    frac = Fraction(factor).limit_denominator(100)
    y = sp_signal.resample_poly(x, frac.denominator, frac.numerator)
    return _fit_length(y, int(round(x.shape[0] / factor)))


def augment(x, spec: AugmentationSpec) -> np.ndarray:
    samples = as_samples(x)
    n = samples.shape[0]
    p = spec.resolved
    kind = spec.kind
    if kind == "RS":
        mid = dsp.resample(samples, CANONICAL_RATE, p["intermediate_rate"])
        y = _fit_length(dsp.resample(mid, p["intermediate_rate"], CANONICAL_RATE), n)
    elif kind == "Mel":
        mel = dsp.mel_spectrogram(samples, DEFAULT_FFT, DEFAULT_MEL)
        mag = dsp.mel_to_linear(mel, DEFAULT_FFT, DEFAULT_MEL)
        y = dsp.griffin_lim(mag, DEFAULT_FFT, n_iter=int(p["n_iter"]), length=n, seed=spec.seed)
    elif kind == "QD":
        y = quantize(samples, int(p["bits"]))
    elif kind == "FL":
        y = dsp.biquad_filter(samples, "bandpass", band=(p["low"], p["high"]))
    elif kind == "Speed":
        y = change_speed(samples, float(p["factor"]))
    elif kind == "Mask":
        span = min(int(round(p["span_s"] * CANONICAL_RATE)), n)
        start = int(np.random.default_rng(spec.seed).integers(0, n - span + 1))
        y = samples.copy()
        y[start:start + span] = 0.0
    else:  # LPF
        y = dsp.biquad_filter(samples, "lowpass", cutoff=p["cutoff"])
    return np.clip(y, -1.0, 1.0)


class Augmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one augmentation to every clip."""

    def __init__(self, kind: str = "RS", params: dict | None = None, seed: int = 0):
        self.kind = kind
        self.params = params
        self.seed = seed

    def fit(self, X, y=None):
        self.spec_ = AugmentationSpec(self.kind, dict(self.params or {}), self.seed)
        return self

    def transform(self, X):
        spec = getattr(self, "spec_", None) or AugmentationSpec(self.kind, dict(self.params or {}), self.seed)
        return [augment(x, AugmentationSpec(spec.kind, spec.params, spec.seed + i)) for i, x in enumerate(X)]


# --- denoising ----------------------------------------------------------------

def spectral_gate_denoise(x, gate_db: float = 10.0, quiet_fraction: float = 0.1,
                          attenuation_db: float = 20.0) -> np.ndarray:
    """STFT-domain noise gate.

    The per-band noise floor is the mean magnitude over the quietest
    ``quiet_fraction`` of frames; bins below ``floor + gate_db`` are attenuated
    by ``attenuation_db``.
    """
    samples = as_samples(x)
    p = DEFAULT_FFT
    s = dsp.stft(samples, p)
    mag = np.abs(s)
    energy = np.sum(mag ** 2, axis=1)
    k = max(1, int(np.ceil(quiet_fraction * s.shape[0])))
    quiet = np.argsort(energy, kind="stable")[:k]
    floor = mag[quiet].mean(axis=0)
    threshold = floor * 10.0 ** (gate_db / 20.0)
    gain = np.where(mag < threshold, 10.0 ** (-attenuation_db / 20.0), 1.0)
    return dsp.istft(s * gain, p, length=samples.shape[0])


def mp3_roundtrip(x, encoder: str | None = "lame", bitrate_kbps: int = 64) -> np.ndarray:
    """Encode and decode through an external MP3 encoder; raises MetricUnavailable if absent."""
    from .io import load_wav, save_wav

    exe = shutil.which(encoder) if encoder else None
    if exe is None:
        raise MetricUnavailable(f"MP3 encoder {encoder!r} not found")
    samples = as_samples(x)
    with tempfile.TemporaryDirectory() as tmp:
        src, mp3, out = Path(tmp, "in.wav"), Path(tmp, "x.mp3"), Path(tmp, "out.wav")
        save_wav(dsp.Waveform(samples), src)
        try:
            subprocess.run([exe, "--quiet", "-b", str(bitrate_kbps), str(src), str(mp3)], check=True)
            subprocess.run([exe, "--quiet", "--decode", str(mp3), str(out)], check=True)
        except (OSError, subprocess.CalledProcessError) as exc:
            raise MetricUnavailable(f"MP3 round trip failed: {exc}") from exc
        return _fit_length(load_wav(out).samples, samples.shape[0])


# --- adversarial training -----------------------------------------------------

@dataclass(frozen=True)
class AdvTrainConfig:
    rho_a: float = 8.0 / 255.0
    rho_u: float = 8.0 / 255.0
    steps: int = 10
    step_size: float | None = None  # None -> rho_a / 4

    def __post_init__(self):
        check_in_range("rho_a", self.rho_a, 0.0, 1.0)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def adversarial_counter_perturbation(x_prot, model: SurrogateModel, cond: np.ndarray,
                                     cfg: AdvTrainConfig = AdvTrainConfig(),
                                     settings: ObjectiveSettings | None = None,
                                     seed: int = 0) -> np.ndarray:
    """Signed-gradient ascent on the protection objective within the ``rho_a`` ball.

    The default objective is the full protection loss with perception terms
    (alpha = 0.05, beta = 10).
    """
    samples = as_samples(x_prot)
    rho = cfg.rho_a
    if rho == 0 or cfg.steps == 0:
        return samples.copy()
    settings = settings or ObjectiveSettings(mode="spec", perception=True)
    noise = None
    if settings.mode == "spec":
        from .objectives import NoiseReference

        noise = NoiseReference.for_clip(samples, seed, model.fft, model.mel)
    objective = ProtectionObjective(samples, model, cond, settings, noise)
    eta = rho / 4.0 if cfg.step_size is None else cfg.step_size
    delta = np.zeros_like(samples)
    for _ in range(cfg.steps):
        _, grad, _ = objective(delta)
        delta = np.clip(delta + eta * np.sign(grad), -rho, rho)
    return np.clip(samples + delta, -1.0, 1.0)


# --- black-box recovery -------------------------------------------------------

@dataclass(frozen=True)
class NesConfig:
    queries: int = 50000
    population: int = 50
    sigma: float = 0.001
    step: float = 0.0005
    objective: str = "max_sim"
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be an even number >= 2 (antithetic pairs)")
        if self.queries < self.population:
            raise ValueError("queries must be >= population")
        if self.objective not in ("max_sim", "min_perception_loss"):
            raise ValueError(f"unknown NES objective {self.objective!r}")


@dataclass
class NesResult:
    waveform: np.ndarray
    best_score: float
    queries_used: int
    history: list[float]


class _CountingScorer:
    def __init__(self, scorer: Callable[[np.ndarray], float], budget: int):
        self._scorer = scorer
        self.budget = budget
        self.used = 0

    def __call__(self, w: np.ndarray) -> float:
        if self.used >= self.budget:
            raise RuntimeError("query budget exhausted")
        self.used += 1
        return float(self._scorer(w))


def nes_recover(x_prot, cfg: NesConfig, scorer: Callable[[np.ndarray], float],
                clip: tuple[float, float] | None = (-1.0, 1.0)) -> NesResult:
    """Maximise a score-only oracle with antithetic NES; returns the best candidate seen.

    For ``objective="min_perception_loss"`` pass the loss as the scorer; it is
    negated internally. Every evaluation, including the starting point,
    counts against ``cfg.queries``.
    """
    w = as_samples(x_prot).copy()
    per_iter = cfg.population + 1
    if cfg.queries < per_iter:
        raise ValueError(f"budget {cfg.queries} is below one iteration ({per_iter} queries)")
    sign = 1.0 if cfg.objective == "max_sim" else -1.0
    oracle = _CountingScorer(lambda v: sign * scorer(v), cfg.queries)
    rng = np.random.default_rng(cfg.seed)
    half = cfg.population // 2
    best_w, best = w.copy(), oracle(w)
    history = [best]
    while oracle.used + cfg.population + 1 <= cfg.queries:
        u = rng.standard_normal((half, w.shape[0]))
        plus = np.array([oracle(w + cfg.sigma * ui) for ui in u])
        minus = np.array([oracle(w - cfg.sigma * ui) for ui in u])
        grad = ((plus - minus)[:, None] * u).sum(axis=0) / (cfg.population * cfg.sigma)
        w = w + cfg.step * grad
        if clip is not None:
            w = np.clip(w, *clip)
        score = oracle(w)
        history.append(score)
        if score > best:
            best, best_w = score, w.copy()
    return NesResult(best_w, sign * best, oracle.used, [sign * h for h in history])
