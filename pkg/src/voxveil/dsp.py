"""Signal-processing primitives with exact vector-Jacobian companions.

Every differentiable transform comes in two flavours: a plain function that
returns the value, and a ``*_vjp`` function returning ``(value, pullback)``
where ``pullback(upstream)`` maps the gradient of a scalar loss with respect
to the output back onto the input samples.

Complex gradients follow the convention ``dL/dRe + 1j * dL/dIm``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from .exceptions import ParamMismatchError, SignalTooShortError, UnsupportedRateError

CANONICAL_RATE = 16000
SUPPORTED_RATES = (8000, 10000, 16000, 22050, 24000)

Pullback = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class Waveform:
    """Mono audio signal in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE
    id: str = ""
    source_rate: int | None = None  # rate of the file before resampling on load

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FftParams:
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    window: str = "hann"
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        if not (0 < self.hop <= self.win <= self.n_fft):
            raise ParamMismatchError(
                f"need 0 < hop <= win <= n_fft, got hop={self.hop} win={self.win} n_fft={self.n_fft}"
            )
        if self.window != "hann":
            raise ParamMismatchError(f"unsupported window {self.window!r}")
        # periodic Hann overlap-adds to a constant when hop divides win/2
        if self.win % self.hop or self.win // self.hop < 2:
            raise ParamMismatchError("Hann window is not COLA at this hop")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    floor: float = 1e-10


DEFAULT_FFT = FftParams()
DEFAULT_MEL = MelParams()


def _check_length(n: int, p: FftParams):
    if n < p.win:
        raise SignalTooShortError(f"signal too short: {n} samples < window {p.win}")


@functools.lru_cache(maxsize=32)
def analysis_window(p: FftParams) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(p.win) / p.win)
    left = (p.n_fft - p.win) // 2
    out = np.zeros(p.n_fft)
    out[left:left + p.win] = w
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=64)
def _frame_index(n: int, p: FftParams) -> np.ndarray:
    """Sample index read by each (frame, tap) under reflect center-padding."""
    pad = p.n_fft // 2
    padded = np.pad(np.arange(n), pad, mode="reflect")
    starts = np.arange(p.n_frames(n)) * p.hop
    idx = padded[starts[:, None] + np.arange(p.n_fft)[None, :]]
    idx.setflags(write=False)
    return idx


def stft(x: np.ndarray, p: FftParams = DEFAULT_FFT) -> np.ndarray:
    """Complex STFT, shape ``[frames, n_fft // 2 + 1]``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    _check_length(n, p)
    pad = p.n_fft // 2
    if pad < n:
        padded = np.pad(x, pad, mode="reflect")
        frames = sliding_window_view(padded, p.n_fft)[::p.hop][:p.n_frames(n)] * analysis_window(p)
    else:
        frames = x[_frame_index(n, p)] * analysis_window(p)
    return np.fft.rfft(frames, axis=-1)


def stft_adjoint(g: np.ndarray, n: int, p: FftParams = DEFAULT_FFT) -> np.ndarray:
    """Adjoint of :func:`stft` (as a real-linear map) applied to ``g``."""
    h = np.array(g, dtype=np.complex128, copy=True)
    last = h.shape[-1] - 1 if p.n_fft % 2 == 0 else h.shape[-1]
    h[:, 1:last] *= 0.5
    gf = np.fft.irfft(h, n=p.n_fft, axis=-1) * p.n_fft
    gf *= analysis_window(p)
    pad = p.n_fft // 2
    if pad >= n:
        idx = _frame_index(n, p)
        return np.bincount(idx.ravel(), weights=gf.ravel(), minlength=n)
    # overlap-add onto the padded axis, then fold the reflected edges back
    gp = overlap_add(gf, p.hop)
    g = gp[pad:pad + n].copy()
    g[1:pad + 1] += gp[:pad][::-1]
    right = gp[pad + n:]
    g[n - 1 - right.shape[0]:n - 1] += right[::-1]
    return g


def stft_vjp(x: np.ndarray, p: FftParams = DEFAULT_FFT) -> tuple[np.ndarray, Pullback]:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    return stft(x, p), lambda g: stft_adjoint(g, n, p)


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Plain overlap-add of real frames ``[frames, length]``, no normalisation."""
    n_frames, length = frames.shape
    if length % hop:
        out = np.zeros((n_frames - 1) * hop + length)
        for i in range(n_frames):
            out[i * hop:i * hop + length] += frames[i]
        return out
    k = length // hop
    blocks = frames.reshape(n_frames, k, hop)
    out = np.zeros((n_frames - 1 + k, hop))
    for j in range(k):
        out[j:j + n_frames] += blocks[:, j]
    return out.ravel()


def istft(s: np.ndarray, p: FftParams = DEFAULT_FFT, length: int | None = None) -> np.ndarray:
    """Inverse STFT by windowed overlap-add with window-square normalisation."""
    s = np.asarray(s)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ParamMismatchError("expected a [frames, bins] spectrogram with >= 1 frame")
    if s.shape[1] != p.n_bins:
        raise ParamMismatchError(f"spectrogram has {s.shape[1]} bins, params imply {p.n_bins}")
    w = analysis_window(p)
    frames = np.fft.irfft(s, n=p.n_fft, axis=-1) * w
    y = overlap_add(frames, p.hop)
    wsum = overlap_add(np.broadcast_to(w * w, frames.shape), p.hop)
    nz = wsum > 1e-8
    y[nz] /= wsum[nz]
    pad = p.n_fft // 2
    if length is None:
        length = (s.shape[0] - 1) * p.hop
    out = y[pad:pad + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


def magnitude(s: np.ndarray) -> np.ndarray:
    return np.abs(s)


def magnitude_vjp(s: np.ndarray) -> tuple[np.ndarray, Pullback]:
    mag = np.abs(s)
    safe = np.where(mag > 0, mag, 1.0)
    unit = np.where(mag > 0, s / safe, 0.0)
    return mag, lambda g: g * unit


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL) -> np.ndarray:
    """Triangular (peak 1) mel filterbank, shape ``[n_mels, n_bins]``."""
    sr = p.sample_rate
    fmax = sr / 2 if m.fmax is None else m.fmax
    if not 0 <= m.fmin < fmax <= sr / 2:
        raise ParamMismatchError(f"invalid mel range [{m.fmin}, {fmax}] at {sr} Hz")
    edges = mel_to_hz(np.linspace(hz_to_mel(m.fmin), hz_to_mel(fmax), m.n_mels + 2))
    freqs = np.arange(p.n_bins) * sr / p.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    if np.any(fb.sum(axis=1) <= 0):
        raise ParamMismatchError("mel band with no FFT bin; reduce n_mels or raise n_fft")
    fb.setflags(write=False)
    return fb


def power_vjp(s: np.ndarray) -> tuple[np.ndarray, Pullback]:
    return s.real ** 2 + s.imag ** 2, lambda g: 2.0 * g * s


def log_mel_from_power_vjp(power: np.ndarray, p: FftParams = DEFAULT_FFT,
                           m: MelParams = DEFAULT_MEL) -> tuple[np.ndarray, Pullback]:
    fb = mel_filterbank(p, m)
    energy = power @ fb.T
    live = energy > m.floor
    out = np.log(np.where(live, energy, m.floor))

    def pullback(g):
        return (np.where(live, g / np.where(live, energy, 1.0), 0.0)) @ fb

    return out, pullback


def mel_from_stft(s: np.ndarray, p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL) -> np.ndarray:
    energy = (s.real ** 2 + s.imag ** 2) @ mel_filterbank(p, m).T
    return np.log(np.maximum(energy, m.floor))


def mel_spectrogram(x: np.ndarray, p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL) -> np.ndarray:
    """``log(max(M |STFT(x)|^2, floor))``, shape ``[frames, n_mels]``."""
    return mel_from_stft(stft(x, p), p, m)


def mel_spectrogram_vjp(x: np.ndarray, p: FftParams = DEFAULT_FFT,
                        m: MelParams = DEFAULT_MEL) -> tuple[np.ndarray, Pullback]:
    s, back_stft = stft_vjp(x, p)
    power, back_power = power_vjp(s)
    mel, back_mel = log_mel_from_power_vjp(power, p, m)
    return mel, lambda g: back_stft(back_power(back_mel(g)))


def mfcc_from_mel(mel: np.ndarray, n_coeffs: int = 13) -> np.ndarray:
    """DCT-II (orthonormal) of log-mel frames, c0 dropped."""
    return sp_fft.dct(np.asarray(mel, dtype=np.float64), type=2, norm="ortho", axis=-1)[:, 1:n_coeffs + 1]


def mfcc(x: np.ndarray, p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL,
         n_coeffs: int = 13) -> np.ndarray:
    return mfcc_from_mel(mel_spectrogram(x, p, m), n_coeffs)


# --- resampling -------------------------------------------------------------

@dataclass(frozen=True)
class _Resampler:
    up: int
    down: int
    taps: np.ndarray = field(repr=False)
    offset: int

    def out_len(self, n: int) -> int:
        return int(round(n * self.up / self.down))


@functools.lru_cache(maxsize=16)
def _resampler(src: int, target: int) -> _Resampler:
    ratio = Fraction(target, src)
    up, down = ratio.numerator, ratio.denominator
    span = max(up, down)
    half = 24 * span
    half = -(-half // down) * down  # delay must land on an output sample
    taps = sp_signal.firwin(2 * half + 1, 1.0 / span, window=("kaiser", 8.0)) * up
    taps.setflags(write=False)
    return _Resampler(up, down, taps, half // down)


def resample(x: np.ndarray, src_hz: int, target_hz: int) -> np.ndarray:
    """Band-limited polyphase resampling; output length ``round(n * target / src)``."""
    if target_hz not in SUPPORTED_RATES:
        raise UnsupportedRateError(f"unsupported target rate {target_hz}; use one of {SUPPORTED_RATES}")
    x = np.asarray(x, dtype=np.float64)
    if src_hz == target_hz:
        return x.copy()
    r = _resampler(int(src_hz), int(target_hz))
    y = sp_signal.upfirdn(r.taps, x, r.up, r.down)
    n_out = r.out_len(x.shape[0])
    y = y[r.offset:r.offset + n_out]
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return y


def resample_adjoint(g: np.ndarray, n: int, src_hz: int, target_hz: int) -> np.ndarray:
    """Adjoint of :func:`resample` for an input of length ``n``."""
    if src_hz == target_hz:
        return np.array(g, dtype=np.float64)
    r = _resampler(int(src_hz), int(target_hz))
    full_len = -(-((n - 1) * r.up + r.taps.shape[0]) // r.down)
    gf = np.zeros(max(full_len, r.offset + g.shape[0]))
    gf[r.offset:r.offset + g.shape[0]] = g
    k = r.taps.shape[0]
    lead = (-(k - 1)) % r.up
    rev = np.concatenate([np.zeros(lead), r.taps[::-1]])
    out = sp_signal.upfirdn(rev, gf, r.down, r.up)
    start = (k - 1 + lead) // r.up
    out = out[start:start + n]
    if out.shape[0] < n:
        out = np.pad(out, (0, n - out.shape[0]))
    return out


def resample_vjp(x: np.ndarray, src_hz: int, target_hz: int) -> tuple[np.ndarray, Pullback]:
    n = np.asarray(x).shape[0]
    return resample(x, src_hz, target_hz), lambda g: resample_adjoint(g, n, src_hz, target_hz)


# --- filtering --------------------------------------------------------------

def biquad_coefficients(kind: str, sample_rate: int, cutoff: float | None = None,
                        band: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """RBJ-cookbook second-order sections (normalised so ``a[0] == 1``)."""
    nyquist = sample_rate / 2
    if kind == "lowpass":
        if cutoff is None or not 0 < cutoff < nyquist:
            raise ValueError(f"lowpass cutoff must lie in (0, {nyquist}), got {cutoff}")
        w0 = 2 * np.pi * cutoff / sample_rate
        q = 1 / np.sqrt(2)
        alpha = np.sin(w0) / (2 * q)
        cw = np.cos(w0)
        b = np.array([(1 - cw) / 2, 1 - cw, (1 - cw) / 2])
        a = np.array([1 + alpha, -2 * cw, 1 - alpha])
    elif kind == "bandpass":
        if band is None:
            raise ValueError("bandpass needs band=(low, high)")
        low, high = band
        if not 0 < low < high < nyquist:
            raise ValueError(f"bandpass edges must satisfy 0 < low < high < {nyquist}, got {band}")
        center = np.sqrt(low * high)
        q = center / (high - low)
        w0 = 2 * np.pi * center / sample_rate
        alpha = np.sin(w0) / (2 * q)
        b = np.array([alpha, 0.0, -alpha])
        a = np.array([1 + alpha, -2 * np.cos(w0), 1 - alpha])
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    return b / a[0], a / a[0]


def biquad_filter(x: np.ndarray, kind: str, cutoff: float | None = None,
                  band: tuple[float, float] | None = None,
                  sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    b, a = biquad_coefficients(kind, sample_rate, cutoff, band)
    return sp_signal.lfilter(b, a, np.asarray(x, dtype=np.float64))


# --- phase reconstruction ---------------------------------------------------

def griffin_lim(mag: np.ndarray, p: FftParams = DEFAULT_FFT, n_iter: int = 32,
                length: int | None = None, seed: int = 0) -> np.ndarray:
    """Estimate a waveform whose STFT magnitude approximates ``mag``."""
    rng = np.random.default_rng(seed)
    if length is None:
        length = (mag.shape[0] - 1) * p.hop
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    y = istft(mag * phase, p, length)
    for _ in range(n_iter):
        s = stft(y, p)
        phase = s / np.maximum(np.abs(s), 1e-12)
        y = istft(mag * phase, p, length)
    return y


def mel_to_linear(mel: np.ndarray, p: FftParams = DEFAULT_FFT, m: MelParams = DEFAULT_MEL) -> np.ndarray:
    """Least-squares (non-negative clipped) magnitude estimate from a log-mel spectrogram."""
    fb = mel_filterbank(p, m)
    power = np.exp(mel) @ np.linalg.pinv(fb).T
    return np.sqrt(np.clip(power, 0.0, None))
