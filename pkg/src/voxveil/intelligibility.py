"""Short-time objective intelligibility (STOI), as a metric and as a differentiable loss.

Classical STOI: both signals are resampled to 10 kHz, frames whose clean
energy is more than 40 dB below the loudest clean frame are dropped, the
remaining signal is analysed in 15 one-third-octave bands, and 384 ms
envelope segments are compared by normalised correlation after clipping the
degraded envelope at -15 dB SDR.

:class:`StoiReference` holds everything that depends only on the clean
signal, so repeated evaluations against many degraded versions (as inside a
perturbation loop) only pay for the degraded branch.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp
from .exceptions import ShapeMismatchError, SignalTooShortError

FS = 10000
FRAME = 256
HOP = FRAME // 2
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150.0
SEGMENT = 30
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
EPS = np.finfo(np.float64).eps
CLIP = 1.0 + 10.0 ** (-BETA_DB / 20.0)
# relative width of the smooth min used on the loss path
SMOOTH_REL = 0.1


@functools.lru_cache(maxsize=1)
def _window() -> np.ndarray:
    # symmetric Hann without the zero end points
    n = np.arange(1, FRAME + 1)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / (FRAME + 1))


@functools.lru_cache(maxsize=1)
def third_octave_matrix() -> np.ndarray:
    freqs = np.linspace(0, FS, NFFT + 1)[:NFFT // 2 + 1]
    k = np.arange(N_BANDS, dtype=np.float64)
    low = MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    high = MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((N_BANDS, freqs.shape[0]))
    for i in range(N_BANDS):
        lo = int(np.argmin(np.abs(freqs - low[i])))
        hi = int(np.argmin(np.abs(freqs - high[i])))
        obm[i, lo:hi] = 1.0
    return obm


def _frame_starts(n: int) -> np.ndarray:
    return np.arange(0, max(n - FRAME, 0), HOP)


def _smooth_min(a: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softplus-smoothed ``min(a, c)`` and its derivative in ``a``."""
    tau = SMOOTH_REL * c + 1e-12
    z = (c - a) / tau
    sp = np.logaddexp(0.0, z)
    return c - tau * sp, 0.5 * (1.0 + np.tanh(0.5 * z))


class StoiReference:
    """Precomputed clean-signal branch of STOI at sample rate ``fs``."""

    def __init__(self, clean: np.ndarray, fs: int = dsp.CANONICAL_RATE):
        clean = np.asarray(clean, dtype=np.float64)
        self.fs = fs
        self.n = clean.shape[0]
        x = dsp.resample(clean, fs, FS) if fs != FS else clean
        self.n10 = x.shape[0]
        w = _window()
        starts = _frame_starts(self.n10)
        if starts.size == 0:
            raise SignalTooShortError("signal shorter than one STOI frame")
        frames = x[starts[:, None] + np.arange(FRAME)] * w
        energy = 20 * np.log10(np.linalg.norm(frames, axis=1) + EPS)
        keep = np.nonzero(energy > energy.max() - DYN_RANGE_DB)[0]
        # silent-frame removal as an index map: sample read by each kept tap,
        # and where it lands after overlap-add of the kept frames
        self.sil_idx = starts[keep][:, None] + np.arange(FRAME)
        self.ola_idx = (np.arange(keep.size) * HOP)[:, None] + np.arange(FRAME)
        self.n_sil = (keep.size - 1) * HOP + FRAME
        self.stft_idx = _frame_starts(self.n_sil)[:, None] + np.arange(FRAME)
        n_frames = self.stft_idx.shape[0]
        if n_frames < SEGMENT:
            raise SignalTooShortError(
                f"only {n_frames} voiced STOI frames (< {SEGMENT}, i.e. 384 ms); skip the STOI term")
        self.x_bands = self._bands(x)[0]
        xs = sliding_window_view(self.x_bands, SEGMENT, axis=1)
        self.x_norm = np.linalg.norm(xs, axis=2, keepdims=True)
        self.x_clip = xs * CLIP
        xc = xs - xs.mean(axis=2, keepdims=True)
        self.x_unit = xc / (np.linalg.norm(xc, axis=2, keepdims=True) + EPS)

    # -- degraded branch -------------------------------------------------------

    def _bands(self, y10: np.ndarray):
        w = _window()
        y_sil = np.bincount(self.ola_idx.ravel(), weights=(y10[self.sil_idx] * w).ravel(),
                            minlength=self.n_sil)
        spec = np.fft.rfft(y_sil[self.stft_idx] * w, n=NFFT, axis=-1)
        power = spec.real ** 2 + spec.imag ** 2
        bands = np.sqrt(third_octave_matrix() @ power.T)
        return bands, spec

    def _bands_adjoint(self, g_bands: np.ndarray, bands: np.ndarray, spec: np.ndarray) -> np.ndarray:
        w = _window()
        safe = np.where(bands > 0, bands, 1.0)
        g_b = np.where(bands > 0, g_bands / (2 * safe), 0.0)
        g_power = (third_octave_matrix().T @ g_b).T
        h = 2.0 * g_power * spec
        h[:, 1:-1] *= 0.5
        g_frames = (np.fft.irfft(h, n=NFFT, axis=-1) * NFFT)[:, :FRAME] * w
        g_sil = np.bincount(self.stft_idx.ravel(), weights=g_frames.ravel(), minlength=self.n_sil)
        g_y10 = np.bincount(self.sil_idx.ravel(), weights=(g_sil[self.ola_idx] * w).ravel(),
                            minlength=self.n10)
        return g_y10

    def _check(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.n,):
            raise ShapeMismatchError(f"degraded signal has shape {y.shape}, clean has ({self.n},)")
        return dsp.resample(y, self.fs, FS) if self.fs != FS else y

    def score(self, degraded: np.ndarray, smooth: bool = False) -> float:
        y_bands, _ = self._bands(self._check(degraded))
        ys = sliding_window_view(y_bands, SEGMENT, axis=1)
        yn = ys * (self.x_norm / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS))
        yp = _smooth_min(yn, self.x_clip)[0] if smooth else np.minimum(yn, self.x_clip)
        yc = yp - yp.mean(axis=2, keepdims=True)
        yu = yc / (np.linalg.norm(yc, axis=2, keepdims=True) + EPS)
        return float(np.sum(yu * self.x_unit) / (yu.shape[0] * yu.shape[1]))

    def loss_and_grad(self, degraded: np.ndarray) -> tuple[float, np.ndarray]:
        """``1 - STOI`` with smooth clipping, and its gradient w.r.t. ``degraded``."""
        y10 = self._check(degraded)
        y_bands, spec = self._bands(y10)
        ys = sliding_window_view(y_bands, SEGMENT, axis=1)
        r = np.linalg.norm(ys, axis=2, keepdims=True)
        a = self.x_norm / (r + EPS)
        yn = ys * a
        yp, dmin = _smooth_min(yn, self.x_clip)
        yc = yp - yp.mean(axis=2, keepdims=True)
        nrm = np.linalg.norm(yc, axis=2, keepdims=True)
        yu = yc / (nrm + EPS)
        scale = 1.0 / (yu.shape[0] * yu.shape[1])
        d = float(np.sum(yu * self.x_unit) * scale)

        g_yu = -self.x_unit * scale  # loss = 1 - d
        safe_nrm = np.where(nrm > 0, nrm, 1.0)
        g_yc = g_yu / (nrm + EPS) - yc * np.sum(yc * g_yu, axis=2, keepdims=True) / (
            safe_nrm * (nrm + EPS) ** 2)
        g_yp = g_yc - g_yc.mean(axis=2, keepdims=True)
        g_yn = g_yp * dmin
        safe_r = np.where(r > 0, r, 1.0)
        g_ys = a * g_yn - self.x_norm * np.sum(ys * g_yn, axis=2, keepdims=True) / (
            (r + EPS) ** 2 * safe_r) * ys
        g_bands = np.zeros_like(y_bands)
        n_seg = g_ys.shape[1]
        for k in range(SEGMENT):
            g_bands[:, k:k + n_seg] += g_ys[:, :, k]
        g_y10 = self._bands_adjoint(g_bands, y_bands, spec)
        g = dsp.resample_adjoint(g_y10, self.n, self.fs, FS) if self.fs != FS else g_y10
        return 1.0 - d, g


def stoi_score(clean: np.ndarray, degraded: np.ndarray, fs: int = dsp.CANONICAL_RATE) -> float:
    """Classical STOI in [0, 1] (hard clipping); 1 for identical inputs."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.shape != degraded.shape:
        raise ShapeMismatchError("clean and degraded must have equal length")
    return float(np.clip(StoiReference(clean, fs).score(degraded), 0.0, 1.0))
