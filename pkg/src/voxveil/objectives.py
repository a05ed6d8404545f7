"""Loss functions for perturbation optimisation.

Pairwise losses return ``(value, grad_first, grad_second)``; waveform losses
return ``(value, grad)`` with respect to the protected waveform.
:class:`ProtectionObjective` assembles the full per-clip objective and its
gradient with respect to the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import FftParams, MelParams
from .exceptions import ShapeMismatchError, SignalTooShortError
from .intelligibility import StoiReference
from .surrogate import SurrogateModel

KL_FLOOR = 1e-10


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.05
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def mel_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean absolute difference over all bins."""
    _same_shape(a, b)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    g = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), g, -g


def _distribution(mel: np.ndarray, floor: bool = True):
    e = np.exp(np.asarray(mel, dtype=np.float64))
    if floor or not np.any(e > 0):
        live = e > KL_FLOOR
        e = np.where(live, e, KL_FLOOR)
    else:
        live = e > 0
    return e / e.sum(), live


def kl_divergence(p_mel: np.ndarray, q_mel: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(p || q) between log-mel spectrograms read as joint time-frequency distributions.

    Each input is exponentiated back to energies and normalised to sum to one
    over all bins. ``q`` is floored at 1e-10 first so the log ratio stays
    finite; empty bins of ``p`` contribute nothing (0 log 0 = 0).
    """
    _same_shape(p_mel, q_mel)
    p, p_live = _distribution(p_mel, floor=False)
    q, q_live = _distribution(q_mel)
    log_ratio = np.log(np.where(p > 0, p, 1.0)) - np.log(q)
    value = float(np.sum(np.where(p > 0, p * log_ratio, 0.0)))
    # d/dm of a normalised exp: p * (g - <g, p>)
    gp = log_ratio + 1.0
    g_p = np.where(p_live, p * (gp - np.sum(gp * p)), 0.0)
    gq = -p / q
    g_q = np.where(q_live, q * (gq - np.sum(gq * q)), 0.0)
    return value, g_p, g_q


def noise_loss(x_hat_mel: np.ndarray, z_mel: np.ndarray, use_kl: bool = True,
               use_l1: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """``KL(x_hat || z) + L1(x_hat, z)``; either term can be switched off for ablations."""
    _same_shape(x_hat_mel, z_mel)
    value = 0.0
    g_hat = np.zeros(np.shape(x_hat_mel))
    g_z = np.zeros(np.shape(z_mel))
    if use_kl:
        v, gh, gz = kl_divergence(x_hat_mel, z_mel)
        value += v
        g_hat += gh
        g_z += gz
    if use_l1:
        v, gh, gz = mel_loss(x_hat_mel, z_mel)
        value += v
        g_hat += gh
        g_z += gz
    return value, g_hat, g_z


def spec_loss(x_prot_mel: np.ndarray, x_hat_mel: np.ndarray, z_mel: np.ndarray,
              w: LossWeights = LossWeights()) -> tuple[float, np.ndarray, np.ndarray]:
    """``L_mel(x_prot, x_hat) + beta * L_noise(x_hat, z)``; gradients w.r.t. (x_prot_mel, x_hat_mel)."""
    m, g_prot, g_hat = mel_loss(x_prot_mel, x_hat_mel)
    n, gh, _ = noise_loss(x_hat_mel, z_mel)
    return m + w.beta * n, g_prot, g_hat + w.beta * gh


def stft_loss(x: np.ndarray, x_prot: np.ndarray,
              p: FftParams = dsp.DEFAULT_FFT) -> tuple[float, np.ndarray]:
    """Frobenius norm of the STFT magnitude difference; gradient w.r.t. ``x_prot``."""
    _same_shape(x, x_prot)
    ref = np.abs(dsp.stft(x, p))
    s, back = dsp.stft_vjp(x_prot, p)
    mag, back_mag = dsp.magnitude_vjp(s)
    diff = mag - ref
    value = float(np.linalg.norm(diff))
    if value == 0.0:
        return 0.0, np.zeros(np.shape(x_prot))
    return value, back(back_mag(diff / value))


def stoi_loss(x: np.ndarray, x_prot: np.ndarray, fs: int = dsp.CANONICAL_RATE,
              reference: StoiReference | None = None) -> tuple[float, np.ndarray]:
    """``1 - STOI`` (smooth clipping) and its gradient w.r.t. ``x_prot``.

    Raises :class:`SignalTooShortError` when fewer than 384 ms of voiced
    frames remain; callers should then drop the STOI term.
    """
    _same_shape(x, x_prot)
    reference = StoiReference(x, fs) if reference is None else reference
    return reference.loss_and_grad(x_prot)


@dataclass
class PerceptionResult:
    value: float
    grad: np.ndarray
    stoi_used: bool


def perception_loss(x: np.ndarray, x_prot: np.ndarray, p: FftParams = dsp.DEFAULT_FFT,
                    reference: StoiReference | None = None) -> PerceptionResult:
    """``L_stoi + L_stft``; falls back to the STFT term alone on clips too short for STOI."""
    v, g = stft_loss(x, x_prot, p)
    try:
        sv, sg = stoi_loss(x, x_prot, p.sample_rate, reference)
    except SignalTooShortError:
        return PerceptionResult(v, g, stoi_used=False)
    return PerceptionResult(v + sv, g + sg, stoi_used=True)


@dataclass(eq=False)
class NoiseReference:
    """Fixed Gaussian reference, RMS-matched to the clip it steers."""

    z: np.ndarray
    z_mel: np.ndarray
    seed: int

    @classmethod
    def for_clip(cls, x: np.ndarray, seed: int, p: FftParams = dsp.DEFAULT_FFT,
                 m: MelParams = dsp.DEFAULT_MEL) -> "NoiseReference":
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(np.shape(x)[0])
        rms = np.sqrt(np.mean(np.square(x)))
        z *= rms / np.sqrt(np.mean(z * z))
        return cls(z, dsp.mel_spectrogram(z, p, m), seed)


# --- composite objective ----------------------------------------------------

MODES = ("pivotal", "spec", "vanilla")


@dataclass
class ObjectiveSettings:
    mode: str = "spec"
    weights: LossWeights = field(default_factory=LossWeights)
    perception: bool = False
    use_kl: bool = True
    use_l1: bool = True
    # sign of the objective: +1 minimises it (protection), -1 is used by the ascent adversary
    direction: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


class ProtectionObjective:
    """Per-clip total loss ``L_SPEC + alpha * L_perception`` (or a mode variant).

    Call with a perturbation ``delta``; returns ``(value, grad_delta, terms)``
    where ``terms`` breaks the value down by component.
    """

    def __init__(self, x: np.ndarray, model: SurrogateModel, cond: np.ndarray,
                 settings: ObjectiveSettings, noise: NoiseReference | None = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.model = model
        self.cond = np.asarray(cond, dtype=np.float64)
        self.settings = settings
        self.p, self.m = model.fft, model.mel
        self.noise = noise
        if settings.mode == "spec" and noise is None:
            raise ValueError("spec mode needs a NoiseReference")
        self.stoi_ref = None
        self.stoi_available = False
        if settings.perception:
            try:
                self.stoi_ref = StoiReference(self.x, self.p.sample_rate)
                self.stoi_available = True
            except SignalTooShortError:
                pass
            self.clean_mag = np.abs(dsp.stft(self.x, self.p))
        if settings.mode == "vanilla":
            fb = dsp.mel_filterbank(self.p, self.m)
            colsum = fb.sum(axis=0)
            self._mel_to_lin = fb / np.where(colsum > 0, colsum, 1.0)

    def __call__(self, delta: np.ndarray) -> tuple[float, np.ndarray, dict]:
        st = self.settings
        raw = self.x + delta
        x_prot = np.clip(raw, -1.0, 1.0)
        s, back_stft = dsp.stft_vjp(x_prot, self.p)
        power, back_power = dsp.power_vjp(s)
        prot_mel, back_mel = dsp.log_mel_from_power_vjp(power, self.p, self.m)
        x_hat, cache = self.model.forward_stft(s, self.cond)

        terms = {}
        mel_v, g_prot_mel, g_hat = mel_loss(prot_mel, x_hat)
        terms["mel"] = mel_v
        total = mel_v
        g_s_extra = 0.0
        if st.mode == "spec":
            n_v, g_n, _ = noise_loss(x_hat, self.noise.z_mel, st.use_kl, st.use_l1)
            terms["noise"] = n_v
            total += st.weights.beta * n_v
            g_hat = g_hat + st.weights.beta * g_n
        elif st.mode == "vanilla":
            v, g_hat_sc, g_s_sc = self._spectral_convergence(s, x_hat)
            terms["spectral_convergence"] = v
            total += v
            g_hat = g_hat + g_hat_sc
            g_s_extra = g_s_sc
            v, g_hat_kl, g_prot_kl = self._frame_kl(x_hat, prot_mel)
            terms["frame_kl"] = v
            total += v
            g_hat = g_hat + g_hat_kl
            g_prot_mel = g_prot_mel + g_prot_kl

        _, g_s_model = self._model_backward(cache, g_hat)
        g_s = g_s_model + back_power(back_mel(g_prot_mel)) + g_s_extra
        grad = back_stft(g_s)

        if st.perception:
            diff = np.abs(s) - self.clean_mag
            v = float(np.linalg.norm(diff))
            if v > 0:
                _, back_mag = dsp.magnitude_vjp(s)
                grad = grad + st.weights.alpha * back_stft(back_mag(diff / v))
            terms["stft"] = v
            total += st.weights.alpha * v
            if self.stoi_available:
                sv, sg = self.stoi_ref.loss_and_grad(x_prot)
                terms["stoi"] = sv
                total += st.weights.alpha * sv
                grad = grad + st.weights.alpha * sg

        # straight-through inside [-1, 1], zero where the clip is active
        grad = np.where(np.abs(raw) <= 1.0, grad, 0.0)
        return st.direction * total, st.direction * grad, terms

    def _model_backward(self, cache: dict, g_hat: np.ndarray):
        return self.model.backward_stft(cache, g_hat, want_params=False)

    # -- vanilla multi-objective terms -------------------------------------------

    def _spectral_convergence(self, s: np.ndarray, x_hat: np.ndarray):
        mag, back_mag = dsp.magnitude_vjp(s)
        est_power = np.exp(x_hat) @ self._mel_to_lin + 1e-10
        est = np.sqrt(est_power)
        diff = mag - est
        num = np.linalg.norm(diff)
        den = np.linalg.norm(mag) + 1e-12
        v = num / den
        g_diff = diff / (max(num, 1e-12) * den)
        g_mag = g_diff - v * mag / den ** 2
        g_est = -g_diff
        g_hat = ((g_est / (2 * est)) @ self._mel_to_lin.T) * np.exp(x_hat)
        return float(v), g_hat, back_mag(g_mag)

    @staticmethod
    def _frame_kl(x_hat: np.ndarray, prot_mel: np.ndarray):
        def softmax(a):
            e = np.exp(a - a.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        p, q = softmax(x_hat), softmax(prot_mel)
        lr = np.log(p + 1e-300) - np.log(q + 1e-300)
        n = x_hat.shape[0]
        v = float(np.sum(p * lr) / n)
        gp = (lr + 1.0) / n
        g_hat = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
        gq = -p / q / n
        g_prot = q * (gq - np.sum(gq * q, axis=1, keepdims=True))
        return v, g_hat, g_prot
