"""Error-minimizing perturbations that make speech unlearnable for voice-cloning models."""

from .adversary import AugmentationSpec, Augmenter, NesConfig, augment, nes_recover, spectral_gate_denoise
from .dsp import FftParams, MelParams, Waveform, mel_spectrogram, stft
from .exceptions import (IncompatibleModelError, InsufficientVoicedError, MetricUnavailable, ModelFormatError,
                         NonFiniteLossError, ParamMismatchError, ShapeMismatchError, SignalTooShortError,
                         UnsupportedRateError, VoxveilError, WavFormatError)
from .io import load_wav, save_wav
from .metrics import MetricReport, SpeakerEncoder, mcd_dtw, snr_db, speaker_sim
from .intelligibility import stoi_score
from .objectives import LossWeights, NoiseReference, ProtectionObjective
from .pipeline import ExperimentConfig, ExperimentReport, prepare, run_unlearnability_experiment
from .protector import PerturbationConfig, ProtectedAudio, VoiceProtector, generate_perturbation
from .surrogate import SurrogateModel, cond_embedding, init_model, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec", "Augmenter", "ExperimentConfig", "ExperimentReport", "FftParams",
    "IncompatibleModelError", "InsufficientVoicedError", "LossWeights", "MelParams", "MetricReport",
    "MetricUnavailable", "ModelFormatError", "NesConfig", "NoiseReference", "NonFiniteLossError",
    "ParamMismatchError", "PerturbationConfig", "ProtectedAudio", "ProtectionObjective", "ShapeMismatchError",
    "SignalTooShortError", "SpeakerEncoder", "SurrogateModel", "UnsupportedRateError", "VoiceProtector",
    "VoxveilError", "WavFormatError", "Waveform", "augment", "cond_embedding", "generate_perturbation",
    "init_model", "load_model", "load_wav", "mcd_dtw", "mel_spectrogram", "nes_recover", "prepare",
    "run_unlearnability_experiment", "save_model", "save_wav", "snr_db", "spectral_gate_denoise",
    "speaker_sim", "stft", "stoi_score", "train",
]
