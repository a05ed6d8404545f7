"""Error-minimizing perturbation generator.

A perturbation ``delta`` starts uniform in the epsilon ball and is refined by
signed-gradient steps that *lower* the surrogate's objective on ``x + delta``,
so a synthesizer trained on the result finds little left to learn.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import Waveform
from .exceptions import NonFiniteLossError
from .objectives import MODES, LossWeights, NoiseReference, ObjectiveSettings, ProtectionObjective
from .surrogate import SurrogateModel, cond_embedding
from .validation import as_samples, check_in_range

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 8.0 / 255.0
UPDATES = ("projected", "literal")
CONVERGENCE_WINDOW = 10
RETUNE_SIM_THRESHOLD = 0.25


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = DEFAULT_EPSILON
    max_epoch: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    perception_enabled: bool = False
    step_size: float | None = None  # None -> epsilon / 10
    seed: int = 0
    mode: str = "spec"
    update: str = "projected"
    # SPEC noise-term components, switchable for the component ablation
    use_kl: bool = True
    use_l1: bool = True

    def __post_init__(self):
        check_in_range("epsilon", self.epsilon, 0.0, 1.0, low_open=True)
        if int(self.max_epoch) != self.max_epoch or self.max_epoch < 1:
            raise ValueError(f"max_epoch must be an integer >= 1, got {self.max_epoch}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.update not in UPDATES:
            raise ValueError(f"update must be one of {UPDATES}, got {self.update!r}")
        check_in_range("step_size", self.eta, 0.0, self.epsilon, low_open=True)

    @property
    def eta(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else float(self.step_size)

    @property
    def noise_seed(self) -> int:
        return self.seed + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_size"] = self.eta
        return d


@dataclass(eq=False)
class ProtectedAudio:
    x_prot: Waveform
    delta: np.ndarray
    config: PerturbationConfig
    loss_trace: list[float]
    noise_seed: int
    zero_grad_epochs: list[int] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def seconds_per_epoch(self) -> float:
        return self.seconds / max(len(self.loss_trace), 1)


def _settings(cfg: PerturbationConfig) -> ObjectiveSettings:
    return ObjectiveSettings(mode=cfg.mode, weights=cfg.weights, perception=cfg.perception_enabled,
                             use_kl=cfg.use_kl, use_l1=cfg.use_l1)


def generate_perturbation(x, model: SurrogateModel, cond: np.ndarray,
                          cfg: PerturbationConfig = PerturbationConfig(),
                          on_epoch: Callable[[int, np.ndarray, float], None] | None = None
                          ) -> ProtectedAudio:
    """Optimise an epsilon-bounded perturbation for one clip.

    ``on_epoch(epoch, delta, loss)`` is called after every update, which lets
    callers instrument the run (e.g. assert the ball constraint per epoch).
    """
    wav = x if isinstance(x, Waveform) else None
    samples = as_samples(x)
    eps = cfg.epsilon
    noise = NoiseReference.for_clip(samples, cfg.noise_seed, model.fft, model.mel) if cfg.mode == "spec" else None
    objective = ProtectionObjective(samples, model, cond, _settings(cfg), noise)

    rng = np.random.default_rng(cfg.seed)
    delta = rng.uniform(-eps, eps, samples.shape[0])
    trace: list[float] = []
    zero_grad: list[int] = []
    start = time.perf_counter()
    for epoch in range(cfg.max_epoch):
        value, grad, _ = objective(delta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(f"non-finite objective at epoch {epoch} (value={value})")
        trace.append(float(value))
        direction = np.sign(grad)
        if not direction.any():
            zero_grad.append(epoch)
        if cfg.update == "projected":
            delta = np.clip(delta - cfg.eta * direction, -eps, eps)
        else:
            delta = np.clip(-eps * direction, -eps, eps)
        if np.max(np.abs(delta)) > eps:
            raise AssertionError("perturbation left the epsilon ball")
        if on_epoch is not None:
            on_epoch(epoch, delta, value)
    seconds = time.perf_counter() - start
    if zero_grad:
        log.info("zero gradient in %d of %d epochs", len(zero_grad), cfg.max_epoch)

    x_prot = np.clip(samples + delta, -1.0, 1.0)
    rate = wav.sample_rate if wav is not None else model.fft.sample_rate
    ident = f"{wav.id}+prot" if wav is not None and wav.id else "protected"
    return ProtectedAudio(Waveform(x_prot, rate, ident), delta, cfg, trace,
                          cfg.noise_seed, zero_grad, seconds)


def protect_batch(clips, model: SurrogateModel, conds, cfg: PerturbationConfig) -> list[ProtectedAudio]:
    """Protect clips independently; clip ``i`` uses seed ``cfg.seed + i``."""
    return [generate_perturbation(x, model, c, replace(cfg, seed=cfg.seed + i))
            for i, (x, c) in enumerate(zip(clips, conds))]


def apply_universal(template: np.ndarray, x) -> np.ndarray:
    """Tile or truncate ``template`` to the length of ``x`` and add it (clipped to [-1, 1])."""
    samples = as_samples(x)
    template = np.asarray(template, dtype=np.float64)
    if template.size == 0:
        raise ValueError("empty perturbation template")
    reps = -(-samples.shape[0] // template.shape[0])
    tiled = np.tile(template, reps)[:samples.shape[0]]
    return np.clip(samples + tiled, -1.0, 1.0)


def generate_universal_perturbation(clips, model: SurrogateModel, cond: np.ndarray,
                                    cfg: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """Optimise on the first clip; the returned template is applied with :func:`apply_universal`."""
    clips = list(clips)
    if not clips:
        raise ValueError("generate_universal_perturbation needs at least one clip")
    return generate_perturbation(clips[0], model, cond, cfg).delta


def is_converged(trace, window: int = CONVERGENCE_WINDOW) -> bool:
    """Converged when the last-window mean is at most 0.9 x the first-window mean."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        return False
    return float(trace[-window:].mean()) <= 0.9 * float(trace[:window].mean())


def evaluate_and_retune(prot: ProtectedAudio, report, cfg: PerturbationConfig | None = None) -> str:
    """Recommend ``accept``, ``raise_epsilon`` or ``raise_epochs`` for a protection run."""
    sim = report.sim if hasattr(report, "sim") else float(report)
    if sim > RETUNE_SIM_THRESHOLD:
        return "raise_epsilon"
    if not is_converged(prot.loss_trace):
        return "raise_epochs"
    return "accept"


class VoiceProtector(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` binds a surrogate, ``transform`` protects clips.

    ``fit`` takes an already trained surrogate through ``model``; without one it
    trains a fresh surrogate on ``X`` for ``pretrain_steps`` steps.
    """

    def __init__(self, model: SurrogateModel | None = None, epsilon: float = DEFAULT_EPSILON,
                 max_epoch: int = 100, alpha: float = 0.05, beta: float = 10.0,
                 perception_enabled: bool = False, step_size: float | None = None,
                 mode: str = "spec", update: str = "projected", seed: int = 0,
                 pretrain_steps: int = 200, speaker_id: str = "speaker"):
        self.model = model
        self.epsilon = epsilon
        self.max_epoch = max_epoch
        self.alpha = alpha
        self.beta = beta
        self.perception_enabled = perception_enabled
        self.step_size = step_size
        self.mode = mode
        self.update = update
        self.seed = seed
        self.pretrain_steps = pretrain_steps
        self.speaker_id = speaker_id

    def _config(self) -> PerturbationConfig:
        return PerturbationConfig(epsilon=self.epsilon, max_epoch=self.max_epoch,
                                  weights=LossWeights(self.alpha, self.beta),
                                  perception_enabled=self.perception_enabled,
                                  step_size=self.step_size, seed=self.seed,
                                  mode=self.mode, update=self.update)

    def fit(self, X, y=None):
        self.config_ = self._config()
        if self.model is not None:
            self.model_ = self.model
            return self
        from .surrogate import init_model, train

        clips = [as_samples(x) for x in X]
        ids = [self.speaker_id] * len(clips) if y is None else list(y)
        self.model_ = init_model(self.seed)
        train(self.model_, [(c, cond_embedding(s)) for c, s in zip(clips, ids)], self.pretrain_steps)
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "model_")
        clips = [as_samples(x) for x in X]
        ids = [self.speaker_id] * len(clips) if y is None else list(y)
        self.results_ = protect_batch(clips, self.model_, [cond_embedding(s) for s in ids], self.config_)
        return [r.x_prot.samples for r in self.results_]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
