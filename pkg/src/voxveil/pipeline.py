"""Experiment driver: pre-train, protect, fine-tune per condition, evaluate, report.

Every condition starts from the same pre-trained surrogate, protects (or
perturbs) the target speakers' training clips, fine-tunes a copy on them and
then scores what the copy synthesises for the held-out clips against the real
recordings.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dsp
from .adversary import (RHO_GRID, AdvTrainConfig, AugmentationSpec, adversarial_counter_perturbation,
                        augment, change_speed, mp3_roundtrip, spectral_gate_denoise)
from .asr import AsrClientConfig, wer_via_asr
from .corpus import Utterance, generate_corpus, load_corpus
from .exceptions import MetricUnavailable
from .intelligibility import stoi_score
from .metrics import CLONE_THRESHOLD, MetricReport, SpeakerEncoder, attack_success_rate, mcd_dtw, snr_db
from .objectives import LossWeights
from .protector import (PerturbationConfig, apply_universal, generate_perturbation,
                        generate_universal_perturbation)
from .surrogate import AdamState, SurrogateModel, cond_embedding, init_model, train

log = logging.getLogger(__name__)

CONDITIONS = ("clean", "random_noise", "pivotal", "spec", "spec+perception")
ALPHA_GRID = (0.0, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0)
BETA_GRID = (0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 70.0, 90.0, 100.0)
EPSILON_GRID = (4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0)
COMPONENTS = {"mel": (False, False), "mel+kl": (True, False), "mel+l1": (False, True),
              "mel+kl+l1": (True, True)}
AUGMENTATION_ROWS = (
    ("RS", {}), ("Mel", {}), ("QD", {}), ("FL", {}), ("Speed", {"factor": 0.9}),
    ("Speed", {"factor": 1.1}), ("Mask", {}), ("LPF", {}),
)
ADV_REFRESH = 20
UNAVAILABLE_ROWS = {"DEMUCS": "neural denoiser not bundled", "AudioPure": "diffusion purifier not bundled"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_speakers: int = 4
    clips_per_speaker: int = 8
    background_speakers: int = 8
    background_clips: int = 4
    pretrain_steps: int = 200
    finetune_steps: int = 200
    lr: float = 1e-3
    epsilon: float = 8.0 / 255.0
    max_epoch: int = 100
    alpha: float = 0.05
    beta: float = 10.0
    step_size: float | None = None
    update: str = "projected"
    manifest: str | None = None
    asr_endpoint: str | None = None
    asr_timeout: float = 30.0
    mp3_encoder: str | None = "lame"
    workers: int = 1

    def __post_init__(self):
        # fail early on values the perturbation config would reject
        self.perturbation("spec")
        if self.finetune_steps < 0 or self.pretrain_steps < 1:
            raise ValueError("pretrain_steps must be >= 1 and finetune_steps >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def perturbation(self, mode: str, perception: bool = False, **overrides) -> PerturbationConfig:
        base = dict(epsilon=self.epsilon, max_epoch=self.max_epoch,
                    weights=LossWeights(self.alpha, self.beta), perception_enabled=perception,
                    step_size=self.step_size, seed=self.seed, mode=mode, update=self.update)
        base.update(overrides)
        return PerturbationConfig(**base)

    @property
    def asr(self) -> AsrClientConfig | None:
        return AsrClientConfig(self.asr_endpoint, self.asr_timeout) if self.asr_endpoint else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- shared state -------------------------------------------------------------

@dataclass(eq=False)
class ExperimentContext:
    config: ExperimentConfig
    train: list[Utterance]
    test: list[Utterance]
    background: list[Utterance]
    model: SurrogateModel
    encoder: SpeakerEncoder
    pretrain_curve: list[float] = field(default_factory=list)
    protected: dict = field(default_factory=dict)

    def conds(self, utts) -> list[np.ndarray]:
        return [cond_embedding(u.speaker_id) for u in utts]


def pretrain_surrogate(clips, steps: int = 200, seed: int = 0,
                       lr: float = 1e-3) -> tuple[SurrogateModel, list[float]]:
    """Train a fresh surrogate on clean clips (utterances or a manifest path)."""
    if isinstance(clips, (str, os.PathLike)):
        clips = [u for u in load_corpus(clips) if u.split == "train"]
    clips = list(clips)
    if not clips:
        raise ValueError("pretraining corpus is empty")
    if len(clips) < 8:
        raise ValueError(f"pretraining needs at least 8 clips, got {len(clips)}")
    model = init_model(seed)
    batch = [(u.waveform.samples, cond_embedding(u.speaker_id)) for u in clips]
    curve = train(model, batch, steps, lr=lr)
    log.info("pretrained %d steps: loss %.4f -> %.4f", steps, curve[0], curve[-1])
    return model, curve


def prepare(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentContext:
    """Build corpora, pre-train the surrogate on background speakers, fit the speaker encoder."""
    if cfg.manifest:
        corpus = load_corpus(cfg.manifest)
    else:
        corpus = generate_corpus(cfg.n_speakers, cfg.clips_per_speaker, seed=7 + cfg.seed, prefix="tg")
    train_set = [u for u in corpus if u.split == "train"]
    test_set = [u for u in corpus if u.split == "test"]
    if not train_set or not test_set:
        raise ValueError("corpus needs both train and test clips")
    background = generate_corpus(cfg.background_speakers, cfg.background_clips,
                                 seed=100 + cfg.seed, prefix="bg")
    model, curve = pretrain_surrogate(background, cfg.pretrain_steps, cfg.seed, cfg.lr)
    fit_set = [u for u in background if u.split == "train"] + train_set
    encoder = SpeakerEncoder().fit([u.waveform.samples for u in fit_set])
    return ExperimentContext(cfg, train_set, test_set, background, model, encoder, curve)


# --- reports ------------------------------------------------------------------

def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass(eq=False)
class ExperimentReport:
    condition: str
    rows: list[MetricReport] = field(default_factory=list)
    protection_rows: list[MetricReport] = field(default_factory=list)
    runtime_per_epoch: float = 0.0
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    status: str = "ok"
    note: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        sims = [r.sim for r in self.rows if r.sim is not None]
        snrs = [r.snr_db for r in self.protection_rows if r.snr_db is not None]
        return {
            "mcd": _mean(r.mcd for r in self.rows),
            "sim": _mean(sims),
            "asr_pct": attack_success_rate(sims) if sims else None,
            "snr_db": (math.inf if snrs and all(math.isinf(s) for s in snrs)
                       else _mean(s for s in snrs if not math.isinf(s))),
            "stoi": _mean(r.stoi for r in self.protection_rows),
            "wer_pct": _mean(r.wer_pct for r in self.rows),
        }

    @property
    def sim(self) -> float | None:
        return self.aggregates["sim"]

    def to_dict(self) -> dict:
        return {
            "condition": self.condition, "status": self.status, "note": self.note,
            "aggregates": self.aggregates, "runtime_per_epoch": self.runtime_per_epoch,
            "seeds": self.seeds, "config": self.config, "extra": self.extra,
            "rows": [r.to_dict() for r in self.rows],
            "protection_rows": [r.to_dict() for r in self.protection_rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        rep = cls(d["condition"], [MetricReport.from_dict(r) for r in d.get("rows", [])],
                  [MetricReport.from_dict(r) for r in d.get("protection_rows", [])],
                  d.get("runtime_per_epoch", 0.0), d.get("seeds", {}), d.get("config", {}),
                  d.get("status", "ok"), d.get("note", ""), d.get("extra", {}))
        stored = d.get("aggregates")
        if stored is not None and _encode(stored) != _encode(rep.aggregates):
            raise ValueError(f"report {rep.condition!r}: stored aggregates disagree with its rows")
        return rep


def skipped(condition: str, reason: str) -> ExperimentReport:
    return ExperimentReport(condition, status="skipped", note=reason)


# --- protection, training, evaluation -------------------------------------------

def _protection_rows(utts, clean, prot) -> list[MetricReport]:
    rows = []
    for u, x, xp in zip(utts, clean, prot):
        if xp.shape != x.shape:
            rows.append(MetricReport(clip_id=u.waveform.id, speaker_id=u.speaker_id))
            continue
        rows.append(MetricReport(snr_db=snr_db(x, xp - x), stoi=stoi_score(x, xp),
                                 clip_id=u.waveform.id, speaker_id=u.speaker_id))
    return rows


def protect_clips(ctx: ExperimentContext, condition: str, utts=None,
                  pcfg: PerturbationConfig | None = None) -> tuple[list[np.ndarray], float, list]:
    """Protected versions of ``utts`` (default: the training split) under ``condition``.

    Returns ``(clips, seconds_per_epoch, loss_traces)``.
    """
    utts = ctx.train if utts is None else utts
    cfg = ctx.config
    clean = [u.waveform.samples for u in utts]
    if condition == "clean":
        return [x.copy() for x in clean], 0.0, []
    if condition == "random_noise":
        out = []
        for i, x in enumerate(clean):
            rng = np.random.default_rng((cfg.seed, 1, i))
            out.append(np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape[0]), -1.0, 1.0))
        return out, 0.0, []
    if pcfg is None:
        mode, _, perception = condition.partition("+")
        pcfg = cfg.perturbation(mode, perception=bool(perception))
    results = [generate_perturbation(x, ctx.model, c, replace(pcfg, seed=pcfg.seed + i))
               for i, (x, c) in enumerate(zip(clean, ctx.conds(utts)))]
    epochs = sum(len(r.loss_trace) for r in results)
    per_epoch = sum(r.seconds for r in results) / max(epochs, 1)
    return [r.x_prot.samples for r in results], per_epoch, [r.loss_trace for r in results]


def cached_protection(ctx: ExperimentContext, condition: str):
    if condition not in ctx.protected:
        ctx.protected[condition] = protect_clips(ctx, condition)
    return ctx.protected[condition]


def finetune(ctx: ExperimentContext, clips, utts=None) -> SurrogateModel:
    utts = ctx.train if utts is None else utts
    model = ctx.model.copy()
    if ctx.config.finetune_steps:
        batch = [(x, cond_embedding(u.speaker_id)) for x, u in zip(clips, utts)]
        train(model, batch, ctx.config.finetune_steps, lr=ctx.config.lr)
    return model


def synthesis_rows(ctx: ExperimentContext, model: SurrogateModel, utts=None) -> list[MetricReport]:
    """Score the model's synthesis of each held-out clip against the real recording."""
    utts = ctx.test if utts is None else utts
    rows = []
    asr = ctx.config.asr
    for u in utts:
        x = u.waveform.samples
        truth = dsp.mel_spectrogram(x, model.fft, model.mel)
        synth = model.forward(x, cond_embedding(u.speaker_id))
        sim = ctx.encoder.similarity_mel(synth, truth)
        mcd = mcd_dtw(dsp.mfcc_from_mel(synth), dsp.mfcc_from_mel(truth))
        wer_pct = None
        if asr is not None:
            mag = dsp.mel_to_linear(synth, model.fft, model.mel)
            audio = dsp.griffin_lim(mag, model.fft, length=x.shape[0], seed=ctx.config.seed)
            wer_pct = wer_via_asr(dsp.Waveform(np.clip(audio, -1, 1)), u.text, asr)
        rows.append(MetricReport(mcd=mcd, sim=sim, wer_pct=wer_pct,
                                 clip_id=u.waveform.id, speaker_id=u.speaker_id))
    return rows


def adversarial_finetune(ctx: ExperimentContext, clips, acfg: AdvTrainConfig, utts=None,
                         refresh: int = ADV_REFRESH) -> tuple[SurrogateModel, list[np.ndarray]]:
    """Fine-tune with adversarial training: every ``refresh`` steps each clip's
    counter-perturbation is regenerated against the model being trained.

    Returns the model and the first round of attacked clips.
    """
    utts = ctx.train if utts is None else utts
    conds = ctx.conds(utts)
    model = ctx.model.copy()
    optimizer = AdamState(lr=ctx.config.lr)
    steps = ctx.config.finetune_steps
    first, done = None, 0
    while first is None or done < steps:
        attacked = [adversarial_counter_perturbation(x, model, c, acfg, seed=ctx.config.seed + i)
                    for i, (x, c) in enumerate(zip(clips, conds))]
        if first is None:
            first = attacked
        n = min(refresh, steps - done)
        if n > 0:
            train(model, list(zip(attacked, conds)), n, lr=ctx.config.lr, optimizer=optimizer)
            done += n
    return model, first


def _report(ctx, condition, clips, per_epoch=0.0, utts=None, test=None, model=None, **extra) -> ExperimentReport:
    utts = ctx.train if utts is None else utts
    model = finetune(ctx, clips, utts) if model is None else model
    prot_rows = _protection_rows(utts, [u.waveform.samples for u in utts], clips)
    return ExperimentReport(condition, synthesis_rows(ctx, model, test), prot_rows, per_epoch,
                            seeds={"root": ctx.config.seed}, config=ctx.config.to_dict(), extra=extra)


def _run_condition(ctx: ExperimentContext, condition: str) -> ExperimentReport:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    clips, per_epoch, traces = cached_protection(ctx, condition)
    extra = {}
    if traces:
        mean_trace = np.mean(traces, axis=0)
        extra = {"loss_first": float(mean_trace[0]), "loss_last": float(mean_trace[-1])}
    return _report(ctx, condition, clips, per_epoch, **extra)


def _parallel(fn, ctx, items):
    if ctx.config.workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=ctx.config.workers) as pool:
            return list(pool.map(fn, [ctx] * len(items), items))
    return [fn(ctx, item) for item in items]


def run_unlearnability_experiment(ctx: ExperimentContext, conditions=CONDITIONS) -> list[ExperimentReport]:
    return _parallel(_run_condition, ctx, list(conditions))


# --- robustness -----------------------------------------------------------------

def _technique_row(ctx: ExperimentContext, item) -> ExperimentReport:
    base, name, kind, params = item
    clips, _, _ = cached_protection(ctx, base)
    label = f"{base}/{name}"
    try:
        if kind == "none":
            out = clips
        elif kind == "aug":
            out = [augment(x, AugmentationSpec(params["kind"], params["params"], ctx.config.seed + i))
                   for i, x in enumerate(clips)]
        elif kind == "SG":
            out = [spectral_gate_denoise(x) for x in clips]
        elif kind == "MP3":
            out = [mp3_roundtrip(x, ctx.config.mp3_encoder) for x in clips]
        elif kind == "adv":
            acfg = AdvTrainConfig(rho_a=params["rho_a"], rho_u=ctx.config.epsilon)
            model, attacked = adversarial_finetune(ctx, clips, acfg)
            return _report(ctx, label, attacked, model=model, technique=name)
        else:
            return skipped(label, params.get("reason", "unavailable"))
    except MetricUnavailable as exc:
        return skipped(label, str(exc))
    return _report(ctx, label, out, technique=name)


def robustness_items(base: str = "spec", mp3: bool = True, adv_grid=RHO_GRID) -> list[tuple]:
    items = [(base, "none", "none", {})]
    for kind, params in AUGMENTATION_ROWS:
        spec = AugmentationSpec(kind, params)
        items.append((base, spec.label, "aug", {"kind": kind, "params": params}))
    items.append((base, "SG", "SG", {}))
    if mp3:
        items.append((base, "MP3", "MP3", {}))
    for name, reason in UNAVAILABLE_ROWS.items():
        items.append((base, name, "skip", {"reason": reason}))
    for rho in adv_grid:
        items.append((base, f"adv{round(rho * 255):d}/255", "adv", {"rho_a": rho}))
    return items


def run_robustness_suite(ctx: ExperimentContext, base: str = "spec", items=None) -> list[ExperimentReport]:
    """One row per technique applied to the protected training split, plus the plain baseline."""
    cached_protection(ctx, base)  # compute once before any fan-out
    return _parallel(_technique_row, ctx, list(items or robustness_items(base)))


# --- ablations --------------------------------------------------------------------

def _protected_report(ctx, label, pcfg, **extra) -> ExperimentReport:
    clips, per_epoch, _ = protect_clips(ctx, label, pcfg=pcfg)
    return _report(ctx, label, clips, per_epoch, **extra)


def protection_timing(ctx: ExperimentContext, modes=("pivotal", "vanilla"), n_clips: int = 4,
                      repeats: int = 3) -> dict[str, float]:
    """Per-clip protection wall-clock for each mode.

    Modes are interleaved clip by clip after one warm-up run, and each clip
    keeps its fastest of ``repeats`` runs, so scheduler noise and cache warm-up
    do not favour whichever mode happens to run first.
    """
    utts = ctx.train[:n_clips]
    conds = ctx.conds(utts)
    cfgs = {m: ctx.config.perturbation(m) for m in modes}
    for m in modes:
        generate_perturbation(utts[0].waveform.samples, ctx.model, conds[0], replace(cfgs[m], max_epoch=2))
    best = {m: [math.inf] * len(utts) for m in modes}
    for _ in range(repeats):
        for i, (u, c) in enumerate(zip(utts, conds)):
            for m in modes:
                start = time.perf_counter()
                generate_perturbation(u.waveform.samples, ctx.model, c, replace(cfgs[m], seed=cfgs[m].seed + i))
                best[m][i] = min(best[m][i], time.perf_counter() - start)
    return {m: float(np.mean(v)) for m, v in best.items()}


def run_ablations(ctx: ExperimentContext, which=("components", "alpha", "beta", "timing"),
                  alpha_grid=ALPHA_GRID, beta_grid=BETA_GRID, timing_clips: int = 4) -> dict:
    cfg = ctx.config
    out: dict[str, list] = {}
    if "components" in which:
        out["components"] = [
            _protected_report(ctx, f"components/{name}", cfg.perturbation("spec", use_kl=kl, use_l1=l1),
                              components=name)
            for name, (kl, l1) in COMPONENTS.items()]
    if "alpha" in which:
        out["alpha"] = [
            _protected_report(ctx, f"alpha/{a:g}",
                              cfg.perturbation("spec", perception=a > 0, weights=LossWeights(a, cfg.beta)),
                              alpha=a)
            for a in alpha_grid]
    if "beta" in which:
        out["beta"] = [
            _protected_report(ctx, f"beta/{b:g}", cfg.perturbation("spec", weights=LossWeights(cfg.alpha, b)),
                              beta=b)
            for b in beta_grid]
    if "timing" in which:
        t = protection_timing(ctx, ("pivotal", "vanilla"), timing_clips)
        out["timing"] = [{"pivotal_s": t["pivotal"], "vanilla_s": t["vanilla"],
                          "ratio": t["pivotal"] / t["vanilla"]}]
    return out


# --- further studies ----------------------------------------------------------------

def run_mixed_corpus(ctx: ExperimentContext, mode: str = "spec", n_speakers: int = 5) -> dict:
    """Co-train one protected speaker with clean ones; compare against an all-clean run."""
    cfg = ctx.config
    corpus = generate_corpus(n_speakers, cfg.clips_per_speaker, seed=300 + cfg.seed, prefix="mx")
    train_set = [u for u in corpus if u.split == "train"]
    test_set = [u for u in corpus if u.split == "test"]
    victim = train_set[0].speaker_id
    victims = [u for u in train_set if u.speaker_id == victim]
    prot, _, _ = protect_clips(ctx, mode, utts=victims)
    prot_by_id = {u.waveform.id: x for u, x in zip(victims, prot)}
    clean = [u.waveform.samples for u in train_set]
    mixed = [prot_by_id.get(u.waveform.id, x) for u, x in zip(train_set, clean)]
    base_rows = synthesis_rows(ctx, finetune(ctx, clean, train_set), test_set)
    mixed_rows = synthesis_rows(ctx, finetune(ctx, mixed, train_set), test_set)

    def split(rows):
        others = _mean(r.sim for r in rows if r.speaker_id != victim)
        own = _mean(r.sim for r in rows if r.speaker_id == victim)
        return others, own

    base_others, base_victim = split(base_rows)
    mixed_others, mixed_victim = split(mixed_rows)
    return {"victim": victim, "baseline_clean_sim": base_others, "mixed_clean_sim": mixed_others,
            "baseline_victim_sim": base_victim, "mixed_victim_sim": mixed_victim,
            "relative_change": abs(mixed_others - base_others) / abs(base_others)}


def run_epsilon_sweep(ctx: ExperimentContext, mode: str = "spec", grid=EPSILON_GRID) -> list[dict]:
    clean_sim = _run_condition(ctx, "clean").sim
    out = []
    for eps in grid:
        pcfg = ctx.config.perturbation(mode, epsilon=eps)
        rep = _protected_report(ctx, f"epsilon/{eps * 255:g}/255", pcfg, epsilon=eps)
        out.append({"epsilon": eps, "sim": rep.sim, "clean_sim": clean_sim,
                    "strength": clean_sim - rep.sim, "snr_db": rep.aggregates["snr_db"]})
    return out


def run_universal_experiment(ctx: ExperimentContext, speed: float = 0.95, mode: str = "spec") -> dict:
    """One template per speaker from its first clip, tiled onto every clip, then re-timed by ``speed``."""
    cfg = ctx.config
    pcfg = cfg.perturbation(mode)
    templates = {}
    for u in ctx.train:
        if u.speaker_id not in templates:
            templates[u.speaker_id] = generate_universal_perturbation(
                [u.waveform.samples], ctx.model, cond_embedding(u.speaker_id), pcfg)
    prot = [change_speed(apply_universal(templates[u.speaker_id], u.waveform.samples), speed)
            for u in ctx.train]
    clean = [change_speed(u.waveform.samples, speed) for u in ctx.train]
    clean_sim = _mean(r.sim for r in synthesis_rows(ctx, finetune(ctx, clean)))
    prot_sim = _mean(r.sim for r in synthesis_rows(ctx, finetune(ctx, prot)))
    return {"speed": speed, "clean_sim": clean_sim, "protected_sim": prot_sim,
            "relative_drop": (clean_sim - prot_sim) / abs(clean_sim)}


# --- report files -------------------------------------------------------------------

def _encode(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return _encode(obj.item())
    return obj


def _decode(obj):
    if isinstance(obj, str) and obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def _fmt(v, spec=".3f") -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return format(v, spec)


def format_table(reports: list[ExperimentReport]) -> str:
    header = f"{'condition':<28} {'status':<8} {'SIM':>7} {'ASR%':>7} {'MCD':>7} {'SNR':>7} {'STOI':>6} {'WER%':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        a = r.aggregates
        lines.append(f"{r.condition:<28} {r.status:<8} {_fmt(a['sim']):>7} {_fmt(a['asr_pct'], '.1f'):>7} "
                     f"{_fmt(a['mcd'], '.2f'):>7} {_fmt(a['snr_db'], '.2f'):>7} {_fmt(a['stoi']):>6} "
                     f"{_fmt(a['wer_pct'], '.1f'):>7}")
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def emit_report(reports: list[ExperimentReport], path, config: ExperimentConfig | None = None,
                extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (machine) and ``<path>.txt`` (aligned table)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".txt") else path
    payload = {"config": config.to_dict() if config else {}, "reports": [r.to_dict() for r in reports],
               "extra": extra or {}}
    json_path, txt_path = stem.with_suffix(".json"), stem.with_suffix(".txt")
    _atomic_write(json_path, json.dumps(_encode(payload), indent=2, sort_keys=True) + "\n")
    _atomic_write(txt_path, format_table(reports))
    return json_path, txt_path


def read_report(path) -> tuple[ExperimentConfig | None, list[ExperimentReport], dict]:
    payload = _decode(json.loads(Path(path).read_text(encoding="utf-8")))
    cfg = ExperimentConfig.from_dict(payload["config"]) if payload.get("config") else None
    return cfg, [ExperimentReport.from_dict(r) for r in payload["reports"]], payload.get("extra", {})


def clone_threshold() -> float:
    return CLONE_THRESHOLD
