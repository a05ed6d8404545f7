"""Command-line entry point: ``voxveil protect|evaluate|attack|ablate|train-demo|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import dsp, pipeline
from .adversary import (AdvTrainConfig, AugmentationSpec, RHO_GRID, adversarial_counter_perturbation,
                        augment, mp3_roundtrip, spectral_gate_denoise)
from .corpus import generate_corpus
from .exceptions import MetricUnavailable, VoxveilError
from .intelligibility import stoi_score
from .io import load_wav, quantize_within_ball, read_config, save_wav
from .metrics import MetricReport, SpeakerEncoder, mcd_dtw, snr_db
from .protector import UPDATES, generate_perturbation
from .objectives import MODES
from .surrogate import cond_embedding, load_model, save_model
from .validation import parse_fraction

log = logging.getLogger("voxveil")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    return lambda v: None if v is None or str(v).strip().lower() in ("", "none") else conv(v)


# name -> (converter, built-in default); file keys and flag names share these names
SETTINGS = {
    "epsilon": (parse_fraction, "8/255"),
    "alpha": (float, 0.05),
    "beta": (float, 10.0),
    "max_epoch": (int, 100),
    "step_size": (_opt(parse_fraction), None),
    "seed": (int, 0),
    "mode": (str, "spec"),
    "update": (str, "projected"),
    "perception": (_bool, False),
    "manifest": (_opt(str), None),
    "model": (_opt(str), None),
    "asr_endpoint": (_opt(str), None),
    "asr_timeout": (float, 30.0),
    "mp3_encoder": (_opt(str), "lame"),
    "workers": (int, 1),
    "pretrain_steps": (int, 200),
    "finetune_steps": (int, 200),
}


def resolve_settings(args: argparse.Namespace) -> dict:
    """CLI flag > config file > default; every key's value and source is logged."""
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(SETTINGS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for name, (conv, default) in SETTINGS.items():
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            raw, source = cli_value, "cli"
        elif name in file_values:
            raw, source = file_values[name], "config"
        else:
            raw, source = default, "default"
        try:
            out[name] = conv(raw) if raw is not None else None
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {exc}") from exc
        log.info("config %s=%s source=%s", name, raw, source)
    if out["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    if out["update"] not in UPDATES:
        raise UsageError(f"update must be one of {UPDATES}")
    if out["update"] == "literal" and out["step_size"] is not None:
        raise UsageError("--step-size conflicts with --update literal (the literal update has no step)")
    # validate once against the perturbation invariants before any work starts
    try:
        experiment_config(out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return out


def experiment_config(s: dict) -> pipeline.ExperimentConfig:
    return pipeline.ExperimentConfig(
        seed=s["seed"], pretrain_steps=s["pretrain_steps"], finetune_steps=s["finetune_steps"],
        epsilon=s["epsilon"], max_epoch=s["max_epoch"], alpha=s["alpha"], beta=s["beta"],
        step_size=s["step_size"], update=s["update"], manifest=s["manifest"],
        asr_endpoint=s["asr_endpoint"], asr_timeout=s["asr_timeout"], mp3_encoder=s["mp3_encoder"],
        workers=s["workers"])


def _wav_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.wav"))
        if not files:
            raise UsageError(f"no .wav files in {path}")
        return files
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    return [path]


def _surrogate(s: dict):
    if s["model"]:
        return load_model(s["model"])
    background = generate_corpus(8, 4, seed=100 + s["seed"], prefix="bg")
    model, _ = pipeline.pretrain_surrogate(background, s["pretrain_steps"], s["seed"])
    return model


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(pipeline._encode(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


# --- commands ----------------------------------------------------------------------

def cmd_protect(args, s) -> int:
    src, dst = Path(args.inp), Path(args.out)
    inputs = _wav_inputs(src)
    if src.is_dir():
        targets = [dst / f.name for f in inputs]
    else:
        targets = [dst / src.name if dst.is_dir() else dst]
    for f, t in zip(inputs, targets):
        if f.resolve() == t.resolve():
            raise UsageError(f"output {t} would overwrite its input")
    model = _surrogate(s)
    if args.save_model:
        save_model(model, args.save_model)
    cfg = experiment_config(s).perturbation(s["mode"], perception=s["perception"])
    eps_text = str(Fraction(s["epsilon"]).limit_denominator(10000))
    for i, (f, t) in enumerate(zip(inputs, targets)):
        wav = load_wav(f)
        speaker = args.speaker or wav.id
        result = generate_perturbation(wav, model, cond_embedding(speaker), replace(cfg, seed=cfg.seed + i))
        pcm = quantize_within_ball(wav.samples, result.x_prot.samples, cfg.epsilon)
        save_wav(dsp.Waveform(pcm, wav.sample_rate, t.stem), t)
        delta = pcm * 32767.0 / 32768.0 - wav.samples
        meta = {"input": str(f), "output": str(t), "speaker": speaker, "seed": cfg.seed + i,
                "root_seed": s["seed"], "epsilon": cfg.epsilon, "epsilon_text": eps_text,
                "config": cfg.to_dict(), "snr_db": snr_db(wav.samples, delta),
                "max_abs_delta": float(np.max(np.abs(delta))), "loss_trace": result.loss_trace}
        _write_json(t.with_suffix(".json"), meta)
        print(json.dumps({"output": str(t), "snr_db": pipeline._encode(meta["snr_db"]),
                          "max_abs_delta": meta["max_abs_delta"]}))
    return 0


def evaluate_pair(ref: np.ndarray, hyp: np.ndarray) -> MetricReport:
    mcd = mcd_dtw(dsp.mfcc(ref), dsp.mfcc(hyp))
    sim = SpeakerEncoder().similarity(ref, hyp)
    stoi = snr = None
    if ref.shape == hyp.shape:
        stoi = stoi_score(ref, hyp)
        snr = snr_db(ref, hyp - ref)
    return MetricReport(mcd=mcd, snr_db=snr, sim=sim, stoi=stoi)


def cmd_evaluate(args, s) -> int:
    ref, hyp = load_wav(args.ref), load_wav(args.hyp)
    report = evaluate_pair(ref.samples, hyp.samples)
    row = {k: v for k, v in report.to_dict().items() if k not in ("clip_id", "speaker_id")}
    if report.stoi is None:
        row["note"] = "lengths differ; STOI and SNR need aligned signals"
    print(json.dumps(pipeline._encode(row), sort_keys=True))
    if args.report:
        _write_json(Path(args.report), {"ref": args.ref, "hyp": args.hyp, "metrics": row,
                                        "root_seed": s["seed"]})
    return 0


def _techniques(suite: str, s: dict):
    """(name, fn(x, i) -> y) pairs; fn may raise MetricUnavailable."""
    rows = []
    if suite in ("waveguard", "all"):
        for kind, params in pipeline.AUGMENTATION_ROWS:
            spec = AugmentationSpec(kind, params)
            rows.append((spec.label, lambda x, i, k=kind, p=params: augment(
                x, AugmentationSpec(k, p, s["seed"] + i))))
        rows.append(("SG", lambda x, i: spectral_gate_denoise(x)))
        rows.append(("MP3", lambda x, i: mp3_roundtrip(x, s["mp3_encoder"])))
        for name, reason in pipeline.UNAVAILABLE_ROWS.items():
            rows.append((name, reason))
    return rows


def cmd_attack(args, s) -> int:
    files = _wav_inputs(Path(args.inp))
    out_dir = Path(args.out) if args.out else None
    if s["manifest"]:
        return _attack_retrain(args, s, files)
    clips = [load_wav(f) for f in files]
    reports = []
    techniques = _techniques(args.suite, s)
    if args.suite in ("adaptive", "all"):
        model = _surrogate(s)
        for rho in RHO_GRID:
            acfg = AdvTrainConfig(rho_a=rho, rho_u=s["epsilon"])
            techniques.append((f"adv{round(rho * 255):d}/255", lambda x, i, a=acfg: adversarial_counter_perturbation(
                x, model, cond_embedding(clips[i].id), a, seed=s["seed"] + i)))
    for name, fn in techniques:
        if isinstance(fn, str):
            reports.append(pipeline.skipped(name, fn))
            continue
        rep = pipeline.ExperimentReport(name, seeds={"root": s["seed"]}, extra={"technique": name})
        try:
            for i, w in enumerate(clips):
                y = fn(w.samples, i)
                m = evaluate_pair(w.samples, y)
                rep.protection_rows.append(replace(m, clip_id=w.id))
                rep.rows.append(MetricReport(sim=m.sim, mcd=m.mcd, clip_id=w.id))
                if out_dir is not None:
                    save_wav(dsp.Waveform(y, w.sample_rate), out_dir / name.replace("/", "_") / f"{w.id}.wav")
        except MetricUnavailable as exc:
            rep = pipeline.skipped(name, str(exc))
        reports.append(rep)
    pipeline.emit_report(reports, args.report, extra={"suite": args.suite, "inputs": [str(f) for f in files],
                                                      "mode": "signal"})
    print(pipeline.format_table(reports), end="")
    return 0


def _attack_retrain(args, s, files) -> int:
    """Manifest mode: retrain on attacked versions of the given protected train clips."""
    cfg = experiment_config(s)
    ctx = pipeline.prepare(cfg)
    by_name = {f.stem: f for f in files}
    missing = [u.waveform.id for u in ctx.train if u.waveform.id not in by_name]
    if missing:
        raise UsageError(f"protected files missing for train clips: {', '.join(missing[:5])}")
    clips = [load_wav(by_name[u.waveform.id]).samples for u in ctx.train]
    ctx.protected["input"] = (clips, 0.0, [])
    items = pipeline.robustness_items("input", mp3=args.suite in ("waveguard", "all"),
                                      adv_grid=RHO_GRID if args.suite in ("adaptive", "all") else ())
    if args.suite == "adaptive":
        items = [it for it in items if it[2] in ("none", "adv")]
    reports = [pipeline._run_condition(ctx, "clean")] + pipeline.run_robustness_suite(ctx, "input", items)
    pipeline.emit_report(reports, args.report, cfg, extra={"suite": args.suite, "mode": "retrain"})
    print(pipeline.format_table(reports), end="")
    return 0


def cmd_ablate(args, s) -> int:
    cfg = experiment_config(s)
    which = tuple(w.strip() for w in args.which.split(",") if w.strip())
    bad = set(which) - {"components", "alpha", "beta", "timing"}
    if bad:
        raise UsageError(f"unknown ablation(s): {', '.join(sorted(bad))}")
    ctx = pipeline.prepare(cfg)
    result = pipeline.run_ablations(ctx, which)
    reports = [r for key in ("components", "alpha", "beta") for r in result.get(key, [])]
    extra = {"timing": result.get("timing")}
    pipeline.emit_report(reports, args.report, cfg, extra=extra)
    print(pipeline.format_table(reports), end="")
    if extra["timing"]:
        print(json.dumps(extra["timing"][0]))
    return 0


def cmd_train_demo(args, s) -> int:
    cfg = experiment_config(s)
    ctx = pipeline.prepare(cfg)
    if args.save_model:
        save_model(ctx.model, args.save_model)
    reports = pipeline.run_unlearnability_experiment(ctx)
    extra = {"pretrain_loss": [ctx.pretrain_curve[0], ctx.pretrain_curve[-1]]}
    if args.full:
        reports += pipeline.run_robustness_suite(ctx)
        extra["mixed_corpus"] = pipeline.run_mixed_corpus(ctx)
        extra["epsilon_sweep"] = pipeline.run_epsilon_sweep(ctx)
        extra["universal"] = pipeline.run_universal_experiment(ctx)
    pipeline.emit_report(reports, args.report, cfg, extra=extra)
    print(pipeline.format_table(reports), end="")
    return 0


def cmd_report(args, s) -> int:
    cfg, reports, extra = pipeline.read_report(args.inp)
    if args.format == "json":
        print(json.dumps(pipeline._encode({"config": cfg.to_dict() if cfg else {},
                                           "aggregates": {r.condition: r.aggregates for r in reports},
                                           "extra": extra}), sort_keys=True))
    else:
        print(pipeline.format_table(reports), end="")
    return 0


# --- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_settings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--epsilon", help="perturbation radius, e.g. 8/255 or 0.0314")
    p.add_argument("--alpha", help="perception weight")
    p.add_argument("--beta", help="noise-concealment weight")
    p.add_argument("--max-epoch", dest="max_epoch")
    p.add_argument("--step-size", dest="step_size", help="signed-step size (default epsilon/10)")
    p.add_argument("--seed", help="root seed")
    p.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    p.add_argument("--update", help=f"one of {', '.join(UPDATES)}")
    p.add_argument("--perception", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--manifest", help="JSON-lines corpus manifest")
    p.add_argument("--model", help="trained surrogate (.vgsm); pre-trained from scratch if omitted")
    p.add_argument("--asr-endpoint", dest="asr_endpoint")
    p.add_argument("--asr-timeout", dest="asr_timeout")
    p.add_argument("--mp3-encoder", dest="mp3_encoder")
    p.add_argument("--workers")
    p.add_argument("--pretrain-steps", dest="pretrain_steps")
    p.add_argument("--finetune-steps", dest="finetune_steps")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxveil", description="Protect speech against voice cloning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("protect", help="embed an unlearnable perturbation")
    p.add_argument("--in", dest="inp", required=True, help="WAV file or directory")
    p.add_argument("--out", required=True, help="output WAV file or directory")
    p.add_argument("--speaker", help="speaker id for conditioning (default: file stem)")
    p.add_argument("--save-model", dest="save_model")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("evaluate", help="compare a reference and a hypothesis WAV")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="apply removal techniques to protected audio")
    p.add_argument("--suite", choices=("waveguard", "adaptive", "all"), default="waveguard")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", help="directory for attacked audio")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ablate", help="run loss-component, weight and timing ablations")
    p.add_argument("--which", default="components,alpha,beta,timing")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train-demo", help="run the unlearnability experiment on a generated corpus")
    p.add_argument("--report", required=True)
    p.add_argument("--full", action="store_true", help="also robustness, mixed corpus, epsilon sweep")
    p.add_argument("--save-model", dest="save_model")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("report", help="print a stored report")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)

    for p in sub.choices.values():
        _add_settings(p)
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc).splitlines()[0]
                      if str(exc) else type(exc).__name__}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        settings = resolve_settings(args)
        return args.func(args, settings)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (VoxveilError, ValueError, OSError) as exc:
        return _fail("runtime", exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
