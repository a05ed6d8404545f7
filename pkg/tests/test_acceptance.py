"""End-to-end acceptance checks on the generated corpus.

Every check appends one PASS/FAIL line to the summary printed at the end of
the pytest run.
"""

import itertools
import json
import time

import numpy as np
import pytest

from voxveil import pipeline as P
from voxveil.intelligibility import stoi_score
from voxveil.metrics import MCD_CONSTANT, mcd_dtw, snr_db
from voxveil.objectives import LossWeights, NoiseReference, ObjectiveSettings, ProtectionObjective, kl_divergence
from voxveil.protector import PerturbationConfig, generate_perturbation
from voxveil.surrogate import cond_embedding, init_model

from conftest import ACCEPTANCE_LINES, SMALL_FFT, SMALL_MEL, fd_grad, rel_err
from test_metrics import brute_mcd

pytestmark = pytest.mark.slow

EPS = 8 / 255


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def full():
    start = time.perf_counter()
    ctx = P.prepare(P.ExperimentConfig())
    reports = P.run_unlearnability_experiment(ctx)
    return {"ctx": ctx, "reports": {r.condition: r for r in reports}, "seconds": time.perf_counter() - start}


def test_epsilon_ball_soundness():
    rng = np.random.default_rng(2024)
    model = init_model(1)
    modes = [(m, u, p) for m in ("pivotal", "spec", "vanilla") for u in ("projected", "literal")
             for p in (False, True)]
    worst = 0.0
    start = time.perf_counter()
    for k in range(100):
        n = int(rng.integers(1024, 6000))
        x = rng.uniform(-1, 1, n) * rng.uniform(0.05, 1.0)
        mode, update, perception = modes[k % len(modes)]
        cfg = PerturbationConfig(max_epoch=10, mode=mode, update=update, perception_enabled=perception, seed=k)

        def check(epoch, delta, loss):
            nonlocal worst
            worst = max(worst, float(np.max(np.abs(delta))))

        out = generate_perturbation(x, model, cond_embedding(f"r{k}"), cfg, on_epoch=check)
        worst = max(worst, float(np.max(np.abs(out.delta))))
    seconds = time.perf_counter() - start
    record("epsilon-ball soundness", worst <= EPS and seconds < 60,
           f"max|delta|={worst:.6f} vs eps={EPS:.6f} over 100 clips x {len(modes)} modes, {seconds:.1f}s")


def test_gradient_correctness():
    start = time.perf_counter()
    model = init_model(2, SMALL_FFT, SMALL_MEL, hidden=32)
    rng = np.random.default_rng(9)
    worst = 0.0
    for trial in range(3):
        x = np.clip(0.3 * rng.standard_normal(512), -0.95, 0.95)
        noise = NoiseReference.for_clip(x, trial, model.fft, model.mel)
        settings = ObjectiveSettings(mode="spec", weights=LossWeights(alpha=0.05, beta=10.0), perception=True)
        obj = ProtectionObjective(x, model, cond_embedding("g"), settings, noise)
        delta = rng.uniform(-EPS, EPS, 512)
        _, grad, _ = obj(delta)
        fd = fd_grad(lambda d: obj(d)[0], delta, np.arange(512))
        worst = max(worst, rel_err(grad, fd))
    seconds = time.perf_counter() - start
    record("gradient correctness", worst < 1e-4 and seconds < 120,
           f"relative error {worst:.2e} (< 1e-4) on 512-sample inputs, all 512 coordinates, {seconds:.1f}s")


def test_metric_oracles():
    rng = np.random.default_rng(5)
    dtw_ok = True
    for n, m in itertools.product(range(1, 6), repeat=2):
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
        dtw_ok &= mcd_dtw(a, b) == brute_mcd(a, b)
    with np.errstate(divide="ignore"):
        kl = kl_divergence(np.log(np.array([[1.0, 0.0]])), np.zeros((1, 2)))[0]
    kl_err = abs(kl - np.log(2))
    x, d = rng.standard_normal((2, 1000))
    snr_err = max(abs(snr_db(x, 10.0 ** k * d) - (snr_db(x, d) - 20.0 * k)) for k in (1, 2, -1))
    from voxveil.corpus import generate_corpus

    clip = generate_corpus(1, 1, seed=3)[0].waveform.samples
    stoi_err = abs(stoi_score(clip, clip) - 1.0)
    ok = dtw_ok and kl_err <= 1e-9 and snr_err <= 1e-12 and stoi_err <= 1e-12
    record("metric oracles", ok,
           f"DTW brute-force exact={dtw_ok} (MCD const {MCD_CONSTANT:.4f}), |KL-ln2|={kl_err:.1e}, "
           f"SNR decade error={snr_err:.1e} dB, |STOI(x,x)-1|={stoi_err:.1e}")


def test_unlearnability_ordering(full):
    sims = {c: full["reports"][c].sim for c in P.CONDITIONS}
    clean, rnd, piv, spec = sims["clean"], sims["random_noise"], sims["pivotal"], sims["spec"]
    ok = (clean > rnd > piv >= spec and spec <= 0.5 * clean and clean > 0.25 and spec <= 0.25
          and full["seconds"] < 15 * 60)
    detail = ", ".join(f"{c}={s:.3f}" for c, s in sims.items())
    record("unlearnability ordering", ok, f"SIM {detail}; {full['seconds']:.0f}s")


def test_convergence_shape(full):
    ctx = full["ctx"]
    start = time.perf_counter()
    clips, _, traces = P.protect_clips(ctx, "pivotal", utts=ctx.train[:10])
    seconds = time.perf_counter() - start
    mean = np.mean(traces, axis=0)
    ratio = mean[-1] / mean[0]
    plateau = mean[-10:].mean() / mean.min()
    ok = len(mean) == 100 and np.min(mean[:100]) <= 0.4 * mean[0] and plateau <= 1.1 and seconds < 300
    record("convergence shape", ok,
           f"pivotal 10-clip mean loss {mean[0]:.3f} -> {mean[-1]:.3f} ({100 * ratio:.1f}% of start), "
           f"last-10 mean / min = {plateau:.3f}, {seconds:.0f}s")


def test_pivotal_efficiency(full):
    t = P.protection_timing(full["ctx"], ("pivotal", "vanilla"), n_clips=4, repeats=3)
    ratio = t["pivotal"] / t["vanilla"]
    record("pivotal efficiency", ratio <= 0.7,
           f"pivotal {t['pivotal']:.3f}s vs vanilla {t['vanilla']:.3f}s per clip, ratio {ratio:.3f} (<= 0.7)")


def test_perception_tradeoff(full):
    ctx = full["ctx"]
    plain = full["reports"]["spec"].protection_rows
    perc = full["reports"]["spec+perception"].protection_rows
    snr0 = np.array([r.snr_db for r in plain])
    snr1 = np.array([r.snr_db for r in perc])
    stoi_min = min(r.stoi for r in perc)
    wins = int(np.sum(snr1 > snr0))
    ok = snr1.mean() > snr0.mean() and stoi_min >= 0.8
    record("perception trade-off", ok,
           f"mean SNR alpha=0.05 {snr1.mean():.2f} dB vs alpha=0 {snr0.mean():.2f} dB over {len(snr0)} paired "
           f"clips ({wins} clip-level wins), min STOI {stoi_min:.3f} (>= 0.8)")
    assert ctx.config.alpha == 0.05


def test_robustness_ordering(full):
    ctx = full["ctx"]
    start = time.perf_counter()
    rows = P.run_robustness_suite(ctx)
    seconds = time.perf_counter() - start
    clean = full["reports"]["clean"].sim
    aug = [r for r in rows if r.status == "ok" and r.extra.get("technique") not in ("none", "MP3")
           and not r.extra["technique"].startswith("adv")]
    adv = [r for r in rows if r.status == "ok" and r.extra["technique"].startswith("adv")]
    bad_aug = [f"{r.extra['technique']}={r.sim:.3f}" for r in aug if not r.sim < clean]
    bad_adv = [f"{r.extra['technique']}={r.sim:.3f}" for r in adv if r.sim > 0.25]
    ok = len(aug) == 9 and len(adv) == 7 and not bad_aug and not bad_adv and seconds < 30 * 60
    detail = ", ".join(f"{r.extra['technique']}={r.sim:.3f}" for r in aug + adv)
    skipped = ", ".join(r.condition for r in rows if r.status == "skipped")
    record("robustness ordering", ok,
           f"clean {clean:.3f}; {detail}; above clean: {bad_aug or 'none'}; adv above 0.25: {bad_adv or 'none'}; "
           f"skipped: {skipped}; {seconds:.0f}s")


def test_mixed_corpus_non_interference(full):
    res = P.run_mixed_corpus(full["ctx"])
    record("mixed-corpus non-interference", res["relative_change"] <= 0.10,
           f"clean speakers SIM {res['baseline_clean_sim']:.3f} -> {res['mixed_clean_sim']:.3f} "
           f"({100 * res['relative_change']:.1f}% change); protected speaker "
           f"{res['baseline_victim_sim']:.3f} -> {res['mixed_victim_sim']:.3f}")


def test_epsilon_sweep_monotone(full):
    sweep = P.run_epsilon_sweep(full["ctx"])
    strengths = [s["strength"] for s in sweep]
    ok = all(b >= a for a, b in zip(strengths, strengths[1:]))
    record("epsilon sweep monotonicity", ok,
           ", ".join(f"{round(s['epsilon'] * 255)}/255: strength {s['strength']:.3f}" for s in sweep))


def test_determinism(full, tmp_path):
    ctx = full["ctx"]
    json_path, _ = P.emit_report(list(full["reports"].values()), tmp_path / "run", ctx.config)
    cfg, stored, _ = P.read_report(json_path)
    rerun = P.run_unlearnability_experiment(P.prepare(cfg))
    a = json.dumps(P._encode([r.aggregates for r in stored]), sort_keys=True)
    b = json.dumps(P._encode([r.aggregates for r in rerun]), sort_keys=True)
    differing = [r.condition for r, s in zip(rerun, stored)
                 if json.dumps(P._encode(r.aggregates)) != json.dumps(P._encode(s.aggregates))]
    record("determinism", a == b,
           f"re-run from recorded config (seed {cfg.seed}) reproduces {len(rerun)} condition aggregates bitwise; "
           f"differing: {differing or 'none'}")
