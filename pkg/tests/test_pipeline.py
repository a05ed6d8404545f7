import json
import math
from dataclasses import replace

import numpy as np
import pytest

from voxveil import pipeline as P
from voxveil.adversary import AdvTrainConfig
from voxveil.corpus import generate_corpus

TINY = dict(n_speakers=2, clips_per_speaker=5, background_speakers=4, background_clips=2,
            pretrain_steps=3, finetune_steps=4, max_epoch=2)


@pytest.fixture(scope="module")
def ctx():
    return P.prepare(P.ExperimentConfig(**TINY))


def test_prepare_splits_and_encoder(ctx):
    assert len(ctx.train) == 8 and len(ctx.test) == 2
    assert {u.speaker_id for u in ctx.train} == {"tg00", "tg01"}
    assert len(ctx.pretrain_curve) == 3
    assert hasattr(ctx.encoder, "mean_")


def test_unlearnability_reports(ctx):
    reports = P.run_unlearnability_experiment(ctx)
    assert [r.condition for r in reports] == list(P.CONDITIONS)
    for r in reports:
        a = r.aggregates
        assert r.status == "ok"
        assert -1 <= a["sim"] <= 1 and a["mcd"] >= 0
        assert len(r.rows) == len(ctx.test)
    assert reports[0].aggregates["snr_db"] == math.inf
    assert reports[0].aggregates["stoi"] == pytest.approx(1.0)
    assert math.isfinite(reports[2].aggregates["snr_db"])
    assert "loss_first" in reports[3].extra


def test_rerun_is_bitwise_identical():
    cfg = P.ExperimentConfig(**TINY, seed=3)
    first = [r.aggregates for r in P.run_unlearnability_experiment(P.prepare(cfg), ("random_noise", "spec"))]
    again = [r.aggregates for r in P.run_unlearnability_experiment(P.prepare(cfg), ("random_noise", "spec"))]
    assert json.dumps(P._encode(first)) == json.dumps(P._encode(again))


def test_report_roundtrip_and_tamper_check(ctx, tmp_path):
    reports = P.run_unlearnability_experiment(ctx, ("clean", "pivotal"))
    reports.append(P.skipped("DEMUCS", "not available"))
    json_path, txt_path = P.emit_report(reports, tmp_path / "out.json", ctx.config, {"k": 1})
    assert "pivotal" in txt_path.read_text()
    cfg, back, extra = P.read_report(json_path)
    assert cfg == ctx.config and extra == {"k": 1}
    assert [P._encode(r.aggregates) for r in back] == [P._encode(r.aggregates) for r in reports]
    assert back[-1].status == "skipped"
    payload = json.loads(json_path.read_text())
    payload["reports"][1]["aggregates"]["sim"] = 0.123456
    json_path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="disagree"):
        P.read_report(json_path)


def test_robustness_rows(ctx, monkeypatch):
    items = [i for i in P.robustness_items(adv_grid=(0.0, 2 / 255))
             if i[1] in ("none", "QD", "SG", "MP3", "DEMUCS", "adv0/255", "adv2/255")]
    monkeypatch.setattr(ctx, "config", replace(ctx.config, mp3_encoder="no-such-encoder"))
    rows = {r.condition: r for r in P.run_robustness_suite(ctx, items=items)}
    assert rows["spec/MP3"].status == "skipped" and "encoder" in rows["spec/MP3"].note
    assert rows["spec/DEMUCS"].status == "skipped"
    for name in ("none", "QD", "SG", "adv2/255"):
        assert rows[f"spec/{name}"].status == "ok"
    # adversarial training with a zero radius is plain fine-tuning
    assert rows["spec/adv0/255"].sim == rows["spec/none"].sim


def test_adversarial_finetune_refresh_rounds(ctx, monkeypatch):
    calls = []
    real = P.adversarial_counter_perturbation

    def counting(*args, **kwargs):
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(P, "adversarial_counter_perturbation", counting)
    clips = [u.waveform.samples for u in ctx.train]
    model, first = P.adversarial_finetune(ctx, clips, AdvTrainConfig(rho_a=2 / 255, steps=1), refresh=2)
    # 4 fine-tune steps at refresh 2 -> two rounds of counter-perturbation
    assert len(calls) == 2 * len(clips)
    assert len(first) == len(clips)
    assert any(not np.array_equal(model.params[k], ctx.model.params[k]) for k in model.params)


def test_ablations_small_grids(ctx):
    out = P.run_ablations(ctx, alpha_grid=(0, 0.05), beta_grid=(0, 10), timing_clips=1)
    assert [r.extra["components"] for r in out["components"]] == list(P.COMPONENTS)
    assert [r.extra["alpha"] for r in out["alpha"]] == [0, 0.05]
    assert [r.extra["beta"] for r in out["beta"]] == [0, 10]
    t = out["timing"][0]
    assert t["pivotal_s"] > 0 and t["vanilla_s"] > 0
    assert t["ratio"] == pytest.approx(t["pivotal_s"] / t["vanilla_s"])


def test_protection_timing_keys(ctx):
    t = P.protection_timing(ctx, ("pivotal",), n_clips=1, repeats=1)
    assert set(t) == {"pivotal"} and t["pivotal"] > 0


def test_mixed_epsilon_universal_studies(ctx):
    mixed = P.run_mixed_corpus(ctx)
    assert mixed["victim"] == "mx00"
    assert mixed["relative_change"] >= 0
    sweep = P.run_epsilon_sweep(ctx, grid=(4 / 255, 8 / 255))
    assert [round(s["epsilon"] * 255) for s in sweep] == [4, 8]
    assert all(s["strength"] == pytest.approx(s["clean_sim"] - s["sim"]) for s in sweep)
    uni = P.run_universal_experiment(ctx)
    assert uni["speed"] == 0.95 and -1 <= uni["protected_sim"] <= 1


def test_pretrain_guards(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        P.pretrain_surrogate([], steps=1)
    with pytest.raises(ValueError, match="at least 8"):
        P.pretrain_surrogate(generate_corpus(1, 3, seed=0), steps=1)


def test_config_validation_and_dict_roundtrip():
    cfg = P.ExperimentConfig(seed=5, epsilon=4 / 255)
    assert P.ExperimentConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg
    assert cfg.perturbation("pivotal", perception=True).perception_enabled
    with pytest.raises(ValueError):
        P.ExperimentConfig(epsilon=2.0)
    with pytest.raises(ValueError):
        P.ExperimentConfig(workers=0)
    with pytest.raises(ValueError):
        P.ExperimentConfig(pretrain_steps=0)
    assert P.clone_threshold() == 0.25
