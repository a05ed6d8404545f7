import numpy as np
import pytest

from voxveil import dsp
from voxveil.exceptions import ShapeMismatchError
from voxveil.objectives import (LossWeights, NoiseReference, ObjectiveSettings, ProtectionObjective,
                                kl_divergence, mel_loss, noise_loss, perception_loss, spec_loss, stft_loss,
                                stoi_loss)
from voxveil.surrogate import cond_embedding

from conftest import SMALL_FFT, SMALL_MEL, fd_grad, rel_err


def brute_kl(p_mel, q_mel):
    p = np.exp(p_mel).ravel()
    q = np.maximum(np.exp(q_mel).ravel(), 1e-10)
    p, q = p / p.sum(), q / q.sum()
    return sum(pi * np.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def test_mel_loss_values(rng):
    a = rng.standard_normal((4, 5))
    assert mel_loss(a, a)[0] == 0.0
    assert mel_loss(a + 1.0, a)[0] == pytest.approx(1.0)
    b = rng.standard_normal((4, 5))
    oracle = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert mel_loss(a, b)[0] == pytest.approx(oracle, abs=1e-9)
    with pytest.raises(ShapeMismatchError):
        mel_loss(a, b[:3])


def test_kl_hand_values():
    with np.errstate(divide="ignore"):
        onehot = np.log(np.array([[1.0, 0.0]]))
    assert abs(kl_divergence(onehot, np.zeros((1, 2)))[0] - np.log(2)) <= 1e-9
    a = np.array([[0.3, -1.0, 2.0]])
    assert kl_divergence(a, a)[0] == 0.0


def test_kl_matches_brute_force_and_gibbs(rng):
    for _ in range(1000):
        p, q = rng.standard_normal((2, 3, 4))
        v = kl_divergence(p, q)[0]
        assert v >= 0.0
    p, q = rng.standard_normal((2, 6, 5))
    assert kl_divergence(p, q)[0] == pytest.approx(brute_kl(p, q), abs=1e-12)


def test_kl_gradients(rng):
    p, q = rng.standard_normal((2, 4, 3))
    _, gp, gq = kl_divergence(p, q)
    idx = np.arange(p.size)
    fp = fd_grad(lambda v: kl_divergence(v.reshape(p.shape), q)[0], p.ravel().copy(), idx)
    fq = fd_grad(lambda v: kl_divergence(p, v.reshape(q.shape))[0], q.ravel().copy(), idx)
    assert rel_err(gp.ravel(), fp) < 1e-6
    assert rel_err(gq.ravel(), fq) < 1e-6


def test_noise_loss_composition_and_asymmetry(rng):
    a, b = rng.standard_normal((2, 5, 4))
    assert noise_loss(a, a)[0] == 0.0
    assert noise_loss(a, b)[0] == pytest.approx(kl_divergence(a, b)[0] + mel_loss(a, b)[0])
    assert noise_loss(a, b)[0] != noise_loss(b, a)[0]
    assert noise_loss(a, b, use_kl=False)[0] == pytest.approx(mel_loss(a, b)[0])


def test_spec_loss_weighting(rng):
    a, b, z = rng.standard_normal((3, 5, 4))
    v, _, _ = spec_loss(a, b, z, LossWeights(beta=10.0))
    assert v == pytest.approx(mel_loss(a, b)[0] + 10.0 * noise_loss(b, z)[0])
    assert spec_loss(a, b, z, LossWeights(beta=0.0))[0] == pytest.approx(mel_loss(a, b)[0])


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


def test_stft_loss_zero_and_gradient(rng):
    x = 0.3 * rng.standard_normal(512)
    assert stft_loss(x, x, SMALL_FFT)[0] == 0.0
    y = x + 0.05 * rng.standard_normal(512)
    _, g = stft_loss(x, y, SMALL_FFT)
    idx = rng.choice(512, 20, replace=False)
    assert rel_err(g[idx], fd_grad(lambda v: stft_loss(x, v, SMALL_FFT)[0], y, idx)) < 1e-6


def test_stoi_loss_gradient(speech, rng):
    x = speech[0].waveform.samples
    y = x + 0.02 * rng.standard_normal(len(x))
    v, g = stoi_loss(x, y)
    assert 0.0 <= v <= 1.0
    idx = rng.choice(np.flatnonzero(np.abs(g) > 0.1 * np.abs(g).max()), 12, replace=False)
    assert rel_err(g[idx], fd_grad(lambda u: stoi_loss(x, u)[0], y, idx, h=1e-6)) < 1e-4


def test_perception_loss_falls_back_on_short_clips(rng):
    x = 0.3 * rng.standard_normal(512)
    res = perception_loss(x, x + 0.01, SMALL_FFT)
    assert not res.stoi_used
    assert res.value == pytest.approx(stft_loss(x, x + 0.01, SMALL_FFT)[0])


def test_noise_reference_rms_matched(rng):
    x = 0.2 * rng.standard_normal(4000)
    ref = NoiseReference.for_clip(x, seed=3)
    assert np.sqrt(np.mean(ref.z ** 2)) == pytest.approx(np.sqrt(np.mean(x ** 2)))
    assert np.array_equal(ref.z, NoiseReference.for_clip(x, seed=3).z)


def _objective(model, x, mode, perception, seed=0):
    settings = ObjectiveSettings(mode=mode, weights=LossWeights(0.05, 10.0), perception=perception)
    noise = NoiseReference.for_clip(x, seed, model.fft, model.mel) if mode == "spec" else None
    return ProtectionObjective(x, model, cond_embedding("g"), settings, noise)


@pytest.mark.parametrize("mode,perception", [("pivotal", False), ("spec", False), ("spec", True),
                                             ("vanilla", False), ("pivotal", True)])
def test_objective_gradient_matches_fd(small_model, rng, mode, perception):
    x = 0.3 * rng.standard_normal(512)
    obj = _objective(small_model, x, mode, perception)
    delta = rng.uniform(-8 / 255, 8 / 255, 512)
    _, grad, _ = obj(delta)
    idx = rng.choice(512, 24, replace=False)
    assert rel_err(grad[idx], fd_grad(lambda d: obj(d)[0], delta, idx)) < 1e-4


def test_objective_terms_sum_to_total(small_model, rng):
    x = 0.3 * rng.standard_normal(512)
    obj = _objective(small_model, x, "spec", True)
    value, _, terms = obj(np.zeros(512))
    assert value == pytest.approx(terms["mel"] + 10.0 * terms["noise"] + 0.05 * terms["stft"])
    assert set(terms) == {"mel", "noise", "stft"}


def test_vanilla_has_three_terms(small_model, rng):
    x = 0.3 * rng.standard_normal(512)
    _, _, terms = _objective(small_model, x, "vanilla", False)(np.zeros(512))
    assert set(terms) == {"mel", "spectral_convergence", "frame_kl"}


def test_clipped_samples_get_zero_gradient(small_model, rng):
    x = 0.3 * rng.standard_normal(512)
    x[:10] = 0.999
    delta = np.zeros(512)
    delta[:10] = 0.02
    _, grad, _ = _objective(small_model, x, "pivotal", False)(delta)
    assert np.all(grad[:10] == 0.0)


def test_spec_mode_requires_noise(small_model):
    with pytest.raises(ValueError):
        ProtectionObjective(np.zeros(512), small_model, cond_embedding("g"), ObjectiveSettings(mode="spec"))
    with pytest.raises(ValueError):
        ObjectiveSettings(mode="bogus")


def test_objective_on_default_params(speech):
    from voxveil.surrogate import init_model

    model = init_model(0)
    x = speech[0].waveform.samples
    obj = _objective(model, x, "spec", True)
    value, grad, terms = obj(np.zeros_like(x))
    assert np.isfinite(value) and np.all(np.isfinite(grad))
    assert "stoi" in terms
    assert dsp.mel_spectrogram(x).shape == model.forward(x, cond_embedding("g")).shape
