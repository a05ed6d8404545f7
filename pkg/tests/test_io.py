import wave

import numpy as np
import pytest

from voxveil.corpus import (ManifestEntry, generate_corpus, load_corpus, read_manifest, write_corpus,
                            write_manifest)
from voxveil.dsp import Waveform
from voxveil.exceptions import UnsupportedRateError, WavFormatError
from voxveil.io import load_wav, quantize_within_ball, read_config, save_wav, wav_bytes, write_config


def write_raw(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(samples.tobytes())


def test_pcm_scaling_conventions(tmp_path):
    codes = np.array([-32768, -1, 0, 1, 32767], dtype="<i2")
    write_raw(tmp_path / "a.wav", codes)
    w = load_wav(tmp_path / "a.wav")
    assert np.array_equal(w.samples, codes / 32768.0)
    assert w.source_rate == 16000 and w.id == "a"
    out = np.frombuffer(wav_bytes(Waveform(np.array([1.5, -1.0, 0.5]))), dtype="<i2")[-3:]
    assert list(out) == [32767, -32767, round(0.5 * 32767)]


def test_save_is_atomic_and_roundtrips(tmp_path, rng):
    x = rng.uniform(-0.5, 0.5, 1000)
    path = save_wav(Waveform(x), tmp_path / "sub" / "x.wav")
    assert not list(tmp_path.glob("sub/*.tmp"))
    assert np.max(np.abs(load_wav(path).samples - x)) < 2e-4


def test_resample_on_load_records_rate(tmp_path):
    write_raw(tmp_path / "r.wav", np.zeros(22050, dtype="<i2"), rate=22050)
    w = load_wav(tmp_path / "r.wav")
    assert w.sample_rate == 16000 and w.source_rate == 22050 and len(w) == 16000


def test_rejects_bad_files(tmp_path):
    write_raw(tmp_path / "s.wav", np.zeros(20, dtype="<i2"), channels=2)
    with pytest.raises(WavFormatError, match="mono"):
        load_wav(tmp_path / "s.wav")
    write_raw(tmp_path / "b.wav", np.zeros(10, dtype="u1"), width=1)
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "b.wav")
    write_raw(tmp_path / "q.wav", np.zeros(10, dtype="<i2"), rate=44100)
    with pytest.raises(UnsupportedRateError):
        load_wav(tmp_path / "q.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "junk.wav")
    write_raw(tmp_path / "t.wav", np.zeros(100, dtype="<i2"))
    (tmp_path / "t.wav").write_bytes((tmp_path / "t.wav").read_bytes()[:-50])
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "t.wav")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "missing.wav")


def test_quantize_within_ball_survives_save(tmp_path, rng):
    eps = 8 / 255
    ref = np.round(rng.uniform(-0.9, 0.9, 5000) * 32767) / 32768
    target = ref + rng.choice([-eps, eps], 5000)
    q = quantize_within_ball(ref, target, eps)
    save_wav(Waveform(q), tmp_path / "p.wav")
    back = load_wav(tmp_path / "p.wav").samples
    assert np.max(np.abs(back - ref)) <= eps
    assert np.array_equal(np.round(q * 32767), np.round(back * 32768))


def test_config_roundtrip(tmp_path):
    write_config({"epsilon": "8/255", "max-epoch": 10}, tmp_path / "c.conf")
    assert read_config(tmp_path / "c.conf") == {"epsilon": "8/255", "max_epoch": "10"}
    (tmp_path / "bad.conf").write_text("# comment\n\nnovalue\n")
    with pytest.raises(ValueError, match=":3:"):
        read_config(tmp_path / "bad.conf")


def test_corpus_deterministic_and_split():
    a = generate_corpus(2, 5, seed=3)
    b = generate_corpus(2, 5, seed=3)
    assert all(np.array_equal(x.waveform.samples, y.waveform.samples) for x, y in zip(a, b))
    assert [u.split for u in a[:5]] == ["train"] * 4 + ["test"]
    assert {u.speaker_id for u in a} == {"spk00", "spk01"}
    for u in a:
        assert np.max(np.abs(u.waveform.samples)) <= 0.95
        assert 0.5 < u.waveform.duration < 3.0


def test_corpus_manifest_roundtrip(tmp_path):
    corpus = generate_corpus(1, 2, seed=4)
    manifest = write_corpus(corpus, tmp_path)
    loaded = load_corpus(manifest)
    assert [u.text for u in loaded] == [u.text for u in corpus]
    assert np.max(np.abs(loaded[0].waveform.samples - corpus[0].waveform.samples)) < 1e-4


def test_manifest_validation(tmp_path):
    path = tmp_path / "m.jsonl"
    write_manifest([ManifestEntry("a.wav", "s", "t", "dev")], path)
    with pytest.raises(ValueError, match="split"):
        read_manifest(path)
    path.write_text('{"audio_path": "a.wav"}\n')
    with pytest.raises(ValueError, match="missing"):
        read_manifest(path)
