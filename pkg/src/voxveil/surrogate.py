"""Differentiable per-frame spectrogram-to-mel generator.

The model maps every STFT frame of its input waveform, concatenated with a
speaker conditioning vector, through ``affine -> tanh -> affine -> tanh ->
affine`` onto a log-mel frame. Gradients are available with respect to the
parameters and the raw input samples.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import DEFAULT_FFT, DEFAULT_MEL, FftParams, MelParams
from .exceptions import IncompatibleModelError, ModelFormatError, ShapeMismatchError

MAGIC = b"VGSM"
FORMAT_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

# fixed input/output normalisation of the generator; the input power floor
# keeps low-level background from dominating the log features
_IN_FLOOR = 0.1
_IN_CENTER = -4.0
_IN_SCALE = 5.0
_OUT_CENTER = -4.0
_OUT_SCALE = 4.0

_EMBED_TABLE_SIZE = 1024
_EMBED_TABLE_SEED = 0x5EED


def _f32(a: np.ndarray) -> np.ndarray:
    # parameters live at float32 precision so saved models reload bit-exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class GradientBundle:
    d_params: dict[str, np.ndarray] | None
    d_waveform: np.ndarray | None


@dataclass(eq=False)
class SurrogateModel:
    fft: FftParams = DEFAULT_FFT
    mel: MelParams = DEFAULT_MEL
    cond_dim: int = 8
    hidden: int = 128
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return self.fft.n_bins + self.cond_dim

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "SurrogateModel":
        return copy.deepcopy(self)

    # -- forward / backward on a precomputed STFT --------------------------

    def forward_stft(self, s: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, dict]:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (self.cond_dim,):
            raise ShapeMismatchError(f"cond must have shape ({self.cond_dim},), got {cond.shape}")
        if s.shape[1] != self.fft.n_bins:
            raise ShapeMismatchError(f"expected {self.fft.n_bins} bins, got {s.shape[1]}")
        p = self.params
        power = s.real ** 2 + s.imag ** 2
        feats = (np.log(power + _IN_FLOOR) - _IN_CENTER) / _IN_SCALE
        n_bins = self.fft.n_bins
        # the conditioning rows of w1 contribute the same offset to every frame
        h1 = np.tanh(feats @ p["w1"][:n_bins] + (cond @ p["w1"][n_bins:] + p["b1"]))
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        out = _OUT_CENTER + _OUT_SCALE * (h2 @ p["w3"] + p["b3"])
        cache = {"s": s, "power": power, "feats": feats, "cond": cond, "h1": h1, "h2": h2}
        return out, cache

    def backward_stft(self, cache: dict, upstream: np.ndarray, want_params: bool = True,
                      want_input: bool = True) -> tuple[dict | None, np.ndarray | None]:
        p = self.params
        h1, h2 = cache["h1"], cache["h2"]
        if upstream.shape != (h2.shape[0], self.mel.n_mels):
            raise ShapeMismatchError(
                f"upstream shape {upstream.shape} != output shape {(h2.shape[0], self.mel.n_mels)}")
        g3 = upstream * _OUT_SCALE
        g_h2 = g3 @ p["w3"].T
        ga2 = g_h2 * (1.0 - h2 ** 2)
        ga1 = (ga2 @ p["w2"].T) * (1.0 - h1 ** 2)
        d_params = None
        if want_params:
            d_params = {
                "w3": h2.T @ g3, "b3": g3.sum(axis=0),
                "w2": h1.T @ ga2, "b2": ga2.sum(axis=0),
                "w1": np.concatenate([cache["feats"].T @ ga1, np.outer(cache["cond"], ga1.sum(axis=0))]),
                "b1": ga1.sum(axis=0),
            }
        g_s = None
        if want_input:
            n_bins = self.fft.n_bins
            g_feats = ga1 @ p["w1"][:n_bins].T
            g_power = g_feats / (_IN_SCALE * (cache["power"] + _IN_FLOOR))
            g_s = 2.0 * g_power * cache["s"]
        return d_params, g_s

    # -- waveform-level API --------------------------------------------------

    def forward(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Predicted log-mel spectrogram ``[frames, n_mels]`` for waveform ``x``."""
        return self.forward_stft(dsp.stft(x, self.fft), cond)[0]

    def backward(self, x: np.ndarray, cond: np.ndarray, upstream: np.ndarray,
                 want_params: bool = True) -> GradientBundle:
        x = np.asarray(x, dtype=np.float64)
        _, cache = self.forward_stft(dsp.stft(x, self.fft), cond)
        d_params, g_s = self.backward_stft(cache, upstream, want_params=want_params)
        return GradientBundle(d_params, dsp.stft_adjoint(g_s, x.shape[0], self.fft))

    def reconstruction_loss(self, x: np.ndarray, cond: np.ndarray) -> float:
        s = dsp.stft(x, self.fft)
        pred, _ = self.forward_stft(s, cond)
        return float(np.mean(np.abs(pred - dsp.mel_from_stft(s, self.fft, self.mel))))


def init_model(seed: int, fft: FftParams = DEFAULT_FFT, mel: MelParams = DEFAULT_MEL,
               cond_dim: int = 8, hidden: int = 128) -> SurrogateModel:
    """Xavier-uniform weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    model = SurrogateModel(fft=fft, mel=mel, cond_dim=cond_dim, hidden=hidden)
    shapes = [(model.n_inputs, hidden), (hidden, hidden), (hidden, mel.n_mels)]
    for i, (fan_in, fan_out) in enumerate(shapes, start=1):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        model.params[f"w{i}"] = _f32(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        model.params[f"b{i}"] = np.zeros(fan_out)
    return model


def cond_embedding(speaker_id: str, dim: int = 8) -> np.ndarray:
    """Unit-norm conditioning vector looked up from a fixed hashed table."""
    table = _embedding_table(dim)
    digest = hashlib.sha256(str(speaker_id).encode("utf-8")).digest()
    return table[int.from_bytes(digest[:8], "little") % _EMBED_TABLE_SIZE].copy()


_TABLES: dict[int, np.ndarray] = {}


def _embedding_table(dim: int) -> np.ndarray:
    if dim not in _TABLES:
        rng = np.random.default_rng(_EMBED_TABLE_SEED + dim)
        t = rng.standard_normal((_EMBED_TABLE_SIZE, dim))
        _TABLES[dim] = t / np.linalg.norm(t, axis=1, keepdims=True)
    return _TABLES[dim]


# --- training -------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.step += 1
        c1 = 1 - self.beta1 ** self.step
        c2 = 1 - self.beta2 ** self.step
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = _f32(params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def batch_loss_and_grads(model: SurrogateModel, batch, want_grads: bool = True):
    """Mean L1 between predicted and true log-mel over a batch of ``(x, cond)``."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()} if want_grads else None
    for x, cond in batch:
        s = dsp.stft(x, model.fft)
        target = dsp.mel_from_stft(s, model.fft, model.mel)
        pred, cache = model.forward_stft(s, cond)
        diff = pred - target
        total += float(np.mean(np.abs(diff)))
        if want_grads:
            d, _ = model.backward_stft(cache, np.sign(diff) / diff.size, want_input=False)
            for k in grads:
                grads[k] += d[k]
    n = len(batch)
    if want_grads:
        for k in grads:
            grads[k] /= n
    return total / n, grads


def train_step(model: SurrogateModel, batch, lr: float, optimizer: AdamState | None = None):
    """One descent step on the batch reconstruction loss; returns ``(model, pre-step loss)``.

    With ``optimizer=None`` this is plain gradient descent at ``lr``; passing an
    :class:`AdamState` uses its moments (its own ``lr`` is overridden by ``lr``).
    """
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    loss, grads = batch_loss_and_grads(model, batch)
    if lr == 0:
        return model, loss
    if optimizer is None:
        for k, g in grads.items():
            model.params[k] = _f32(model.params[k] - lr * g)
    else:
        optimizer.lr = lr
        optimizer.update(model.params, grads)
    return model, loss


def train(model: SurrogateModel, batch, steps: int, lr: float = 1e-3,
          optimizer: AdamState | None = None) -> list[float]:
    """Run ``steps`` Adam steps (fresh optimizer unless one is given); returns the loss curve."""
    optimizer = AdamState(lr=lr) if optimizer is None else optimizer
    curve = []
    for _ in range(steps):
        _, loss = train_step(model, batch, lr, optimizer)
        curve.append(loss)
    return curve


# --- persistence ------------------------------------------------------------

_HEADER = struct.Struct("<4sI7I3d")


def dump_model(model: SurrogateModel) -> bytes:
    f, m = model.fft, model.mel
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, f.n_fft, f.hop, f.win, f.sample_rate,
                        m.n_mels, model.cond_dim, model.hidden,
                        m.fmin, -1.0 if m.fmax is None else m.fmax, m.floor)
    blob = np.concatenate([model.params[k].ravel() for k in PARAM_NAMES]).astype("<f4")
    return head + struct.pack("<I", blob.size) + blob.tobytes()


def parse_model(data: bytes) -> SurrogateModel:
    if len(data) < _HEADER.size + 4:
        raise ModelFormatError("model file truncated in header")
    magic, version, n_fft, hop, win, sr, n_mels, cond_dim, hidden, fmin, fmax, floor = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IncompatibleModelError(f"incompatible model: version {version}, expected {FORMAT_VERSION}")
    (count,) = struct.unpack_from("<I", data, _HEADER.size)
    body = data[_HEADER.size + 4:]
    if len(body) != 4 * count:
        raise ModelFormatError(f"model file truncated: {len(body)} bytes of {4 * count}")
    fft = FftParams(n_fft=n_fft, hop=hop, win=win, sample_rate=sr)
    mel = MelParams(n_mels=n_mels, fmin=fmin, fmax=None if fmax < 0 else fmax, floor=floor)
    model = init_model(0, fft, mel, cond_dim, hidden)
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if flat.size != model.n_params:
        raise ModelFormatError(f"parameter count {flat.size} does not match dims ({model.n_params})")
    pos = 0
    for k in PARAM_NAMES:
        shape = model.params[k].shape
        size = int(np.prod(shape))
        model.params[k] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return model


def save_model(model: SurrogateModel, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_model(model))
    tmp.replace(path)


def load_model(path) -> SurrogateModel:
    return parse_model(Path(path).read_bytes())
