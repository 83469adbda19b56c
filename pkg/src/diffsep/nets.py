"""Small trainable stand-ins for the salience, assignment, encoder and
decoder networks, plus the oracle salience used as a test double.

Every network owns a :class:`Module` of named parameters.  Freezing a module
flips ``requires_grad`` on its tensors; the optimizer skips them.
"""

from __future__ import annotations

import logging
import zlib

import numpy as np

from . import autodiff as ad
from .salience import F0_MAX, F0_MIN, FREQS, hz_to_bin

log = logging.getLogger(__name__)

LN10 = float(np.log(10.0))


class Module:
    """Named parameters with a shared freeze flag and a per-module RNG."""

    def __init__(self, name, seed=0, dtype=np.float32):
        self.name = name
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.frozen = False
        self._rng = np.random.default_rng([seed, zlib.crc32(name.encode())])

    def param(self, key, shape, fan_in=None, fill=None):
        if fill is not None:
            data = np.full(shape, fill, dtype=self.dtype)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        value = ad.Value(data, requires_grad=not self.frozen, name=f"{self.name}.{key}")
        self.params[key] = value
        return value

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.zero_grad()

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True

    def named_parameters(self):
        for key, p in self.params.items():
            yield f"{self.name}.{key}", p


class ParamStore:
    """All modules of a model, addressable by dotted parameter name."""

    def __init__(self, modules=()):
        self.modules = {}
        for m in modules:
            self.add(m)

    def add(self, module):
        if module.name in self.modules:
            raise ValueError(f"duplicate module {module.name!r}")
        self.modules[module.name] = module
        return module

    def named_parameters(self):
        for m in self.modules.values():
            yield from m.named_parameters()

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self, names):
        for name in names:
            self.modules[name].freeze()

    def set_frozen(self, names):
        """Freeze exactly ``names``; everything else becomes trainable."""
        for name, m in self.modules.items():
            m.freeze() if name in names else m.unfreeze()

    def frozen(self):
        return {n for n, m in self.modules.items() if m.frozen}

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(state) != set(own):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, data in state.items():
            if name not in own:
                continue
            if tuple(own[name].shape) != tuple(np.shape(data)):
                raise ValueError(f"{name}: shape {np.shape(data)} != {own[name].shape}")
            own[name].data = np.array(data, dtype=own[name].dtype)


# ---------------------------------------------------------------- oracle


def oracle_salience(f0, sigma=1.0, per_voice=False, freqs=FREQS):
    """Gaussian bumps of height 1 at the nearest bin of each voiced F0.

    ``f0`` is (J, L) or (L,).  Returns the voice sum clamped to [0, 1] as an
    (L, M) map, or the (J, L, M) per-voice maps when ``per_voice``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f0 = np.atleast_2d(np.asarray(f0, dtype=np.float64))
    voiced = f0 > 0
    outside = voiced & ((f0 < F0_MIN) | (f0 >= F0_MAX))
    if outside.any():
        log.warning("%d F0 values outside the salience grid clamped", int(outside.sum()))
    centers = hz_to_bin(f0, n_bins=len(freqs))
    m = np.arange(len(freqs))
    bumps = np.exp(-0.5 * ((m - centers[..., None]) / sigma) ** 2)
    bumps = np.where(voiced[..., None], bumps, 0.0).astype(np.float32)
    if per_voice:
        return bumps
    return np.clip(bumps.sum(axis=0), 0.0, 1.0)


# ---------------------------------------------------------------- networks


def exp_sigmoid(x, max_value=2.0, exponent=LN10, floor=1e-7):
    """Positive squashing ``max * sigmoid(x) ** ln(10) + floor``."""
    return ad.power(ad.sigmoid(x), exponent) * max_value + floor


def _conv_stack_param(module, key, c_out, c_in, k):
    w = module.param(f"{key}.w", (c_out, c_in, k, k), fan_in=c_in * k * k)
    b = module.param(f"{key}.b", (c_out,), fan_in=c_in * k * k)
    return w, b


class SalienceEstimator:
    """HCQT (N, H, L, M) -> multi-F0 salience (N, L, M) in [0, 1]."""

    def __init__(self, n_harmonics=1, channels=16, kernel=5, layers=3, seed=0, dtype=np.float32):
        if layers < 2 or kernel % 2 == 0:
            raise ValueError("salience estimator needs >= 2 layers and an odd kernel")
        self.module = Module("salience", seed, dtype)
        self.n_harmonics = n_harmonics
        sizes = [n_harmonics] + [channels] * (layers - 1) + [1]
        self.layers = [_conv_stack_param(self.module, f"conv{i}", sizes[i + 1], sizes[i], kernel)
                       for i in range(layers)]

    def logits(self, hcqt):
        x = ad.as_value(hcqt)
        if x.ndim != 4 or x.shape[1] != self.n_harmonics:
            raise ValueError(f"expected (N, {self.n_harmonics}, L, M) input, got {x.shape}")
        for i, (w, b) in enumerate(self.layers):
            x = ad.conv2d(x, w, b)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return ad.reshape(x, (x.shape[0],) + x.shape[2:])

    def __call__(self, hcqt):
        return ad.sigmoid(self.logits(hcqt))


class AssignmentNet:
    """Multi-F0 salience (N, L, M) -> per-voice assigned maps (N, J, L, M).

    Two 'same' convolutions, then a learnable per-voice per-bin head bias
    and a sigmoid per voice.
    """

    def __init__(self, n_voices=4, n_bins=360, channels=8, kernel=3, seed=0, dtype=np.float32):
        if kernel % 2 == 0:
            raise ValueError("assignment kernel must be odd")
        self.module = Module("assignment", seed, dtype)
        self.n_voices, self.n_bins = n_voices, n_bins
        self.conv1 = _conv_stack_param(self.module, "conv1", channels, 1, kernel)
        self.conv2 = _conv_stack_param(self.module, "conv2", n_voices, channels, kernel)
        self.head_bias = self.module.param("head_bias", (n_voices, n_bins), fill=0.0)

    def logits(self, salience):
        s = ad.as_value(salience)
        if s.ndim != 3 or s.shape[-1] != self.n_bins:
            raise ValueError(f"expected (N, L, {self.n_bins}) salience, got {s.shape}")
        x = ad.reshape(s, (s.shape[0], 1) + s.shape[1:])
        h = ad.tanh(ad.conv2d(x, *self.conv1))
        z = ad.conv2d(h, *self.conv2)
        return z + ad.reshape(self.head_bias, (1, self.n_voices, 1, self.n_bins))

    def __call__(self, salience):
        return ad.sigmoid(self.logits(salience))

    def shift_head(self, offset):
        """Add a constant to every head logit (used to build a miscalibrated net)."""
        self.head_bias.data = (self.head_bias.data + offset).astype(self.head_bias.dtype)


class MixtureEncoder:
    """log(1 + |STFT|) frames (N, L, F) -> latent sequence (N, L, D)."""

    def __init__(self, n_bins=257, latent_dim=64, seed=0, dtype=np.float32):
        self.module = Module("encoder", seed, dtype)
        self.n_bins = n_bins
        self.w1 = self.module.param("fc1.w", (n_bins, latent_dim), fan_in=n_bins)
        self.b1 = self.module.param("fc1.b", (latent_dim,), fan_in=n_bins)
        self.w2 = self.module.param("fc2.w", (latent_dim, latent_dim), fan_in=latent_dim)
        self.b2 = self.module.param("fc2.b", (latent_dim,), fan_in=latent_dim)

    def __call__(self, features):
        x = ad.as_value(features)
        if x.shape[-1] != self.n_bins:
            raise ValueError(f"expected {self.n_bins} frequency bins, got {x.shape[-1]}")
        h = ad.tanh(x @ self.w1 + self.b1)
        return ad.tanh(h @ self.w2 + self.b2)


class SourceDecoder:
    """(latent (N, L, D), F0 (N, J, L)) -> per-source synthesis controls.

    The first layer sees the latent frame, the source's F0 (in units of
    ``f0_scale`` Hz) and a voice one-hot; it is shared across voices.
    Returns harmonic amplitudes (N, J, L, K), global amplitude (N, J, L)
    and noise band magnitudes (N, J, L, B), all positive.
    """

    def __init__(self, latent_dim=64, n_voices=4, n_harmonics=40, n_noise_bands=65, hidden=64,
                 f0_scale=1000.0, noise_bias=-5.0, seed=0, dtype=np.float32):
        self.module = Module("decoder", seed, dtype)
        self.n_voices, self.k, self.b = n_voices, n_harmonics, n_noise_bands
        self.f0_scale = f0_scale
        fan_in = latent_dim + 1 + n_voices
        self.w_latent = self.module.param("fc1.w_latent", (latent_dim, hidden), fan_in=fan_in)
        self.w_f0 = self.module.param("fc1.w_f0", (hidden,), fan_in=fan_in)
        self.w_voice = self.module.param("fc1.w_voice", (n_voices, hidden), fan_in=fan_in)
        self.b1 = self.module.param("fc1.b", (hidden,), fan_in=fan_in)
        n_out = n_harmonics + 1 + n_noise_bands
        self.w2 = self.module.param("fc2.w", (hidden, n_out), fan_in=hidden)
        bias = np.zeros(n_out)
        bias[n_harmonics + 1:] = noise_bias
        self.b2 = self.module.param("fc2.b", (n_out,), fill=0.0)
        self.b2.data = bias.astype(self.module.dtype)

    def __call__(self, latent, f0):
        z, f0 = ad.as_value(latent), ad.as_value(f0)
        n, j, l = f0.shape
        if z.shape[:2] != (n, l) or j != self.n_voices:
            raise ValueError(f"latent {z.shape} and F0 {f0.shape} disagree")
        zl = ad.reshape(z @ self.w_latent, (n, 1, l, self.w_latent.shape[1]))
        vf = ad.reshape(f0 / self.f0_scale, (n, j, l, 1)) * self.w_f0
        vv = ad.reshape(self.w_voice, (1, j, 1, self.w_voice.shape[1]))
        h = ad.tanh(zl + vf + vv + self.b1)
        out = exp_sigmoid(h @ self.w2 + self.b2)
        k = self.k
        harm = out[..., :k]
        amp = ad.reshape(out[..., k:k + 1], (n, j, l))
        noise = out[..., k + 1:]
        return harm, amp, noise
