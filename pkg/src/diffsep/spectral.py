"""Deterministic signal transforms.

STFT/ISTFT with a periodic Hann window and centered frames, the multi-scale
magnitude bank used by the reconstruction loss, a harmonic constant-Q
transform on a 20-cent grid, and 16 kHz <-> 22.05 kHz resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal
import scipy.sparse

from . import autodiff as ad

SAMPLE_RATES = (16000, 22050)
STFT_WINDOW = 512
STFT_HOP = 256
LOSS_SCALES = (2048, 1024, 512, 256, 128, 64)

HCQT_FMIN = 32.7
HCQT_BINS_PER_OCTAVE = 60
HCQT_OCTAVES = 6
HCQT_BINS = HCQT_BINS_PER_OCTAVE * HCQT_OCTAVES
HCQT_HOP = 256
HCQT_RATE = 22050


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio must be a non-empty mono sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """frames x (window_size // 2 + 1) complex or magnitude bins."""

    bins: np.ndarray
    window_size: int
    hop: int
    sample_rate: int
    length: int | None = None

    @property
    def n_frames(self):
        return self.bins.shape[0]

    def magnitude(self):
        return Spectrogram(np.abs(self.bins), self.window_size, self.hop, self.sample_rate, self.length)


@dataclass
class HcqtGrid:
    """harmonics x frames x bins constant-Q magnitudes, normalized to [0, 1]."""

    channels: np.ndarray
    harmonics: tuple
    hop: int = HCQT_HOP
    fmin: float = HCQT_FMIN
    bins_per_octave: int = HCQT_BINS_PER_OCTAVE
    n_octaves: int = HCQT_OCTAVES
    frequencies: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.frequencies is None:
            self.frequencies = bin_frequencies(self.fmin, self.bins_per_octave * self.n_octaves,
                                               self.bins_per_octave)


def bin_frequencies(fmin=HCQT_FMIN, n_bins=HCQT_BINS, bins_per_octave=HCQT_BINS_PER_OCTAVE):
    """Center frequency of each log-frequency bin, ``fmin * 2**(m / bins_per_octave)``."""
    return fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)


@lru_cache(maxsize=None)
def hann(n):
    """Periodic Hann window."""
    return scipy.signal.get_window("hann", n).astype(np.float64)


def _samples(audio):
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio)


def _rate(audio, default):
    return audio.sample_rate if isinstance(audio, AudioBuffer) else default


def n_frames(length, window, hop, center=True):
    padded = length + 2 * (window // 2) if center else length
    return (padded - window) // hop + 1


def hcqt_frames(length, hop=HCQT_HOP):
    """Frame count of :func:`cqt`: frames centered at ``l * hop`` up to the end."""
    return length // hop + 1


def _check_geometry(window, hop):
    if window <= 0 or window & (window - 1):
        raise ValueError(f"window must be a power of two, got {window}")
    if hop <= 0 or hop > window or window % hop:
        raise ValueError(f"hop must divide the window and not exceed it (window={window}, hop={hop})")


def stft(audio, window=STFT_WINDOW, hop=STFT_HOP, center=True, sample_rate=16000):
    """Complex STFT with a Hann window; frames are centered on ``t = l * hop``."""
    _check_geometry(window, hop)
    x = _samples(audio)
    minimum = window // 2 if center else window
    if x.shape[-1] < minimum:
        raise ValueError(f"audio shorter than one window ({x.shape[-1]} < {minimum} samples)")
    frames = ad.frame(x, window, hop, center=center).data
    bins = scipy.fft.rfft(frames * hann(window), axis=-1)
    return Spectrogram(bins, window, hop, _rate(audio, sample_rate), x.shape[-1])


def is_cola(window, hop):
    return bool(scipy.signal.check_COLA(hann(window), window, window - hop))


def istft_bins(bins, window, hop, length):
    """Inverse of centered STFT bins (..., frames, window // 2 + 1) -> (..., length)."""
    _check_geometry(window, hop)
    if not is_cola(window, hop):
        raise ValueError(f"window {window} / hop {hop} is not constant-overlap-add")
    w = hann(window)
    frames = scipy.fft.irfft(np.asarray(bins), n=window, axis=-1) * w
    nf = frames.shape[-2]
    total = (nf - 1) * hop + window
    y = ad._overlap_add(frames, hop, total)
    norm = ad._overlap_add(np.broadcast_to(w * w, (nf, window)), hop, total)
    y = y / np.where(norm > 1e-10, norm, 1.0)
    y = y[..., window // 2:]
    if y.shape[-1] < length:
        y = np.pad(y, [(0, 0)] * (y.ndim - 1) + [(0, length - y.shape[-1])])
    return y[..., :length]


def istft(spec, length=None):
    """Weighted overlap-add inverse of :func:`stft`.

    For a masked mixture pass the masked complex bins; the mixture phase
    travels with them.
    """
    if length is None:
        length = spec.length if spec.length is not None else (spec.n_frames - 1) * spec.hop
    y = istft_bins(spec.bins, spec.window_size, spec.hop, length)
    return AudioBuffer(y, spec.sample_rate)


def multiscale_stft(audio, scales=LOSS_SCALES, sample_rate=16000):
    """Magnitude spectrograms at each window size, hop = window / 4."""
    return [stft(audio, n, n // 4, sample_rate=sample_rate).magnitude() for n in scales]


# ---------------------------------------------------------------- resampling


def resample(audio, target_rate):
    """Polyphase band-limited resampling between the supported rates."""
    if not isinstance(audio, AudioBuffer):
        raise TypeError("resample expects an AudioBuffer")
    src = audio.sample_rate
    if src not in SAMPLE_RATES or target_rate not in SAMPLE_RATES:
        raise ValueError(f"unsupported rate pair {src} -> {target_rate}")
    if src == target_rate:
        return AudioBuffer(audio.samples.copy(), src)
    ratio = Fraction(target_rate, src)
    y = scipy.signal.resample_poly(audio.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return AudioBuffer(y.astype(audio.samples.dtype, copy=False), target_rate)


# ---------------------------------------------------------------- HCQT


@lru_cache(maxsize=8)
def _cqt_kernels(fmin, n_bins, bins_per_octave, sample_rate, filter_scale):
    """Sparse spectral kernels (n_bins x n_fft//2+1) and the FFT size."""
    freqs = bin_frequencies(fmin, n_bins, bins_per_octave)
    if freqs[-1] >= sample_rate / 2:
        raise ValueError(f"top CQT bin {freqs[-1]:.0f} Hz exceeds Nyquist")
    q = filter_scale / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    lengths = np.ceil(q * sample_rate / freqs).astype(int)
    n_fft = int(2 ** np.ceil(np.log2(lengths.max())))
    rows = []
    for f, n in zip(freqs, lengths):
        t = np.arange(n) - (n - 1) / 2.0
        atom = np.hanning(n) / n * np.exp(2j * np.pi * f * t / sample_rate)
        buf = np.zeros(n_fft, dtype=complex)
        start = n_fft // 2 - n // 2
        buf[start:start + n] = atom
        spec = np.fft.fft(buf)[: n_fft // 2 + 1]
        spec[np.abs(spec) < 1e-4 * np.abs(spec).max()] = 0.0
        rows.append(np.conj(spec))
    return scipy.sparse.csr_matrix(np.array(rows)), n_fft


def cqt(samples, sample_rate, fmin, n_bins=HCQT_BINS, bins_per_octave=HCQT_BINS_PER_OCTAVE,
        hop=HCQT_HOP, filter_scale=1.0, block=16):
    """Constant-Q magnitudes (frames x n_bins), frames centered at ``l * hop``."""
    kernels, n_fft = _cqt_kernels(float(fmin), n_bins, bins_per_octave, sample_rate, float(filter_scale))
    x = np.asarray(samples, dtype=np.float64)
    nf = hcqt_frames(x.size, hop)
    padded = np.pad(x, (n_fft // 2, n_fft // 2))
    view = np.lib.stride_tricks.sliding_window_view(padded, n_fft)
    out = np.empty((nf, n_bins))
    for start in range(0, nf, block):
        idx = np.arange(start, min(start + block, nf)) * hop
        spec = scipy.fft.rfft(view[idx], axis=-1)
        out[start:start + idx.size] = np.abs(kernels @ spec.T).T
    return out


def hcqt(audio, harmonics=(1,), log_compress=True, fmin=HCQT_FMIN, n_octaves=HCQT_OCTAVES,
         bins_per_octave=HCQT_BINS_PER_OCTAVE, hop=HCQT_HOP, filter_scale=1.0):
    """Stacked constant-Q channels, channel ``h`` starting at ``fmin * h``.

    Magnitudes are optionally ``log1p``-compressed, then scaled to [0, 1]
    by the excerpt maximum.
    """
    if not isinstance(audio, AudioBuffer) or audio.sample_rate != HCQT_RATE:
        rate = getattr(audio, "sample_rate", None)
        raise ValueError(f"hcqt expects audio at {HCQT_RATE} Hz, got {rate}")
    n_bins = bins_per_octave * n_octaves
    chans = np.stack([cqt(audio.samples, audio.sample_rate, fmin * h, n_bins, bins_per_octave,
                          hop, filter_scale) for h in harmonics])
    if log_compress:
        chans = np.log1p(chans)
    peak = chans.max()
    if peak > 0:
        chans = chans / peak
    return HcqtGrid(chans.astype(np.float32), tuple(harmonics), hop, fmin, bins_per_octave, n_octaves)


# ---------------------------------------------------------------- WAV


def read_wav(path, expected_rate=None):
    """Mono 16-bit PCM or 32-bit float WAV -> AudioBuffer (float32 samples)."""
    rate, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if rate not in SAMPLE_RATES:
        raise ValueError(f"{path}: unsupported sample rate {rate} Hz (expected one of {SAMPLE_RATES})")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return AudioBuffer(samples, rate)


def write_wav(path, audio, pcm16=False):
    if audio.sample_rate not in SAMPLE_RATES:
        raise ValueError(f"unsupported sample rate {audio.sample_rate}")
    x = np.asarray(audio.samples)
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        data = x.astype("<f4")
    scipy.io.wavfile.write(path, audio.sample_rate, data)
