"""Source-filter synthesis and soft-mask separation.

Each source is a harmonic oscillator bank driven by a frame-rate F0 plus
white noise shaped by a per-frame linear-phase FIR.  Controls live on the
512/256 STFT frame grid at 16 kHz; frame ``l`` sits at sample ``l * hop``.

The phase integral is not differentiated: F0 is treated as a constant by
the synthesizer and reaches the loss only through the decoder.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from . import autodiff as ad
from .spectral import STFT_HOP, STFT_WINDOW, hann, istft_bins, stft

N_HARMONICS = 40
N_NOISE_BANDS = 65
MASK_POWER = 2.0
MASK_EPS = 1e-8
NORM_EPS = 1e-7


def nyquist_mask(f0, n_harmonics, sample_rate):
    """(..., L, K) mask: 1 where the harmonic is voiced and below Nyquist."""
    f0 = np.asarray(f0, dtype=np.float64)
    k = np.arange(1, n_harmonics + 1)
    freqs = f0[..., None] * k
    return ((freqs < sample_rate / 2) & (f0[..., None] > 0)).astype(np.float64)


def _fill_unvoiced(f0):
    """Replace 0 Hz frames by the nearest voiced neighbour (for phase only)."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        return np.zeros_like(f0)
    idx = np.arange(f0.size)
    pos = np.searchsorted(voiced, idx).clip(0, voiced.size - 1)
    left = voiced[(pos - 1).clip(0)]
    right = voiced[pos]
    nearest = np.where(np.abs(idx - left) <= np.abs(right - idx), left, right)
    return np.where(f0 > 0, f0, f0[nearest])


def upsample_linear(frames, hop, n_samples):
    """Frame-rate values at ``l * hop`` -> per-sample linear interpolation (last axis)."""
    frames = np.asarray(frames)
    t = np.arange(n_samples) / hop
    grid = np.arange(frames.shape[-1])
    return np.interp(t, grid, frames) if frames.ndim == 1 else np.stack(
        [np.interp(t, grid, row) for row in frames.reshape(-1, frames.shape[-1])]
    ).reshape(frames.shape[:-1] + (n_samples,))


def oscillator_bank(f0_samples, amps, sample_rate, dtype=np.float64):
    """Sum of harmonics ``sum_k amps[k, t] * sin(k * phi(t))`` for per-sample F0.

    ``amps`` is (K, T).  Phase starts at 0 and integrates F0 by cumulative sum.
    """
    f0_samples = np.asarray(f0_samples, dtype=np.float64)
    cycles = np.cumsum(f0_samples / sample_rate) - f0_samples / sample_rate
    rotor = np.exp(2j * np.pi * np.mod(cycles, 1.0))
    k = amps.shape[0]
    y = np.zeros(f0_samples.size)
    z = np.ones_like(rotor)
    for i in range(k):
        z = z * rotor
        y += amps[i] * z.imag
    return y.astype(dtype, copy=False)


def _basis(f0_frames, hop, n_blocks, sample_rate, n_harm, dtype):
    """sin(k * phi) for k = 1..n_harm arranged as (K, blocks, hop).

    Uses the Chebyshev recurrence sin((k+1)x) = 2 cos(x) sin(kx) - sin((k-1)x).
    """
    filled = _fill_unvoiced(f0_frames)
    f_samples = upsample_linear(filled, hop, n_blocks * hop)
    cycles = np.cumsum(f_samples / sample_rate) - f_samples / sample_rate
    phase = 2 * np.pi * np.mod(cycles, 1.0)
    basis = np.empty((n_harm, n_blocks * hop), dtype=dtype)
    basis[0] = np.sin(phase)
    twice_cos = (2 * np.cos(phase)).astype(dtype)
    if n_harm > 1:
        np.multiply(twice_cos, basis[0], out=basis[1])
    for k in range(2, n_harm):
        np.multiply(twice_cos, basis[k - 1], out=basis[k])
        basis[k] -= basis[k - 2]
    return basis.reshape(n_harm, n_blocks, hop)


def harmonic_bank(f0, coeffs, sample_rate=16000, hop=STFT_HOP, n_samples=None):
    """Differentiable oscillator bank over per-frame harmonic amplitudes.

    f0: (..., L) Hz array (no gradient); coeffs: Value (..., L, K) absolute
    harmonic amplitudes, zeroed where ``k * f0`` reaches Nyquist or the frame
    is unvoiced.  Output (..., n_samples) with ``n_samples <= L * hop``.
    """
    coeffs = ad.as_value(coeffs)
    f0 = np.asarray(f0, dtype=np.float64)
    lead = coeffs.shape[:-2]
    n_frames, n_harm = coeffs.shape[-2:]
    if f0.shape != lead + (n_frames,):
        raise ValueError(f"f0 shape {f0.shape} does not match params {coeffs.shape}")
    n_samples = (n_frames - 1) * hop if n_samples is None else n_samples
    n_blocks = -(-n_samples // hop)
    # a partial trailing block holds the last control frame
    extra = n_blocks + 1 - n_frames
    if extra > 1:
        raise ValueError("too few control frames for the requested length")
    dtype = coeffs.dtype
    mask = nyquist_mask(f0, n_harm, sample_rate).astype(dtype).reshape(-1, n_frames, n_harm)
    flat_f0 = f0.reshape(-1, n_frames)
    flat_c = coeffs.data.reshape(-1, n_frames, n_harm) * mask
    if extra > 0:
        flat_f0 = np.concatenate([flat_f0, flat_f0[:, -1:]], axis=1)
        flat_c = np.concatenate([flat_c, flat_c[:, -1:]], axis=1)
        mask = np.concatenate([mask, mask[:, -1:]], axis=1)
    r = (np.arange(hop) / hop).astype(dtype)
    n_src = flat_c.shape[0]
    # highest harmonic that can sound in each source
    k_eff = [int(np.flatnonzero(m.any(axis=0)).max()) + 1 if m.any() else 0 for m in mask]

    keep = coeffs.requires_grad
    bases = [None] * n_src
    out = np.zeros((n_src, n_blocks * hop), dtype=dtype)
    for i in range(n_src):
        if k_eff[i] == 0:
            continue
        basis = _basis(flat_f0[i], hop, n_blocks, sample_rate, k_eff[i], dtype)
        c = flat_c[i, :, :k_eff[i]]
        y = (1 - r) * np.einsum("kli,lk->li", basis, c[:n_blocks]) + r * np.einsum(
            "kli,lk->li", basis, c[1:])
        out[i] = y.reshape(-1)
        if keep:
            bases[i] = basis

    def bw(g):
        gflat = np.zeros((n_src, n_blocks * hop), dtype=dtype)
        gflat[:, :n_samples] = g.reshape(-1, n_samples)
        gc = np.zeros_like(flat_c)
        for i in range(n_src):
            if k_eff[i] == 0:
                continue
            basis = bases[i]
            gb = gflat[i].reshape(n_blocks, hop)
            gc[i, :n_blocks, :k_eff[i]] += np.einsum("li,kli->lk", gb * (1 - r), basis)
            gc[i, 1:, :k_eff[i]] += np.einsum("li,kli->lk", gb * r, basis)
        gc = gc * mask
        if extra > 0:
            gc[:, -2] += gc[:, -1]
            gc = gc[:, :-1]
        return (gc.reshape(coeffs.shape),)

    return ad.make_op(out[:, :n_samples].reshape(lead + (n_samples,)), (coeffs,), bw)


def harmonic_synth(f0, harmonic_amps, global_amp, sample_rate=16000, hop=STFT_HOP, n_samples=None):
    """y = A(t) * sum_k a_k(t) sin(phi_k(t)) with a_k normalized per frame.

    Harmonics at or above Nyquist and unvoiced frames (f0 = 0) get zero
    amplitude before normalization.  Controls are combined at frame rate and
    linearly interpolated to samples.
    """
    harmonic_amps = ad.as_value(harmonic_amps)
    global_amp = ad.as_value(global_amp)
    f0 = np.asarray(f0, dtype=np.float64)
    if harmonic_amps.shape[:-1] != f0.shape or global_amp.shape != f0.shape:
        raise ValueError(f"f0 shape {f0.shape} does not match params "
                         f"{harmonic_amps.shape} / {global_amp.shape}")
    mask = nyquist_mask(f0, harmonic_amps.shape[-1], sample_rate).astype(harmonic_amps.dtype)
    masked = harmonic_amps * mask
    dist = masked / (ad.sum(masked, axis=-1, keepdims=True) + NORM_EPS)
    coeffs = dist * ad.reshape(global_amp, global_amp.shape + (1,))
    return harmonic_bank(f0, coeffs, sample_rate, hop, n_samples)


def white_noise(shape, seed):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)


def noise_synth(noise_mags, sample_rate=16000, hop=STFT_HOP, noise=None, seed=0, n_samples=None):
    """White noise shaped per frame by a linear-phase FIR from band magnitudes.

    noise_mags: Value (..., L, B), band magnitudes on a uniform grid from 0
    to Nyquist.  Block ``l`` (samples ``l*hop .. (l+1)*hop``) is filtered
    with the FIR of frame ``l`` and the blocks are overlap-added.
    """
    del sample_rate  # bands are uniform on [0, Nyquist] whatever the rate
    mags = ad.as_value(noise_mags)
    lead = mags.shape[:-2]
    n_frames, n_bands = mags.shape[-2:]
    n_blocks = n_frames - 1 if n_samples is None else -(-n_samples // hop)
    n_samples = n_blocks * hop if n_samples is None else n_samples
    if n_blocks > n_frames:
        raise ValueError("too few control frames for the requested length")
    if noise is None:
        noise = white_noise(lead + (n_blocks * hop,), seed)
    noise = np.asarray(noise, dtype=mags.dtype)
    if noise.shape[-1] < n_blocks * hop:
        noise = np.pad(noise, [(0, 0)] * (noise.ndim - 1) + [(0, n_blocks * hop - noise.shape[-1])])
    noise = np.broadcast_to(noise[..., :n_blocks * hop], lead + (n_blocks * hop,))
    n_fir = 2 * (n_bands - 1)
    n_fft = hop
    while n_fft < hop + n_fir - 1:
        n_fft *= 2
    delay = n_fir // 2
    win = hann(n_fir).astype(mags.dtype)
    total = (n_blocks - 1) * hop + n_fft

    H = mags.data[..., :n_blocks, :]
    h = np.roll(scipy.fft.irfft(H, n=n_fir, axis=-1), delay, axis=-1) * win
    Nf = scipy.fft.rfft(noise.reshape(lead + (n_blocks, hop)), n=n_fft, axis=-1)
    yb = scipy.fft.irfft(Nf * scipy.fft.rfft(h, n=n_fft, axis=-1), n=n_fft, axis=-1)
    full = ad._overlap_add(yb, hop, total)
    out = full[..., delay:delay + n_samples].astype(mags.dtype, copy=False)

    def bw(g):
        gfull = np.zeros(lead + (total + n_fft,), dtype=g.dtype)
        gfull[..., delay:delay + n_samples] = g
        view = np.lib.stride_tricks.sliding_window_view(gfull, n_fft, axis=-1)
        gyb = view[..., :n_blocks * hop:hop, :]
        gh = scipy.fft.irfft(np.conj(Nf) * scipy.fft.rfft(gyb, n=n_fft, axis=-1), n=n_fft, axis=-1)[..., :n_fir]
        gh0 = np.roll(gh * win, -delay, axis=-1)
        weights = np.full(n_bands, 2.0)
        weights[0] = 1.0
        weights[-1] = 1.0
        gH = np.real(scipy.fft.rfft(gh0, axis=-1)) * weights / n_fir
        gm = np.zeros_like(mags.data)
        gm[..., :n_blocks, :] = gH
        return (gm,)

    return ad.make_op(out, (mags,), bw)


# ---------------------------------------------------------------- soft masks


def soft_masks(sources, power=MASK_POWER, eps=MASK_EPS, window=STFT_WINDOW, hop=STFT_HOP):
    """Per-source masks (J, frames, bins) from synthesized waveforms (J, T)."""
    sources = np.asarray(sources, dtype=np.float64)
    mags = np.abs(stft(sources, window, hop).bins) ** power
    return (mags + eps) / (mags.sum(axis=0, keepdims=True) + sources.shape[0] * eps)


def soft_mask_separate(mixture, synthesized, power=MASK_POWER, eps=MASK_EPS,
                       window=STFT_WINDOW, hop=STFT_HOP):
    """Filter the mixture with masks from the synthesized sources.

    Returns the (J, T) estimates; the mixture phase is kept.
    """
    mix = np.asarray(getattr(mixture, "samples", mixture), dtype=np.float64)
    synthesized = np.asarray([np.asarray(getattr(s, "samples", s)) for s in synthesized], dtype=np.float64)
    if synthesized.ndim != 2 or synthesized.shape[1] != mix.size:
        raise ValueError(f"synthesized sources {synthesized.shape} do not match mixture length {mix.size}")
    masks = soft_masks(synthesized, power, eps, window, hop)
    spec = stft(mix, window, hop).bins
    return istft_bins(masks * spec, window, hop, mix.size)
