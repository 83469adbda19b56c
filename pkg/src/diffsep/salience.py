"""Salience maps, voice-range masks and differentiable F0 contour extraction.

Shapes follow (..., J, L, M): voices, frames, log-frequency bins.  The F0
extractor peak-picks each assigned map into a one-hot binary map and reads
the frequency off the bin grid; the hard map is routed through
:func:`~diffsep.autodiff.straight_through` so gradients land on the soft
assigned map.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .spectral import HCQT_BINS, HCQT_BINS_PER_OCTAVE, HCQT_FMIN, bin_frequencies

VOICES = ("soprano", "alto", "tenor", "bass")

# Hz, closed intervals
VOICE_RANGES = {
    "soprano": (260.0, 880.0),
    "alto": (190.0, 660.0),
    "tenor": (145.0, 440.0),
    "bass": (90.0, 290.0),
}

DEFAULT_THRESHOLD = 0.3

FREQS = bin_frequencies()
F0_MIN = HCQT_FMIN
F0_MAX = HCQT_FMIN * 2.0 ** (HCQT_BINS / HCQT_BINS_PER_OCTAVE)


def hz_to_bin(f0, fmin=HCQT_FMIN, bins_per_octave=HCQT_BINS_PER_OCTAVE, n_bins=HCQT_BINS):
    """Nearest bin index for each positive frequency; -1 for unvoiced (0 Hz)."""
    f0 = np.asarray(f0, dtype=np.float64)
    out = np.full(f0.shape, -1, dtype=np.int64)
    voiced = f0 > 0
    idx = np.round(bins_per_octave * np.log2(f0[voiced] / fmin)).astype(np.int64)
    out[voiced] = np.clip(idx, 0, n_bins - 1)
    return out


def range_masks(voices=VOICES, freqs=FREQS, ranges=None):
    """(J, M) binary masks; 1 where the bin center lies inside the voice range."""
    ranges = VOICE_RANGES if ranges is None else ranges
    return np.stack([((freqs >= ranges[v][0]) & (freqs <= ranges[v][1])) for v in voices]).astype(np.float32)


def binarize(assigned, threshold=DEFAULT_THRESHOLD):
    """One-hot peak per frame and voice, or an all-zero frame below ``threshold``.

    Ties go to the lower bin index.
    """
    sa = np.asarray(assigned.data if isinstance(assigned, ad.Value) else assigned)
    peak = np.argmax(sa, axis=-1)
    height = np.take_along_axis(sa, peak[..., None], axis=-1)[..., 0]
    out = np.zeros_like(sa)
    np.put_along_axis(out, peak[..., None], (height >= threshold)[..., None].astype(sa.dtype), axis=-1)
    return out


def extract_f0(assigned, threshold=DEFAULT_THRESHOLD, freqs=FREQS):
    """F0 contours (..., L) as a Value, plus the binary maps used to build them.

    Forward: ``sum_i f_i * S^b_i`` per frame (0 Hz when unvoiced).  Backward:
    d/dS^a equals d/dS^b, i.e. ``f`` scaled by the incoming F0 gradient.
    """
    assigned = ad.as_value(assigned)
    hard = binarize(assigned, threshold)
    routed = ad.straight_through(assigned, hard)
    f = np.asarray(freqs, dtype=assigned.dtype)
    return ad.sum(routed * f, axis=-1), hard


def apply_range_mask(assigned, masks):
    """``S^a_j * mask_j`` broadcast over frames; assigned is (..., J, L, M)."""
    masks = np.asarray(masks)
    shape = assigned.shape
    if len(shape) < 3 or shape[-3] != masks.shape[0]:
        raise ValueError(f"{masks.shape[0]} masks for assigned maps of shape {shape}")
    m = masks[:, None, :].astype(assigned.dtype if hasattr(assigned, "dtype") else np.float64)
    if isinstance(assigned, ad.Value):
        return assigned * m
    return np.asarray(assigned) * m


def normalize(salience):
    """Scale a map to [0, 1] by its maximum (per excerpt)."""
    s = np.clip(np.asarray(salience), 0.0, None)
    peak = s.max()
    return s / peak if peak > 0 else s


# ---------------------------------------------------------------- dump format

_MAGIC = b"SALI"


def write_salience(path, maps):
    """Write J x L x M maps: magic, u32 J, L, M, then little-endian f32 row-major."""
    maps = np.asarray(maps, dtype="<f4")
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ValueError("salience dump expects (J, L, M) maps")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<3I", *maps.shape))
        fh.write(np.ascontiguousarray(maps).tobytes())


def read_salience(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a salience dump")
    j, l, m = struct.unpack("<3I", blob[4:16])
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != j * l * m:
        raise ValueError(f"{path}: truncated salience dump")
    return data.reshape(j, l, m).astype(np.float32)
