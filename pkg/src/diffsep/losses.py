"""Training objective: multi-scale spectral reconstruction plus three
salience regularizers, combined as ``l_rec + alpha*l1 + beta*l2 + gamma*l3``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft

from . import autodiff as ad
from .spectral import LOSS_SCALES, hann

log = logging.getLogger(__name__)

TERMS = ("l_rec", "l1", "l2", "l3")
WEIGHT_RANGE = (1e-6, 1e6)


def spectral_target(x, scales=LOSS_SCALES):
    """Magnitude bank of the reference signal, reusable across steps."""
    x = np.asarray(x)
    out = []
    for n in scales:
        frames = ad.frame(x, n, n // 4).data * hann(n)
        out.append(np.abs(scipy.fft.rfft(frames, axis=-1)).astype(x.dtype, copy=False))
    return out


def l_rec(x, x_hat, scales=LOSS_SCALES, target=None, breakdown=None):
    """Sum over scales of lin + log L1 distances between STFT magnitudes.

    ``x`` is a constant reference (..., T); ``x_hat`` a Value of equal shape.
    Leading dimensions are a batch: the result is the batch mean.  A dict
    passed as ``breakdown`` receives the per-scale float values.
    """
    x = np.asarray(x)
    x_hat = ad.as_value(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    target = spectral_target(x, scales) if target is None else target
    batch = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    total = None
    for n, mag_x in zip(scales, target):
        win = hann(n).astype(x_hat.dtype)
        mag_hat = ad.rfft_mag(ad.frame(x_hat, n, n // 4) * win)
        lin = ad.l1_norm(mag_hat - mag_x)
        logd = ad.l1_norm(ad.log(mag_hat) - np.log(mag_x + ad.EPS).astype(x_hat.dtype))
        term = (lin + logd) / batch
        if breakdown is not None:
            breakdown[n] = float(term.data)
        total = term if total is None else total + term
    return total


def _check_assigned(sa, other, what):
    if sa.ndim < 3:
        raise ValueError(f"assigned salience must be (..., J, L, M), got {sa.shape}")
    if other is not None and tuple(other) != tuple(sa.shape):
        raise ValueError(f"{what} shape mismatch: {tuple(other)} vs {sa.shape}")


def l1_consistency(assigned, salience):
    """MSE between the voice-summed assigned maps and the multi-F0 map."""
    sa = ad.as_value(assigned)
    if not isinstance(salience, ad.Value):
        salience = np.asarray(salience, dtype=sa.dtype)
    sm = ad.as_value(salience)
    _check_assigned(sa, None, "")
    expected = sa.shape[:-3] + sa.shape[-2:]
    if sm.shape != expected:
        raise ValueError(f"salience shape {sm.shape} does not match assigned {sa.shape}")
    return ad.mse(ad.sum(sa, axis=-3), sm)


def _voice_mse_sum(diff):
    # sum over voices of per-voice mean squared entries
    n_voices = diff.shape[-3]
    return ad.sum(diff * diff) / (diff.data.size / n_voices)


def l2_range(assigned, masks):
    """Sum over voices of MSE(S^a_j, S^a_j * mask_j): out-of-range salience."""
    sa = ad.as_value(assigned)
    masks = np.asarray(masks)
    _check_assigned(sa, None, "")
    if masks.shape != (sa.shape[-3], sa.shape[-1]):
        raise ValueError(f"{masks.shape[0]} voice masks for assigned maps {sa.shape}")
    outside = (1.0 - masks[:, None, :]).astype(sa.dtype)
    return _voice_mse_sum(sa * outside)


def l3_binary(assigned, binary):
    """Sum over voices of MSE(S^a_j, S^b_j), the binary maps held constant."""
    sa = ad.as_value(assigned)
    sb = np.asarray(binary.data if isinstance(binary, ad.Value) else binary)
    _check_assigned(sa, sb.shape, "binary map")
    return _voice_mse_sum(sa - sb.astype(sa.dtype))


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    balancing_mode: str = "auto_calibrated"

    def __post_init__(self):
        if self.balancing_mode not in ("fixed", "auto_calibrated"):
            raise ValueError(f"unknown balancing mode {self.balancing_mode!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")

    def factor(self, term):
        return {"l_rec": 1.0, "l1": self.alpha, "l2": self.beta, "l3": self.gamma}[term]


@dataclass
class LossReport:
    l_rec: float
    l1: float
    l2: float
    l3: float
    l_full: float
    per_scale: dict = field(default_factory=dict)

    @classmethod
    def assemble(cls, terms, weights, per_scale=None):
        """Report with ``l_full`` computed from all four raw terms."""
        vals = {k: float(terms[k]) for k in TERMS}
        full = vals["l_rec"] + weights.alpha * vals["l1"] + weights.beta * vals["l2"] + weights.gamma * vals["l3"]
        return cls(**vals, l_full=full, per_scale=dict(per_scale or {}))

    def to_json(self):
        d = asdict(self)
        d["per_scale"] = {str(k): v for k, v in self.per_scale.items()}
        return json.dumps(d, sort_keys=True)


def combine(terms, weights, active=TERMS):
    """Weighted sum of the active terms (Values)."""
    total = None
    for name in active:
        term = terms[name] * weights.factor(name) if name != "l_rec" else terms[name]
        total = term if total is None else total + term
    return total


def calibrate_weights(report, mode="auto_calibrated"):
    """Ratios that give every regularizer the magnitude of ``l_rec``."""
    weights = {}
    for key, term in (("alpha", "l1"), ("beta", "l2"), ("gamma", "l3")):
        value = getattr(report, term)
        if value == 0 or not np.isfinite(value):
            log.warning("%s is %s at calibration; using weight 1.0", term, value)
            weights[key] = 1.0
        else:
            weights[key] = float(np.clip(report.l_rec / value, *WEIGHT_RANGE))
    return LossWeights(**weights, balancing_mode=mode)
