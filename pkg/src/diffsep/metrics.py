"""SI-SDR and frame-level pitch accuracy (RPA, RCA, OA)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

SDR_CLAMP = 100.0
CENT_TOLERANCE = 50.0


def si_sdr(reference, estimate):
    """Scale-invariant SDR in dB, clamped at 100 dB for a vanishing residual."""
    s = np.asarray(reference, dtype=np.float64).ravel()
    s_hat = np.asarray(estimate, dtype=np.float64).ravel()
    if s.size == 0 or s.size != s_hat.size:
        raise ValueError(f"si_sdr needs equal nonzero lengths, got {s.size} and {s_hat.size}")
    energy = np.dot(s, s)
    if energy == 0:
        raise ValueError("si_sdr reference is all zeros")
    target = (np.dot(s, s_hat) / energy) * s
    t_energy = np.dot(target, target)
    residual = np.sum((target - s_hat) ** 2)
    if residual < 1e-12 * t_energy:
        return SDR_CLAMP
    if t_energy == 0:
        return -SDR_CLAMP
    return float(min(10.0 * np.log10(t_energy / residual), SDR_CLAMP))


def _cents(est, ref):
    return 1200.0 * np.log2(est / ref)


def pitch_accuracy(ref, est, tolerance=CENT_TOLERANCE):
    """(OA, RPA, RCA) for one voice; 0 Hz marks an unvoiced frame."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"frame count mismatch: {ref.shape} vs {est.shape}")
    ref_v, est_v = ref > 0, est > 0
    both = ref_v & est_v
    cents = np.zeros_like(ref)
    cents[both] = _cents(est[both], ref[both])
    folded = cents - 1200.0 * np.round(cents / 1200.0)
    pitch_ok = both & (np.abs(cents) <= tolerance)
    chroma_ok = both & (np.abs(folded) <= tolerance)
    n_voiced = ref_v.sum()
    rpa = pitch_ok.sum() / n_voiced if n_voiced else 1.0
    rca = chroma_ok.sum() / n_voiced if n_voiced else 1.0
    correct = pitch_ok | (~ref_v & ~est_v)
    oa = correct.mean() if ref.size else 1.0
    return float(oa), float(rpa), float(rca)


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "median": float(np.median(values))}


@dataclass
class MetricReport:
    """Per-excerpt and aggregated separation and pitch scores.

    ``si_sdr`` maps voice -> list of per-excerpt dB values; the pitch fields
    map voice -> list of fractions.  ``baseline_si_sdr`` holds the same for
    the mixture used as every estimate.
    """

    voices: list
    si_sdr: dict = field(default_factory=dict)
    baseline_si_sdr: dict = field(default_factory=dict)
    oa: dict = field(default_factory=dict)
    rpa: dict = field(default_factory=dict)
    rca: dict = field(default_factory=dict)
    excerpts: list = field(default_factory=list)

    def add(self, excerpt_id, sdr=None, baseline=None, pitch=None):
        self.excerpts.append(excerpt_id)
        for j, voice in enumerate(self.voices):
            if sdr is not None:
                self.si_sdr.setdefault(voice, []).append(float(sdr[j]))
            if baseline is not None:
                self.baseline_si_sdr.setdefault(voice, []).append(float(baseline[j]))
            if pitch is not None:
                oa, rpa, rca = pitch[j]
                self.oa.setdefault(voice, []).append(oa)
                self.rpa.setdefault(voice, []).append(rpa)
                self.rca.setdefault(voice, []).append(rca)

    def aggregate(self):
        out = {}
        for name in ("si_sdr", "baseline_si_sdr", "oa", "rpa", "rca"):
            table = getattr(self, name)
            if not table:
                continue
            per_voice = {v: _summary(table[v]) for v in self.voices if v in table}
            pooled = np.concatenate([table[v] for v in self.voices if v in table])
            out[name] = {"per_voice": per_voice, "all": _summary(pooled)}
        return out

    def mean(self, name):
        return self.aggregate()[name]["all"]["mean"]

    def to_dict(self):
        return {**asdict(self), "summary": self.aggregate()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self):
        """Text table: one row per metric and voice, mean and median columns."""
        agg = self.aggregate()
        lines = [f"{'metric':<16s}{'voice':<10s}{'mu':>9s}{'Md':>9s}"]
        for name, block in agg.items():
            rows = list(block["per_voice"].items()) + [("all", block["all"])]
            for voice, s in rows:
                lines.append(f"{name:<16s}{voice:<10s}{s['mean']:9.3f}{s['median']:9.3f}")
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["voices", "si_sdr", "baseline_si_sdr", "oa", "rpa", "rca", "excerpts", "summary"],
    "properties": {
        "voices": {"type": "array", "items": {"type": "string"}},
        "excerpts": {"type": "array", "items": {"type": "string"}},
        "summary": {"type": "object"},
        **{k: {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "number"}}}
           for k in ("si_sdr", "baseline_si_sdr", "oa", "rpa", "rca")},
    },
}
