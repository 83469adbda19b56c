"""Separation and pitch evaluation of a trained model over a corpus."""

from __future__ import annotations

import numpy as np

from .metrics import MetricReport, pitch_accuracy, si_sdr


def evaluate_corpus(model, excerpts, pitch=True):
    """MetricReport of the model's soft-mask estimates and F0s on ``excerpts``.

    Every excerpt needs reference stems; pitch scores also need F0 truth.
    The mixture-as-estimate baseline is scored alongside.
    """
    report = MetricReport(list(model.voices))
    for ex in excerpts:
        stems = [s.samples for s in ex.require_stems()]
        f0_truth = ex.f0_truth if model.cfg.salience.source == "oracle" else None
        estimates, _, f0 = model.separate(ex.mixture.samples, f0_truth, ex.noise_seed)
        mix = ex.mixture.samples
        sdr = [si_sdr(ref, est) for ref, est in zip(stems, estimates)]
        base = [si_sdr(ref, mix) for ref in stems]
        scores = None
        if pitch and ex.f0_truth is not None:
            truth = ex.require_truth()
            scores = [pitch_accuracy(truth[j], f0[j]) for j in range(len(stems))]
        report.add(ex.id, sdr, base, scores)
    return report


def sdr_gain(report):
    """Mean SI-SDR improvement over the mixture-as-estimate baseline (dB)."""
    return report.mean("si_sdr") - report.mean("baseline_si_sdr")


def mean_rpa(report):
    return float(np.mean(np.concatenate([report.rpa[v] for v in report.voices])))
