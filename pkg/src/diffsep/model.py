"""The end-to-end separator: salience -> assignment -> F0 -> synthesis.

``Separator.forward`` runs one batch and returns every intermediate plus
the loss terms.  Per-excerpt inputs that never change during training
(oracle salience, encoder features, target spectra, noise) are computed
once and cached by excerpt id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import TERMS, l1_consistency, l2_range, l3_binary, l_rec, spectral_target
from .nets import AssignmentNet, MixtureEncoder, ParamStore, SalienceEstimator, SourceDecoder, oracle_salience
from .salience import VOICE_RANGES, bin_frequencies, extract_f0, range_masks
from .spectral import AudioBuffer, hcqt, hcqt_frames, resample, stft
from .synth import harmonic_synth, noise_synth, soft_mask_separate, white_noise

MODULES = ("salience", "assignment", "encoder", "decoder")


@dataclass
class Features:
    """Cached, parameter-free inputs for one excerpt."""

    mixture: np.ndarray          # (T,)
    salience_input: np.ndarray   # oracle S^m (L_s, M) or HCQT (H, L_s, M)
    encoder_input: np.ndarray    # log1p |STFT| (L, F)
    target: list | None          # multi-scale magnitudes of the mixture
    noise: np.ndarray            # (J, T) white noise for the noise branch


@dataclass
class Outputs:
    salience: object
    assigned: ad.Value
    binary: np.ndarray
    f0: ad.Value                       # (N, J, L_s) at the salience frame rate
    f0_synth: ad.Value | None = None   # (N, J, L) at the synthesis frame rate
    sources: ad.Value | None = None    # (N, J, T)
    mix_hat: ad.Value | None = None    # (N, T)
    terms: dict = field(default_factory=dict)
    per_scale: dict = field(default_factory=dict)


class Separator:
    def __init__(self, cfg):
        self.cfg = cfg
        m = cfg.model
        dtype = np.dtype(m.dtype)
        self.dtype = dtype
        self.voices = list(m.voices)
        self.freqs = bin_frequencies(cfg.hcqt.fmin, cfg.hcqt.bins_per_octave * cfg.hcqt.n_octaves,
                                     cfg.hcqt.bins_per_octave)
        n_bins = self.freqs.size
        self.salience_net = SalienceEstimator(len(cfg.hcqt.harmonics), m.salience_channels,
                                              m.salience_kernel, m.salience_layers, m.seed, dtype)
        self.assignment = AssignmentNet(len(self.voices), n_bins, m.assignment_channels,
                                        m.assignment_kernel, m.seed, dtype)
        self.encoder = MixtureEncoder(cfg.audio.stft_window // 2 + 1, m.latent_dim, m.seed, dtype)
        self.decoder = SourceDecoder(m.latent_dim, len(self.voices), m.n_harmonics, m.n_noise_bands,
                                     m.decoder_hidden, m.f0_scale, m.noise_bias, m.seed, dtype)
        self.store = ParamStore([self.salience_net.module, self.assignment.module,
                                 self.encoder.module, self.decoder.module])
        ranges = {v: VOICE_RANGES[v] for v in self.voices}
        self.masks = range_masks(self.voices, self.freqs, ranges)
        self._features = {}
        self._frozen_f0 = {}

    # ------------------------------------------------------------ geometry

    @property
    def n_samples(self):
        return self.cfg.n_samples

    def frame_map(self, n_samples):
        """Nearest salience frame for every synthesis frame."""
        a = self.cfg.audio
        n_syn = n_samples // a.stft_hop + 1
        n_sal = hcqt_frames(int(round(n_samples * a.salience_rate / a.sample_rate)), self.cfg.hcqt.hop)
        t = np.arange(n_syn) * a.stft_hop / a.sample_rate
        idx = np.round(t * a.salience_rate / self.cfg.hcqt.hop).astype(np.int64)
        return np.clip(idx, 0, n_sal - 1)

    # ------------------------------------------------------------ features

    def salience_input(self, mixture, f0_truth=None):
        cfg = self.cfg
        if cfg.salience.source == "oracle":
            if f0_truth is None:
                raise ValueError("oracle salience needs ground-truth F0 for every excerpt")
            return oracle_salience(f0_truth, cfg.salience.oracle_sigma, freqs=self.freqs)
        return self.hcqt_input(mixture)

    def hcqt_input(self, mixture):
        cfg = self.cfg
        up = resample(AudioBuffer(np.asarray(mixture, dtype=np.float64), cfg.audio.sample_rate),
                      cfg.audio.salience_rate)
        grid = hcqt(up, tuple(cfg.hcqt.harmonics), cfg.hcqt.log_compress, cfg.hcqt.fmin,
                    cfg.hcqt.n_octaves, cfg.hcqt.bins_per_octave, cfg.hcqt.hop)
        return grid.channels

    def encoder_input(self, mixture):
        a = self.cfg.audio
        spec = stft(np.asarray(mixture, dtype=np.float64), a.stft_window, a.stft_hop)
        return np.log1p(np.abs(spec.bins)).astype(self.dtype)

    def build_features(self, mixture, f0_truth=None, noise_seed=0, with_target=True):
        x = np.asarray(mixture, dtype=self.dtype)
        return Features(
            mixture=x,
            salience_input=np.asarray(self.salience_input(x, f0_truth), dtype=self.dtype),
            encoder_input=self.encoder_input(x),
            target=spectral_target(x, tuple(self.cfg.loss.scales)) if with_target else None,
            noise=white_noise((len(self.voices), x.size), noise_seed).astype(self.dtype),
        )

    def features(self, excerpt):
        feats = self._features.get(excerpt.id)
        if feats is None:
            f0 = excerpt.f0_truth if self.cfg.salience.source == "oracle" else None
            feats = self.build_features(excerpt.mixture.samples, f0, excerpt.noise_seed)
            self._features[excerpt.id] = feats
        return feats

    def clear_caches(self, features=False):
        self._frozen_f0.clear()
        if features:
            self._features.clear()

    # ------------------------------------------------------------ forward

    def f0_frozen(self):
        frozen = self.store.frozen()
        oracle = self.cfg.salience.source == "oracle"
        return "assignment" in frozen and (oracle or "salience" in frozen)

    def _salience(self, feats):
        x = np.stack([f.salience_input for f in feats])
        if self.cfg.salience.source == "oracle":
            return x  # peaks are 1 by construction
        sm = self.salience_net(x)
        # per-excerpt peak normalization; the scale is held constant
        peak = sm.data.max(axis=(1, 2), keepdims=True)
        return sm * np.where(peak > 0, 1.0 / np.maximum(peak, 1e-12), 1.0).astype(sm.dtype)

    def _assigned(self, feats, keys=None):
        if keys is not None and self.f0_frozen() and all(k in self._frozen_f0 for k in keys):
            sm, sa, sb = (np.stack(v) for v in zip(*(self._frozen_f0[k] for k in keys)))
            f0 = ad.Value(np.sum(sb * self.freqs.astype(self.dtype), axis=-1))
            return sm, ad.Value(sa), sb, f0
        sm = self._salience(feats)
        sa = self.assignment(sm)
        f0, sb = extract_f0(sa, self.cfg.salience.threshold, self.freqs)
        if keys is not None and self.f0_frozen():
            sm_data = sm.data if isinstance(sm, ad.Value) else sm
            for i, k in enumerate(keys):
                self._frozen_f0[k] = (sm_data[i], sa.data[i], sb[i])
        return sm, sa, sb, f0

    def forward(self, feats, terms=TERMS, keys=None):
        """Run a batch of :class:`Features`; ``terms`` selects what to compute.

        The synthesis branch only runs when ``l_rec`` is requested.  ``keys``
        (excerpt ids) enable the frozen-F0 cache.
        """
        sm, sa, sb, f0 = self._assigned(feats, keys)
        out = Outputs(salience=sm, assigned=sa, binary=sb, f0=f0)
        if "l1" in terms:
            out.terms["l1"] = l1_consistency(sa, sm)
        if "l2" in terms:
            out.terms["l2"] = l2_range(sa, self.masks)
        if "l3" in terms:
            out.terms["l3"] = l3_binary(sa, sb)
        if "l_rec" in terms or "synth" in terms:
            self._synthesize(feats, out)
            if "l_rec" in terms:
                x = np.stack([f.mixture for f in feats])
                target = [np.stack(t) for t in zip(*(f.target for f in feats))]
                out.terms["l_rec"] = l_rec(x, out.mix_hat, tuple(self.cfg.loss.scales), target,
                                           breakdown=out.per_scale)
        return out

    def _synthesize(self, feats, out):
        a = self.cfg.audio
        n = feats[0].mixture.size
        f0s = ad.take(out.f0, self.frame_map(n), axis=-1)
        z = self.encoder(np.stack([f.encoder_input for f in feats]))
        harm, amp, noise_mags = self.decoder(z, f0s)
        y_h = harmonic_synth(f0s.data, harm, amp, a.sample_rate, a.stft_hop, n)
        y_n = noise_synth(noise_mags, a.sample_rate, a.stft_hop, np.stack([f.noise for f in feats]), n_samples=n)
        out.f0_synth = f0s
        out.sources = y_h + y_n
        out.mix_hat = ad.sum(out.sources, axis=1)

    # ------------------------------------------------------------ inference

    def separate(self, mixture, f0_truth=None, noise_seed=0):
        """Estimates (J, T), synthesized sources (J, T) and F0 (J, L_s)."""
        feats = self.build_features(mixture, f0_truth, noise_seed, with_target=False)
        out = self.forward([feats], terms=("synth",))
        sources = out.sources.data[0]
        m = self.cfg.model
        estimates = soft_mask_separate(feats.mixture, sources, m.mask_power, m.mask_eps,
                                       self.cfg.audio.stft_window, self.cfg.audio.stft_hop)
        return estimates, sources, out.f0.data[0]
