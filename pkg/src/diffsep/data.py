"""Synthetic vocal-quartet corpora and WAV + F0-CSV ingestion.

A generated voice is a sequence of notes drawn log-uniformly inside its
range, joined by short log-frequency glides, with optional vibrato and
rests.  Stems are rendered with a decaying harmonic spectrum and a little
white breath noise, then summed into the mixture.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .salience import F0_MAX, F0_MIN
from .spectral import AudioBuffer, hcqt_frames, read_wav, write_wav
from .synth import oscillator_bank

MANIFEST = "manifest.jsonl"
RAMP_SECONDS = 0.01


@dataclass
class Excerpt:
    id: str
    mixture: AudioBuffer
    stems: list | None = None
    f0_truth: np.ndarray | None = None  # (J, L) at the salience frame rate, 0 = unvoiced
    voices: list = field(default_factory=list)
    split: str = "train"

    @property
    def noise_seed(self):
        return zlib.crc32(self.id.encode())

    def require_truth(self):
        if self.f0_truth is None:
            raise ValueError(f"excerpt {self.id} has no F0 annotation")
        return self.f0_truth

    def require_stems(self):
        if self.stems is None:
            raise ValueError(f"excerpt {self.id} has no reference stems")
        return self.stems


def salience_times(cfg):
    """Frame times of the salience grid for one excerpt (seconds)."""
    length = int(round(cfg.audio.excerpt_seconds * cfg.audio.salience_rate))
    count = hcqt_frames(length, cfg.hcqt.hop)
    return np.arange(count) * cfg.hcqt.hop / cfg.audio.salience_rate


def check_ranges(cfg):
    for voice in cfg.model.voices:
        lo, hi = cfg.data.ranges[voice]
        if not (F0_MIN <= lo <= hi < F0_MAX):
            raise ValueError(f"{voice} range [{lo}, {hi}] Hz lies outside the salience grid "
                             f"[{F0_MIN}, {F0_MAX:.1f}) Hz")


def _contour(rng, cfg, lo, hi, n):
    """Per-sample F0 (0 during rests) for one voice."""
    d = cfg.data
    sr = cfg.audio.sample_rate
    f0 = np.zeros(n)
    target = np.zeros(n)
    t = 0
    prev = None
    while t < n:
        dur = int(rng.uniform(*d.note_seconds) * sr)
        stop = min(n, t + max(dur, 1))
        if t > 0 and rng.uniform() < d.rest_prob:
            prev = None
            t = stop
            continue
        note = lo if hi == lo else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        seg = np.full(stop - t, np.log(note))
        glide = min(int(d.glide_seconds * sr), stop - t)
        if prev is not None and glide > 0:
            seg[:glide] = np.linspace(np.log(prev), np.log(note), glide)
        if rng.uniform() < d.vibrato_prob and d.vibrato_cents > 0:
            rate = rng.uniform(*d.vibrato_rate)
            tt = np.arange(stop - t) / sr
            seg = seg + np.log(2.0) * d.vibrato_cents / 1200.0 * np.sin(2 * np.pi * rate * tt)
        f0[t:stop] = np.exp(seg)
        target[t:stop] = 1.0
        prev = note
        t = stop
    return f0 * target


def _envelope(voiced, sr):
    """Linear fades at every voicing boundary to avoid clicks."""
    ramp = max(1, int(RAMP_SECONDS * sr))
    kernel = np.ones(ramp) / ramp
    env = np.convolve(voiced.astype(float), kernel, mode="same")
    return env * voiced


def _harmonic_amps(rng, cfg, f0):
    d = cfg.data
    k = np.arange(1, d.n_harmonics + 1)[:, None]
    rho = rng.uniform(*d.rolloff)
    amps = np.broadcast_to(k ** -rho, (d.n_harmonics, f0.size)).copy()
    amps[k * f0[None, :] >= cfg.audio.sample_rate / 2] = 0.0
    return amps / (k ** -rho).sum()


def _fill(f0):
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        return np.full_like(f0, 100.0)
    idx = np.clip(np.searchsorted(voiced, np.arange(f0.size)), 0, voiced.size - 1)
    return np.where(f0 > 0, f0, f0[voiced[idx]])


def generate_excerpt(seed, cfg=None, excerpt_id=None, split="train"):
    """Render one mixture with stems and truth F0 at the salience frame rate."""
    cfg = Config() if cfg is None else cfg
    check_ranges(cfg)
    sr = cfg.audio.sample_rate
    n = cfg.n_samples
    rng = np.random.default_rng(seed)
    times = salience_times(cfg)
    grid_idx = np.clip(np.round(times * sr).astype(int), 0, n - 1)
    stems, truth = [], []
    for voice in cfg.model.voices:
        lo, hi = cfg.data.ranges[voice]
        f0 = _contour(rng, cfg, lo, hi, n)
        voiced = f0 > 0
        tone = oscillator_bank(_fill(f0), _harmonic_amps(rng, cfg, _fill(f0)), sr)
        gain = rng.uniform(*cfg.data.gain) * cfg.data.amplitude
        breath = cfg.data.noise_level * rng.standard_normal(n)
        stem = (gain * _envelope(voiced, sr) * tone + breath * voiced).astype(np.float32)
        stems.append(AudioBuffer(stem, sr))
        truth.append(np.where(voiced[grid_idx], f0[grid_idx], 0.0))
    mixture = np.sum([s.samples for s in stems], axis=0, dtype=np.float32)
    if excerpt_id is None:
        excerpt_id = f"gen{seed}"
    return Excerpt(excerpt_id, AudioBuffer(mixture, sr), stems, np.asarray(truth), list(cfg.model.voices), split)


# ---------------------------------------------------------------- F0 CSV


def write_f0_csv(path, times, f0):
    f0 = np.atleast_2d(f0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_sec"] + [f"f0_{j + 1}" for j in range(f0.shape[0])])
        for i, t in enumerate(times):
            w.writerow([f"{t:.6f}"] + [f"{v:.4f}" for v in f0[:, i]])


def read_f0_csv(path):
    """Returns (times (L,), f0 (J, L))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "time_sec" or any(not h.startswith("f0_") for h in rows[0][1:]):
        raise ValueError(f"{path}: expected header time_sec,f0_1,...,f0_J")
    table = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    return table[:, 0], table[:, 1:].T.copy()


# ---------------------------------------------------------------- corpora


def split_counts(n, fractions):
    names = list(fractions)
    counts = [int(np.floor(n * fractions[k] + 1e-9)) for k in names]
    counts[0] += n - sum(counts)
    return dict(zip(names, counts))


def generate_corpus(out_dir, cfg, seconds=None, n_excerpts=None, splits=None):
    """Write WAV/CSV files and a manifest; returns the manifest path."""
    if n_excerpts is None:
        n_excerpts = int(round(seconds / cfg.audio.excerpt_seconds))
    if n_excerpts < 1:
        raise ValueError("corpus needs at least one excerpt")
    check_ranges(cfg)
    os.makedirs(out_dir, exist_ok=True)
    counts = split_counts(n_excerpts, splits or cfg.data.splits)
    tags = [name for name, c in counts.items() for _ in range(c)]
    seeds = np.random.SeedSequence(cfg.data.seed).generate_state(n_excerpts)
    times = salience_times(cfg)
    lines = [json.dumps({"meta": {"seed": cfg.data.seed, "voices": cfg.model.voices,
                                  "sample_rate": cfg.audio.sample_rate, "counts": counts,
                                  "data": cfg.to_dict()["data"]}}, sort_keys=True)]
    for i, (seed, tag) in enumerate(zip(seeds, tags)):
        ex = generate_excerpt(int(seed), cfg, excerpt_id=f"{tag}_{i:04d}", split=tag)
        folder = os.path.join(out_dir, ex.id)
        os.makedirs(folder, exist_ok=True)
        write_wav(os.path.join(folder, "mix.wav"), ex.mixture)
        stems = {}
        for voice, stem in zip(ex.voices, ex.stems):
            stems[voice] = f"{ex.id}/{voice}.wav"
            write_wav(os.path.join(out_dir, stems[voice]), stem)
        write_f0_csv(os.path.join(folder, "f0.csv"), times, ex.f0_truth)
        lines.append(json.dumps({"id": ex.id, "split": tag, "mixture": f"{ex.id}/mix.wav",
                                 "stems": stems, "f0": f"{ex.id}/f0.csv"}, sort_keys=True))
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    """(meta dict, entry list); ``path`` may be the manifest or its folder."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    meta, entries = {}, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "meta" in row:
                meta = row["meta"]
            else:
                entries.append(row)
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate excerpt ids")
    return meta, entries


def load_corpus(path, split=None, sample_rate=16000):
    """Yield Excerpts in manifest order, optionally restricted to one split."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    meta, entries = read_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    voices = meta.get("voices")
    for e in entries:
        if split is not None and e.get("split", "train") != split:
            continue
        mixture = read_wav(os.path.join(root, e["mixture"]), expected_rate=sample_rate)
        stems = None
        if e.get("stems"):
            names = voices or list(e["stems"])
            stems = [read_wav(os.path.join(root, e["stems"][v]), expected_rate=sample_rate) for v in names]
        f0 = None
        f0_path = os.path.join(root, e["f0"]) if e.get("f0") else None
        if f0_path and os.path.exists(f0_path):
            f0 = read_f0_csv(f0_path)[1]
        yield Excerpt(e["id"], mixture, stems, f0, list(voices or []), e.get("split", "train"))


def batches(items, batch_size, rng=None, drop_last=True):
    """Lists of ``batch_size`` items; shuffled when ``rng`` is given."""
    order = np.arange(len(items))
    if rng is not None:
        rng.shuffle(order)
    stop = len(items) - len(items) % batch_size if drop_last else len(items)
    return [[items[i] for i in order[s:s + batch_size]] for s in range(0, stop, batch_size)]
