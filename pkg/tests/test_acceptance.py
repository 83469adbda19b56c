"""Acceptance criteria 1-8.

Each test records one pass/fail line (printed in the terminal summary) and
then asserts.  Every tolerance lives in the constants block below.
Criteria 6 and 7 train real models and take several minutes.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from diffsep import autodiff as ad
from diffsep import gradcheck
from diffsep.cli import main
from diffsep.config import Config
from diffsep.data import generate_corpus, load_corpus
from diffsep.evaluate import evaluate_corpus, mean_rpa, sdr_gain
from diffsep.losses import TERMS, LossReport, LossWeights, combine, l1_consistency, l2_range, l3_binary, l_rec
from diffsep.metrics import pitch_accuracy, si_sdr
from diffsep.model import Separator
from diffsep.salience import FREQS, binarize, extract_f0, range_masks
from diffsep.synth import soft_mask_separate, soft_masks
from diffsep.train import TrainPlan, load_checkpoint, model_from_checkpoint, pretrain, run_plan

from conftest import ACCEPTANCE

# -- 1: gradient suite
GRAD_TOL = 1e-4
GRAD_MIN_FIXTURES = 5
GRAD_MAX_SECONDS = 120.0
# -- 2: loss identities
L_FULL_TOL = 1e-9
# -- 4: mask conservation
MASK_SUM_TOL = 1e-6
RECON_TOL = 1e-5
# -- 5: metric oracles
SCALE_DRIFT_DB = 1e-9
N_PITCH_TRACKS = 100
# -- 6: toy reproduction
RPA_MIN = 0.95
GAIN_MIN_DB = 5.0           # contract bound
GAIN_TIGHT_DB = 10.0        # tightened after the first measurement (13.2 dB)
GAIN_FLOOR_DB = 3.0         # never loosen below this
MAX_EPOCHS = 200
MAX_MINUTES = 60.0
TRAIN_SECONDS_TARGET = 150.0
# -- 7: strategy ordering
SEEDS = (0, 1, 2)
MISCALIBRATION = -2.0       # head logit shift; peaks fall below the 0.3 threshold

assert GAIN_TIGHT_DB >= GAIN_MIN_DB >= GAIN_FLOOR_DB

# toy corpus layout: 37 x 4 s = 148 s of training audio
TOY = {"train": 37, "valid": 10, "test": 15}
TOY_TRAIN = {"lr": 1e-3, "wup_epochs": [5, 10], "max_epochs": 25, "patience": 10}
ORDER = {"train": 15, "valid": 5, "test": 8}
ORDER_TRAIN = {"lr": 1e-3, "batch_size": 5, "wup_epochs": [4, 8], "max_epochs": 20, "patience": 10}


def record(key, passed, detail):
    ACCEPTANCE[key] = (bool(passed), detail)
    assert passed, detail


def write_corpus(root, seed, counts):
    cfg = Config()
    cfg.data.seed = seed
    total = sum(counts.values())
    fractions = {k: float(Fraction(v, total)) for k, v in counts.items()}
    generate_corpus(root, cfg, n_excerpts=total, splits=fractions)
    return {k: list(load_corpus(root, k)) for k in counts}


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("toy"), 2024, TOY)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Assignment net warm-started on an independent corpus; returns its parameters."""
    corpus = write_corpus(tmp_path_factory.mktemp("pre"), 77, {"train": 37})["train"]
    model = Separator(Config())
    pretrain(model, corpus, steps=600, lr=1e-2)
    return {k: v.copy() for k, v in model.store.state().items() if k.startswith("assignment.")}


def configured(train, seed=0):
    cfg = Config()
    cfg.update({"train": {**train, "seed": seed}, "model": {"seed": seed}})
    return cfg


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite(capsys):
    start = time.perf_counter()
    code = main(["gradcheck"])
    seconds = time.perf_counter() - start
    out = capsys.readouterr().out
    worst = max(float(line.split("max_rel_err=")[1].split()[0]) for line in out.splitlines()
                if "max_rel_err=" in line and line[:4] in ("ok  ", "FAIL"))
    ok = (code == 0 and worst < GRAD_TOL and gradcheck.N_FIXTURES >= GRAD_MIN_FIXTURES
          and seconds < GRAD_MAX_SECONDS and gradcheck.TOLERANCE == GRAD_TOL)
    record(1, ok, f"{len(gradcheck.CHECKS)} ops, worst rel err {worst:.2e} < {GRAD_TOL:g}, "
                  f"{gradcheck.N_FIXTURES} fixtures each, {seconds:.0f}s < {GRAD_MAX_SECONDS:.0f}s, exit {code}")


# ---------------------------------------------------------------- 2


def test_criterion_2_loss_identities():
    r = np.random.default_rng(2)
    x = r.standard_normal((2, 8192))
    rec0 = float(l_rec(x, ad.Value(x)).data)
    sa = r.random((2, 4, 10, 360))
    l1_0 = float(l1_consistency(sa, sa.sum(axis=1)).data)
    masks = range_masks()
    l2_0 = float(l2_range(sa * masks[None, :, None, :], masks).data)
    sb = binarize(sa)
    l3_0 = float(l3_binary(sb, sb).data)
    worst = 0.0
    for _ in range(200):
        vals = dict(zip(TERMS, r.uniform(0, 1e6, 4) * 10.0 ** r.integers(-8, 1, 4)))
        w = LossWeights(*(10.0 ** r.uniform(-6, 6, 3)), "fixed")
        rep = LossReport.assemble(vals, w)
        ref = math.fsum([vals["l_rec"], w.alpha * vals["l1"], w.beta * vals["l2"], w.gamma * vals["l3"]])
        c = float(combine({k: ad.Value(np.array(v)) for k, v in vals.items()}, w).data)
        worst = max(worst, abs(rep.l_full - ref) / max(1.0, abs(ref)), abs(c - ref) / max(1.0, abs(ref)))
    ok = rec0 == 0 and l1_0 == 0 and l2_0 == 0 and l3_0 == 0 and worst <= L_FULL_TOL
    record(2, ok, f"l_rec(x,x)={rec0}, l1={l1_0}, l2={l2_0}, l3={l3_0}, "
                  f"l_full rel err {worst:.1e} <= {L_FULL_TOL:g}")


# ---------------------------------------------------------------- 3


def test_criterion_3_straight_through_contract():
    r = np.random.default_rng(3)
    freqs = FREQS
    forward_ok = backward_ok = True
    voiced_frames = 0
    for _ in range(20):
        sa = r.random((4, 30, 360)) * r.uniform(0.2, 1.0)
        sa[:, ::7] *= 0.1  # force some unvoiced frames
        v = ad.Value(sa, requires_grad=True)
        f0, _ = extract_f0(v, 0.3, freqs)
        peak = sa.argmax(axis=-1)
        hard = np.where(sa.max(axis=-1) >= 0.3, freqs[peak], 0.0)
        forward_ok &= f0.data.tobytes() == hard.tobytes()
        g = r.standard_normal(f0.shape)
        ad.backward(ad.sum(f0 * g))
        voiced = hard > 0
        voiced_frames += int(voiced.sum())
        backward_ok &= np.array_equal(v.grad[voiced], (g[..., None] * freqs)[voiced])
    record(3, forward_ok and backward_ok,
           f"forward bitwise={forward_ok}, dS^a = g*f on {voiced_frames} voiced frames={backward_ok}")


# ---------------------------------------------------------------- 4


def test_criterion_4_mask_conservation():
    r = np.random.default_rng(4)
    mask_err = recon_err = 0.0
    for _ in range(10):
        mix = r.standard_normal(16000).astype(np.float32)
        src = r.standard_normal((4, 16000)) * r.uniform(0, 2, (4, 1))
        src[r.integers(4)] = 0.0  # a silent source must not break the partition
        mask_err = max(mask_err, float(np.max(np.abs(soft_masks(src).sum(axis=0) - 1.0))))
        recon_err = max(recon_err, float(np.max(np.abs(soft_mask_separate(mix, src).sum(axis=0) - mix))))
    ok = mask_err <= MASK_SUM_TOL and recon_err < RECON_TOL
    record(4, ok, f"max |sum masks - 1| = {mask_err:.1e} <= {MASK_SUM_TOL:g}, "
                  f"max |sum stems - mix| = {recon_err:.1e} < {RECON_TOL:g}")


# ---------------------------------------------------------------- 5


def _pitch_oracle(ref, est, tol=50.0):
    hits = chroma = correct = voiced = 0
    for a, b in zip(ref.tolist(), est.tolist()):
        voiced += a > 0
        if a > 0 and b > 0:
            c = 1200.0 * math.log2(b / a)
            hits += abs(c) <= tol
            correct += abs(c) <= tol
            chroma += abs(c - 1200.0 * round(c / 1200.0)) <= tol
        elif a <= 0 and b <= 0:
            correct += 1
    if not voiced:
        return correct / len(ref), 1.0, 1.0
    return correct / len(ref), hits / voiced, chroma / voiced


def test_criterion_5_metric_oracles():
    r = np.random.default_rng(5)
    drift = 0.0
    for _ in range(50):
        s = r.standard_normal(4000)
        e = s + r.uniform(0.01, 2) * r.standard_normal(4000)
        base = si_sdr(s, e)
        for k in (1e-3, 0.5, 7.0, 1e3):
            drift = max(drift, abs(si_sdr(s, k * e) - base))
    exact = rca_ok = True
    for _ in range(N_PITCH_TRACKS):
        n = int(r.integers(20, 300))
        ref = np.exp(r.uniform(np.log(60), np.log(1000), n)) * (r.random(n) > r.uniform(0, 0.6))
        est = ref * 2.0 ** (r.normal(0, r.uniform(5, 80), n) / 1200)
        est *= 2.0 ** r.choice([-1, 0, 0, 0, 1], n)
        est[r.random(n) < 0.15] = 0.0
        junk = r.random(n) < 0.1
        est[junk] = r.uniform(60, 1000, junk.sum())
        got = pitch_accuracy(ref, est)
        exact &= got == _pitch_oracle(ref, est)
        rca_ok &= got[2] >= got[1]
    ok = drift <= SCALE_DRIFT_DB and exact and rca_ok
    record(5, ok, f"si_sdr scale drift {drift:.1e} dB <= {SCALE_DRIFT_DB:g}, "
                  f"pitch == oracle on {N_PITCH_TRACKS} tracks: {exact}, RCA >= RPA: {rca_ok}")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_toy_reproduction(toy, pretrained, tmp_path):
    cfg = configured(TOY_TRAIN)
    model = Separator(cfg)
    model.store.load_state(pretrained, strict=False)
    train_seconds = len(toy["train"]) * cfg.audio.excerpt_seconds
    start = time.perf_counter()
    res = run_plan(TrainPlan.for_strategy("wup", cfg.train), model, toy["train"], toy["valid"],
                   tmp_path / "wup.jsonl", tmp_path / "wup.ckpt")
    minutes = (time.perf_counter() - start) / 60
    epochs = sum(p["epochs"] for p in res.phase_ledger)
    report = evaluate_corpus(model, toy["test"])
    rpa, gain = mean_rpa(report), sdr_gain(report)
    ok = (rpa >= RPA_MIN and gain >= GAIN_TIGHT_DB and epochs <= MAX_EPOCHS and minutes < MAX_MINUTES
          and abs(train_seconds - TRAIN_SECONDS_TARGET) <= 10)
    record(6, ok, f"W_UP on {train_seconds:.0f}s: RPA {rpa:.3f} >= {RPA_MIN}, SI-SDR "
                  f"{report.mean('si_sdr'):.2f} dB vs mixture {report.mean('baseline_si_sdr'):.2f} dB "
                  f"(gain {gain:.2f} >= {GAIN_TIGHT_DB} dB; contract {GAIN_MIN_DB}), "
                  f"{epochs} epochs, {minutes:.1f} min")


# ---------------------------------------------------------------- 7


@pytest.fixture(scope="session")
def order_corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("order"), 31, ORDER)


@pytest.mark.slow
def test_criterion_7_strategy_ordering(order_corpus, pretrained):
    scores = {s: [] for s in ("sfsf", "sfsft", "wup")}
    for seed in SEEDS:
        for strategy in scores:
            cfg = configured(ORDER_TRAIN, seed)
            model = Separator(cfg)
            model.store.load_state(pretrained, strict=False)
            model.assignment.shift_head(MISCALIBRATION)
            run_plan(TrainPlan.for_strategy(strategy, cfg.train), model, order_corpus["train"],
                     order_corpus["valid"])
            scores[strategy].append(evaluate_corpus(model, order_corpus["test"], pitch=False).mean("si_sdr"))
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    per_seed = all(w > f and t > f for w, t, f in zip(scores["wup"], scores["sfsft"], scores["sfsf"]))
    ok = mean["wup"] > mean["sfsf"] and mean["sfsft"] > mean["sfsf"]
    detail = ", ".join(f"{k} {m:.2f} dB" for k, m in mean.items())
    record(7, ok, f"mean SI-SDR over seeds {SEEDS}: {detail}; strict on every seed: {per_seed}")


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(toy, tmp_path):
    train = dict(TOY_TRAIN, max_epochs=3, wup_epochs=[1, 1], batch_size=2)
    blobs = []
    for run in range(2):
        cfg = configured(train, seed=5)
        run_plan(TrainPlan.for_strategy("wup", cfg.train), Separator(cfg), toy["train"][:4], toy["valid"][:2],
                 ckpt_path=tmp_path / f"run{run}.ckpt")
        blobs.append((tmp_path / f"run{run}.ckpt").read_bytes())
    same_ckpt = blobs[0] == blobs[1]
    ck = load_checkpoint(tmp_path / "run0.ckpt")
    a, b = model_from_checkpoint(ck), model_from_checkpoint(load_checkpoint(tmp_path / "run1.ckpt"))
    ex = toy["test"][0]
    outs = [m.separate(ex.mixture.samples, ex.f0_truth, ex.noise_seed) for m in (a, b)]
    # the reloaded model must equal the model object that produced the checkpoint
    fresh = Separator(configured(train, seed=5))
    fresh.store.load_state(ck.params)
    direct = fresh.separate(ex.mixture.samples, ex.f0_truth, ex.noise_seed)
    same_fwd = all(np.array_equal(x, y) and np.array_equal(x, z) for x, y, z in zip(*outs, direct))
    record(8, same_ckpt and same_fwd, f"two runs bit-identical checkpoints: {same_ckpt} ({len(blobs[0])} bytes), "
                                      f"round-trip forward bitwise: {same_fwd}")
