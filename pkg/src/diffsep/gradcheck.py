"""Central finite-difference checks for every differentiable op.

``run_suite`` is what the ``gradcheck`` subcommand executes.  Checks are
registered in :data:`CHECKS`; each builds fixtures from a seeded generator
and returns the worst relative error over its fixtures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

STEP = 1e-5
TOLERANCE = 1e-4
N_FIXTURES = 5


def numerical_grad(fn, arrays, index, step=STEP):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(*[ad.Value(a) for a in base]).data)
        flat[i] = orig - step
        down = float(fn(*[ad.Value(a) for a in base]).data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_grad(fn, arrays):
    values = [ad.Value(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*values)
    ad.backward(out)
    return [v.grad for v in values]


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(fn, arrays, wrt=None, step=STEP):
    """Worst relative error between analytic and numerical gradients."""
    wrt = range(len(arrays)) if wrt is None else wrt
    grads = analytic_grad(fn, arrays)
    return max(relative_error(grads[i], numerical_grad(fn, arrays, i, step)) for i in wrt)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE)


CHECKS = {}


def register(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def _fixtures(fixture, n=N_FIXTURES, seed=0):
    rng = np.random.default_rng(seed)
    return [fixture(rng) for _ in range(n)]


def _worst(fn, fixture, wrt=None, n=N_FIXTURES, seed=0):
    return max(check(fn, arrays, wrt) for arrays in _fixtures(fixture, n, seed))


# ---------------------------------------------------------------- core ops


@register("add")
def _check_add():
    return _worst(lambda a, b: ad.sum((a + b) * (a + b)),
                  lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))])


@register("mul")
def _check_mul():
    return _worst(lambda a, b: ad.sum(a * b * a), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))])


@register("div")
def _check_div():
    return _worst(lambda a, b: ad.sum(a / b),
                  lambda r: [r.normal(size=(5,)), r.uniform(0.5, 2.0, size=(5,))])


@register("matmul")
def _check_matmul():
    return _worst(lambda a, b: ad.sum(ad.tanh(a @ b)),
                  lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))])


@register("conv1d")
def _check_conv1d():
    return _worst(lambda x, w, b: ad.sum(ad.tanh(ad.conv1d(x, w, b))),
                  lambda r: [r.normal(size=(2, 2, 7)), r.normal(size=(3, 2, 3)), r.normal(size=(3,))])


@register("conv2d")
def _check_conv2d():
    return _worst(lambda x, w, b: ad.sum(ad.tanh(ad.conv2d(x, w, b))),
                  lambda r: [r.normal(size=(2, 2, 4, 5)), r.normal(size=(2, 2, 3, 3)), r.normal(size=(2,))])


@register("sigmoid")
def _check_sigmoid():
    return _worst(lambda a: ad.sum(ad.sigmoid(a) * a), lambda r: [r.normal(size=(16,)) * 3])


@register("tanh")
def _check_tanh():
    return _worst(lambda a: ad.sum(ad.tanh(a) ** 2), lambda r: [r.normal(size=(16,))])


@register("exp")
def _check_exp():
    return _worst(lambda a: ad.sum(ad.exp(a)), lambda r: [r.normal(size=(16,))])


@register("log")
def _check_log():
    return _worst(lambda a: ad.sum(ad.log(a)), lambda r: [r.uniform(0.1, 3.0, size=(16,))])


@register("abs")
def _check_abs():
    # keep entries away from the kink
    return _worst(lambda a: ad.sum(ad.abs(a) * a),
                  lambda r: [r.choice([-1, 1], size=16) * r.uniform(0.1, 2.0, size=16)])


@register("l1_norm")
def _check_l1():
    return _worst(lambda a, b: ad.l1_norm(a - b),
                  lambda r: [r.normal(size=(4, 4)), r.normal(size=(4, 4)) + 3.0])


@register("mse")
def _check_mse():
    return _worst(lambda a, b: ad.mse(a, b), lambda r: [r.normal(size=(4, 5)), r.normal(size=(4, 5))])


@register("sum_mean")
def _check_reductions():
    return _worst(lambda a: ad.sum(ad.mean(a, axis=1) ** 2) + ad.sum(ad.sum(a, axis=0, keepdims=True) ** 3),
                  lambda r: [r.normal(size=(3, 4))])


@register("slice_concat")
def _check_slice_concat():
    def fn(a, b):
        c = ad.concat([a[:, 1:], b], axis=1)
        d = ad.stack([c, c * c], axis=0)
        weights = np.arange(30.0).reshape(2, 5, 3)
        return ad.sum(ad.take(d, [1, 1, 0], axis=1) * d) + ad.sum(ad.transpose(d, (0, 2, 1)) * weights)
    return _worst(fn, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 2))])


@register("frame_overlap_add")
def _check_frames():
    def fn(x):
        f = ad.frame(x, 8, 4, center=True)
        y = ad.overlap_add(f * f, 4, 40)
        return ad.sum(y * ad.Value(np.linspace(-1, 1, 40)))
    return _worst(fn, lambda r: [r.normal(size=(2, 37))])


@register("rfft_mag")
def _check_rfft_mag():
    def fn(x):
        return ad.sum(ad.rfft_mag(x) ** 1.5) + ad.sum(ad.rfft_mag(x, n=12))
    return _worst(fn, lambda r: [r.normal(size=(3, 9))])


@register("straight_through")
def _check_straight_through():
    # checked against the surrogate sum_i f_i * soft_i, which shares the backward rule
    freqs = np.linspace(50.0, 400.0, 6)

    def surrogate(soft):
        return ad.sum(soft * freqs)

    def st(soft):
        hard = (soft.data == soft.data.max(axis=-1, keepdims=True)).astype(soft.data.dtype)
        return ad.sum(ad.straight_through(soft, hard) * freqs)

    worst = 0.0
    for (soft,) in _fixtures(lambda r: [r.uniform(size=(4, 6))]):
        g_st = analytic_grad(st, [soft])[0]
        g_fd = numerical_grad(surrogate, [soft], 0)
        worst = max(worst, relative_error(g_st, g_fd))
    return worst


# ---------------------------------------------------------------- domain ops


@register("l_rec")
def _check_l_rec():
    from .losses import l_rec, spectral_target

    # rejection-sample estimates whose STFT magnitudes stay away from zero:
    # near-zero bins make log|X| too curved for a 1e-5 central difference
    def fixture(r):
        while True:
            x_hat = r.normal(size=1024)
            if min(m.min() for m in spectral_target(x_hat)) > 1e-2:
                return [x_hat, r.normal(size=1024)]

    return _worst(lambda x_hat, x: l_rec(x.data, x_hat), fixture, wrt=[0])


@register("l1_consistency")
def _check_l1_consistency():
    from .losses import l1_consistency

    return _worst(lambda sa, sm: l1_consistency(sa, sm.data),
                  lambda r: [r.uniform(size=(4, 3, 6)), r.uniform(size=(3, 6))], wrt=[0])


@register("l2_range")
def _check_l2_range():
    from .losses import l2_range

    def fixture(r):
        return [r.uniform(size=(4, 3, 8)), (r.uniform(size=(4, 8)) > 0.5).astype(float)]

    return _worst(lambda sa, masks: l2_range(sa, masks.data), fixture, wrt=[0])


@register("l3_binary")
def _check_l3_binary():
    from .losses import l3_binary

    def fixture(r):
        sa = r.uniform(size=(4, 3, 8))
        return [sa, (sa == sa.max(axis=-1, keepdims=True)).astype(float)]

    return _worst(lambda sa, sb: l3_binary(sa, sb.data), fixture, wrt=[0])


@register("harmonic_synth")
def _check_harmonic_synth():
    from .synth import harmonic_synth

    sr, hop = 16000, 256
    n_frames = 16  # 0.25 s
    f0 = np.linspace(180.0, 260.0, n_frames)
    f0[3] = 0.0

    def fn(amps, gain):
        y = harmonic_synth(f0, amps, gain, sample_rate=sr, hop=hop)
        return ad.sum(y * y)

    def fixture(r):
        return [r.uniform(0.1, 1.0, size=(n_frames, 6)), r.uniform(0.2, 1.0, size=(n_frames,))]

    return _worst(fn, fixture)


@register("noise_synth")
def _check_noise_synth():
    from .synth import noise_synth

    sr, hop = 16000, 256
    noise = np.random.default_rng(7).uniform(-1, 1, size=8 * hop)

    def fn(mags):
        y = noise_synth(mags, sample_rate=sr, hop=hop, noise=noise)
        return ad.sum(y * y)

    return _worst(fn, lambda r: [r.uniform(0.0, 1.0, size=(9, 5))])


def run_suite(checks=None, log=print):
    """Run each registered check; returns a list of :class:`CheckResult`."""
    checks = CHECKS if checks is None else checks
    results = []
    for name, fn in checks.items():
        start = time.perf_counter()
        try:
            err = float(fn())
        except Exception as exc:  # a crashing check is a failing check
            log(f"{name}: error {exc!r}")
            err = float("inf")
        res = CheckResult(name, err, time.perf_counter() - start)
        results.append(res)
        if log is not None:
            status = "ok  " if res.passed else "FAIL"
            log(f"{status} {name:<20s} max_rel_err={res.max_rel_error:.3e} ({res.seconds:.2f}s)")
    return results
