import numpy as np

from diffsep import autodiff as ad
from diffsep.gradcheck import CHECKS, TOLERANCE, check, relative_error, run_suite


def test_every_registered_check_passes():
    results = run_suite({k: v for k, v in CHECKS.items() if k != "l_rec"}, log=None)
    bad = {r.name: r.max_rel_error for r in results if not r.passed}
    assert not bad


def test_detects_a_wrong_gradient():
    def broken(a):
        out = ad.make_op(a.data ** 2, (a,), lambda g: (g * a.data,))  # should be 2a
        return ad.sum(out)
    rng = np.random.default_rng(0)
    assert check(broken, [rng.standard_normal(5)]) > TOLERANCE


def test_relative_error_is_symmetric_and_zero_on_equal():
    a = np.array([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, a + 1) == relative_error(a + 1, a)


def test_registry_covers_required_ops():
    need = {"l_rec", "l1_consistency", "l2_range", "l3_binary", "harmonic_synth", "noise_synth",
            "straight_through", "conv2d", "matmul"}
    assert need <= set(CHECKS)
