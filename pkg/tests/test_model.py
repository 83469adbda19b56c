import numpy as np
import pytest

from diffsep import autodiff as ad
from diffsep.data import generate_excerpt
from diffsep.losses import TERMS
from diffsep.model import Separator

from conftest import small_config


@pytest.fixture(scope="module")
def setup():
    cfg = small_config(0.5)
    model = Separator(cfg)
    ex = [generate_excerpt(s, cfg, excerpt_id=f"m{s}") for s in (1, 2)]
    return cfg, model, ex


def test_forward_shapes_and_terms(setup):
    cfg, model, ex = setup
    out = model.forward([model.features(e) for e in ex], TERMS, keys=[e.id for e in ex])
    n = cfg.n_samples
    assert out.sources.shape == (2, 4, n) and out.mix_hat.shape == (2, n)
    assert out.assigned.shape[:2] == (2, 4) and out.assigned.shape[-1] == 360
    assert set(out.terms) == set(TERMS)
    assert all(np.isfinite(float(v.data)) for v in out.terms.values())


def test_every_parameter_receives_gradient(setup):
    cfg, model, ex = setup
    out = model.forward([model.features(e) for e in ex], TERMS)
    ad.backward(out.terms["l_rec"] + out.terms["l1"] + out.terms["l2"] + out.terms["l3"])
    for name, p in model.store.named_parameters():
        if name.startswith("salience."):
            continue  # oracle salience bypasses the estimator
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
    model.store.zero_grad()


def test_frame_map_is_nearest_salience_frame(setup):
    cfg, model, _ = setup
    idx = model.frame_map(cfg.n_samples)
    t = np.arange(idx.size) * 256 / 16000
    assert np.all(np.abs(idx * 256 / 22050 - t) <= 0.5 * 256 / 22050 + 1e-12)


def test_frozen_cache_reuses_assignments(setup):
    cfg, model, ex = setup
    model.store.set_frozen({"salience", "assignment"})
    feats = [model.features(e) for e in ex]
    a = model.forward(feats, ("l_rec",), keys=[e.id for e in ex])
    b = model.forward(feats, ("l_rec",), keys=[e.id for e in ex])
    assert np.array_equal(a.f0.data, b.f0.data)
    assert float(a.terms["l_rec"].data) == float(b.terms["l_rec"].data)
    model.store.set_frozen(set())
    model.clear_caches()


def test_separate_conserves_the_mixture(setup):
    cfg, model, ex = setup
    est, sources, f0 = model.separate(ex[0].mixture.samples, ex[0].f0_truth)
    assert est.shape == sources.shape == (4, cfg.n_samples)
    assert np.max(np.abs(est.sum(axis=0) - ex[0].mixture.samples)) < 1e-5


def test_oracle_mode_requires_truth(setup):
    _, model, ex = setup
    with pytest.raises(ValueError):
        model.separate(ex[0].mixture.samples)


def test_net_salience_path_runs():
    cfg = small_config(0.5, salience={"source": "net"}, model={"salience_channels": 2, "salience_layers": 2})
    model = Separator(cfg)
    ex = generate_excerpt(4, cfg)
    est, _, f0 = model.separate(ex.mixture.samples)
    assert f0.shape[0] == 4 and np.all(np.isfinite(est))


def test_net_salience_is_peak_normalized_per_excerpt():
    cfg = small_config(0.5, salience={"source": "net"}, model={"salience_channels": 2, "salience_layers": 2})
    model = Separator(cfg)
    feats = [model.build_features(generate_excerpt(s, cfg).mixture.samples, noise_seed=s) for s in (1, 2)]
    sm = model._salience(feats)
    np.testing.assert_allclose(sm.data.max(axis=(1, 2)), 1.0, rtol=1e-6)
