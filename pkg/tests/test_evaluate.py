import numpy as np

from diffsep.data import generate_excerpt
from diffsep.evaluate import evaluate_corpus, sdr_gain
from diffsep.metrics import pitch_accuracy
from diffsep.model import Separator
from diffsep.nets import oracle_salience
from diffsep.salience import FREQS, extract_f0

from conftest import small_config


def test_oracle_assignment_gives_perfect_pitch():
    cfg = small_config(2.0)
    ex = generate_excerpt(8, cfg)
    per_voice = oracle_salience(ex.f0_truth, per_voice=True)
    f0, _ = extract_f0(per_voice, 0.3, FREQS)
    for j in range(4):
        assert pitch_accuracy(ex.f0_truth[j], f0.data[j]) == (1.0, 1.0, 1.0)


def test_report_includes_mixture_baseline():
    cfg = small_config(0.5)
    model = Separator(cfg)
    items = [generate_excerpt(s, cfg, excerpt_id=f"e{s}") for s in (1, 2)]
    rep = evaluate_corpus(model, items)
    assert len(rep.baseline_si_sdr["soprano"]) == 2
    assert np.isfinite(sdr_gain(rep))
