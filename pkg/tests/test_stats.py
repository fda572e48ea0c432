import json
import math

import pytest
from conftest import check_golden
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import binomial_two_sided
from scipy.stats import binomtest

from icca.agents import CapabilityError, ConstantScorer, OracleListener, ScriptedScorer
from icca.corpus import synthetic_corpus
from icca.metrics import per_repetition
from icca.stats import (
    BootstrapSpec,
    bootstrap_ci,
    build_repeat_transcript,
    repeat_preference_experiment,
    sign_test,
)


def test_bootstrap_degenerate_cases():
    assert bootstrap_ci([0.5] * 54) == (0.5, 0.5, 0.5)
    assert bootstrap_ci([3.0]) == (3.0, 3.0, 3.0)
    with pytest.raises(ValueError):
        bootstrap_ci([])
    with pytest.raises(ValueError):
        BootstrapSpec(resamples=0)
    with pytest.raises(ValueError):
        BootstrapSpec(confidence=1.0)


def test_bootstrap_golden():
    data = [0.12, 0.5, 0.33, 0.9, 0.41, 0.05, 0.77, 0.6, 0.28, 0.94]
    triple = bootstrap_ci(data, BootstrapSpec(seed=1234))
    assert triple == bootstrap_ci(data, BootstrapSpec(seed=1234))
    check_golden("bootstrap_seed1234.json", json.dumps([repr(x) for x in triple]) + "\n")


@given(data=st.lists(st.floats(-5, 5), min_size=1, max_size=30), seed=st.integers(0, 99))
@settings(max_examples=50, deadline=None)
def test_bootstrap_interval_contains_mean_and_widens(data, seed):
    narrow = bootstrap_ci(data, BootstrapSpec(500, 0.8, seed))
    wide = bootstrap_ci(data, BootstrapSpec(500, 0.99, seed))
    assert narrow[1] <= narrow[0] <= narrow[2]
    assert wide[1] <= narrow[1] and narrow[2] <= wide[2]


def test_sign_test_examples():
    r = sign_test([(1, 0)] * 54)
    assert r.p_value == 2 * 0.5 ** 54
    assert (r.n_positive, r.n_negative, r.n_ties) == (54, 0, 0)
    assert sign_test([(1, 0)] * 27 + [(0, 1)] * 27).p_value == 1.0
    undefined = sign_test([(1, 1)] * 3)
    assert undefined.p_value is None and undefined.n_ties == 3 and not undefined.defined
    assert sign_test([(2, 1)]).p_value == 1.0
    with pytest.raises(ValueError):
        sign_test([])


@given(pos=st.integers(0, 40), neg=st.integers(0, 40), ties=st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_sign_test_matches_binomial(pos, neg, ties):
    pairs = [(1, 0)] * pos + [(0, 1)] * neg + [(0, 0)] * ties
    if pos + neg == 0:
        assert sign_test(pairs).p_value is None
        return
    r = sign_test(pairs)
    assert r.p_value == pytest.approx(binomial_two_sided(pos, neg), rel=1e-12)
    assert r.p_value == pytest.approx(binomtest(pos, pos + neg).pvalue, rel=1e-9)
    swapped = sign_test([(b, a) for a, b in pairs])
    assert (swapped.n_positive, swapped.n_negative, swapped.p_value) == (r.n_negative, r.n_positive, r.p_value)


def test_repeat_transcript():
    (inter,) = synthetic_corpus(0, "random", 1)
    rep = build_repeat_transcript(inter)
    first = {t.target_id: t.speaker_message for t in inter.repetition(1)}
    assert all(t.speaker_message == first[t.target_id] for t in rep.trials)
    assert build_repeat_transcript(rep) == rep
    assert [t.listener_selection for t in rep.trials] == [t.listener_selection for t in inter.trials]
    assert per_repetition("WNR", [rep], bootstrap=BootstrapSpec(100)).values == (0.0,) * 5
    (already,) = synthetic_corpus(0, "repeating", 1)
    assert build_repeat_transcript(already) == already


def test_repeat_preference_biased_and_unbiased():
    inters = synthetic_corpus(0, "random", 54)
    biased = repeat_preference_experiment(ScriptedScorer(bias=0.1), inters, with_images=False)
    assert (biased.logprob.n_positive, biased.perplexity.n_positive) == (54, 54)
    assert math.isclose(biased.logprob.p_value, 2 * 0.5 ** 54, abs_tol=1e-20)
    flat = repeat_preference_experiment(ConstantScorer(), inters[:5])
    assert flat.logprob.p_value is None and flat.perplexity.p_value is None
    one = repeat_preference_experiment(ScriptedScorer(bias=0.1), inters[:1])
    assert one.logprob.p_value == 1.0


def test_repeat_preference_needs_scoring():
    with pytest.raises(CapabilityError):
        repeat_preference_experiment(OracleListener(), synthetic_corpus(0, "random", 1))
