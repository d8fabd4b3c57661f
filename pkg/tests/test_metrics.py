import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codit.metrics import MetricReport, auroc, detection_delay, threshold_at_tpr, tnr_at_tpr
from codit.timeseries import OOD_LABEL, Trace


def brute_auroc(pos, neg):
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("pos, neg, expected", [
    ([0.9, 0.8], [0.1, 0.2], 1.0),
    ([0.1, 0.2], [0.9, 0.8], 0.0),
    ([0.5, 0.5], [0.5, 0.5], 0.5),
    ([0.9, 0.4], [0.5, 0.1], 0.75),
    ([0.9, 0.3], [0.5, 0.1], 0.75),
    ([0.4], [0.4, 0.1], 0.75),
])
def test_auroc_examples(pos, neg, expected):
    assert auroc(pos, neg) == expected


finite = st.integers(0, 8).map(float)


@settings(max_examples=200, deadline=None)
@given(pos=st.lists(finite, min_size=1, max_size=15), neg=st.lists(finite, min_size=1, max_size=15))
def test_auroc_matches_brute_force_and_is_antisymmetric(pos, neg):
    a = auroc(pos, neg)
    assert a == pytest.approx(brute_auroc(pos, neg), abs=1e-12)
    assert a + auroc(neg, pos) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(pos=st.lists(finite, min_size=1, max_size=15), neg=st.lists(finite, min_size=1, max_size=15))
def test_auroc_invariant_under_monotone_relabelling(pos, neg):
    f = lambda v: np.exp(np.asarray(v) / 3.0) - 7.0
    assert auroc(f(pos), f(neg)) == pytest.approx(auroc(pos, neg), abs=1e-12)
    for target in (0.9, 0.95):
        assert tnr_at_tpr(f(pos), f(neg), target) == tnr_at_tpr(pos, neg, target)


@pytest.mark.parametrize("pos, neg", [([], [1.0]), ([1.0], [])])
def test_empty_side_raises(pos, neg):
    with pytest.raises(ValueError, match="empty"):
        auroc(pos, neg)
    with pytest.raises(ValueError, match="empty"):
        tnr_at_tpr(pos, neg)


def brute_tnr(pos, neg, target):
    best = max(th for th in set(pos) if np.mean(np.asarray(pos) >= th) >= target)
    return best, float(np.mean(np.asarray(neg) < best))


@settings(max_examples=200, deadline=None)
@given(pos=st.lists(finite, min_size=1, max_size=25), neg=st.lists(finite, min_size=1, max_size=25),
       target=st.sampled_from([0.5, 0.9, 0.95, 1.0]))
def test_threshold_is_largest_meeting_target(pos, neg, target):
    res = threshold_at_tpr(pos, neg, target)
    want_theta, want_tnr = brute_tnr(pos, neg, target)
    assert res.threshold == want_theta and res.tnr == want_tnr
    assert res.achieved_tpr >= target


def test_tnr_identical_sets_bounded_by_discreteness():
    pos = np.arange(40.0)
    assert tnr_at_tpr(pos, pos, 0.95) <= 1 - 0.95 + 1 / 40
    assert tnr_at_tpr([0.9, 0.8], [0.1, 0.2]) == 1.0


def test_tnr_twenty_id_windows_keep_nineteen():
    pos = np.linspace(0.05, 1.0, 20)
    res = threshold_at_tpr(pos, [0.0, 0.2, 0.04], 0.95)
    assert np.count_nonzero(pos >= res.threshold) >= 19
    assert res.threshold == pytest.approx(0.1)
    assert res.tnr == pytest.approx(2 / 3)


@pytest.mark.parametrize("target", [0.0, -0.1, 1.2])
def test_threshold_rejects_bad_target(target):
    with pytest.raises(ValueError):
        threshold_at_tpr([1.0], [0.0], target)


def ood_trace(tid="o", T=12, onset=6):
    return Trace(tid, np.zeros((T, 1)), OOD_LABEL, ood_kind="drift", ood_onset=onset)


def test_delay_counts_windows_from_first_ood_window():
    tr = ood_trace()
    w = 4
    first = 6 - w + 1
    scores = {(tr.id, t, w): 1.0 for t in range(tr.T - w + 1)}
    scores[(tr.id, 0, w)] = 0.0  # pre-onset false alarm is ignored
    scores[(tr.id, first + 3, w)] = 0.0
    res = detection_delay([tr], scores, 0.5, w)
    assert res.mean_delay == 3 and res.undetected_count == 0 and res.per_trace == {"o": 3}


def test_delay_zero_when_first_ood_window_flagged():
    tr = ood_trace()
    scores = {(tr.id, t, 4): 0.0 for t in range(9)}
    assert detection_delay([tr], scores, 0.5, 4).mean_delay == 0


def test_delay_undetected_traces_excluded_and_counted():
    a, b = ood_trace("a"), ood_trace("b")
    scores = {(tr.id, t, 4): 1.0 for tr in (a, b) for t in range(9)}
    scores[("a", 5, 4)] = 0.0
    res = detection_delay([a, b], scores, 0.5, 4)
    assert res.mean_delay == 2 and res.undetected_count == 1 and res.per_trace["b"] is None


def test_delay_not_applicable_when_nothing_detected():
    tr = ood_trace()
    res = detection_delay([tr], {(tr.id, t, 4): 1.0 for t in range(9)}, 0.5, 4)
    assert res.mean_delay is None and res.display == "NA" and res.undetected_count == 1
    report = MetricReport(0.5, 0.0, 0.95, 1.0, 0.5, mean_delay=res.mean_delay)
    assert report.to_json()["mean_delay"] == "NA"


def test_delay_with_onset_at_start_and_stride():
    tr = ood_trace(onset=0)
    scores = {(tr.id, t, 4): (0.0 if t == 4 else 1.0) for t in range(0, 9, 2)}
    assert detection_delay([tr], scores, 0.5, 4, stride=2).mean_delay == 2


def test_delay_rejects_id_trace_and_missing_scores():
    with pytest.raises(ValueError):
        detection_delay([Trace("i", np.zeros((8, 1)))], {}, 0.5, 4)
    with pytest.raises(KeyError):
        detection_delay([ood_trace()], {}, 0.5, 4)
