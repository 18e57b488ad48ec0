from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elitepix import metrics
from elitepix.metrics import ConfusionCounts
from elitepix.stack_io import EliteMask

# elite-class counts (tp, fp, fn, tn) and the printed scores for the four test sites
SITES = {
    "chicago": ((893961, 208560, 58896, 13913433), ("98.22", "81.08", "93.81", "86.98")),
    "mexico": ((659709, 36240, 61475, 1401500), ("95.47", "94.79", "91.47", "93.10")),
    "indian_east_coast": ((1179527, 166269, 83776, 1268420), ("90.73", "87.64", "93.36", "90.41")),
    "java": ((1126922, 153773, 183806, 4585244), ("94.41", "87.99", "85.97", "86.97")),
}


@pytest.mark.parametrize("site", sorted(SITES))
def test_site_scores_reproduce(site):
    counts, printed = SITES[site]
    got = metrics.scores(ConfusionCounts(*counts)).reported()
    assert tuple(got[n] for n in metrics.SCORE_NAMES) == printed


def test_density_cross_check():
    assert metrics.format_percent(metrics.density_from_counts(952857, 15074850)) == "6.32"
    # Chicago's reference elite count is tp + fn of the confusion matrix
    assert 893961 + 58896 == 952857
    assert sum(SITES["chicago"][0]) == 15074850


def test_format_percent_modes():
    assert metrics.format_percent(Fraction(938190, 10000)) == "93.81"
    assert metrics.format_percent(Fraction(938190, 10000), "half_up") == "93.82"
    assert metrics.format_percent(100) == "100.00"
    assert metrics.format_percent(0) == "0.00"
    with pytest.raises(ValueError):
        metrics.format_percent(1, "banker")


def mask(elite, valid=None):
    elite = np.asarray(elite, bool)
    return EliteMask(elite, np.ones_like(elite) if valid is None else np.asarray(valid, bool))


def test_confusion_examples(rng):
    t = rng.random((8, 8)) < 0.4
    c = metrics.confusion(mask(t), mask(t))
    assert c.fp == c.fn == 0
    c = metrics.confusion(mask(np.ones((3, 4))), mask(np.zeros((3, 4))))
    assert (c.tp, c.tn, c.fp, c.fn) == (0, 0, 12, 0)
    with pytest.raises(ValueError):
        metrics.confusion(mask(np.ones((3, 4))), mask(np.ones((4, 3))))


def test_confusion_only_counts_valid_in_both(rng):
    valid_a = rng.random((10, 10)) < 0.8
    valid_b = rng.random((10, 10)) < 0.8
    a = mask((rng.random((10, 10)) < 0.5) & valid_a, valid_a)
    b = mask((rng.random((10, 10)) < 0.5) & valid_b, valid_b)
    assert metrics.confusion(a, b).total == int((valid_a & valid_b).sum())


@given(st.integers(0, 2 ** 31))
def test_score_identities(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random(200) < 0.3, rng.random(200) < 0.4
    c = metrics.confusion(mask(p[None]), mask(t[None]))
    assert c.total == 200
    s = metrics.scores(c)
    if c.tp:
        assert s.f1 == Fraction(200 * c.tp, 2 * c.tp + c.fp + c.fn)
        assert s.f1 == 2 * s.precision * s.recall / (s.precision + s.recall)
    perm = rng.permutation(200)
    assert metrics.confusion(mask(p[perm][None]), mask(t[perm][None])) == c
    swapped = metrics.scores(metrics.confusion(mask(t[None]), mask(p[None])))
    assert (swapped.precision, swapped.recall) == (s.recall, s.precision)


def test_degenerate_denominators():
    s = metrics.scores(ConfusionCounts(0, 0, 0, 10))
    assert s.accuracy == 100 and s.precision == s.recall == s.f1 == 0
    assert set(s.undefined) == {"precision", "recall", "f1"}
    with pytest.raises(ValueError):
        metrics.scores(ConfusionCounts(0, 0, 0, 0))
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_pixel_density():
    assert metrics.format_percent(metrics.pixel_density(mask(np.zeros((4, 4))))) == "0.00"
    assert metrics.format_percent(metrics.pixel_density(mask(np.ones((4, 4))))) == "100.00"
    with pytest.raises(ValueError):
        metrics.pixel_density(EliteMask(np.zeros((2, 2), bool), np.zeros((2, 2), bool)))


def test_report_outputs(rng):
    t = rng.random((20, 20)) < 0.3
    rep = metrics.report(mask(t), mask(t))
    assert rep["scores"]["accuracy"] == "100.00"
    csv_text = metrics.report_csv(rep, "s1")
    header, row = csv_text.strip().split("\n")
    assert header.split(",") == list(metrics.CSV_FIELDS)
    assert row.startswith("s1,")
    assert '"accuracy": "100.00"' in metrics.report_json(rep)
