import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomtl.metrics import (
    CaseStudyReport,
    TitlePick,
    UndefinedMetricError,
    case_study,
    csv_to_rows,
    gain_table,
    histogram_svg,
    pick_titles,
    pr_auc,
    relative_gain,
    rows_to_csv,
    score_histogram,
)


def sweep_oracle(scores, labels, stable):
    """O(n^2) threshold sweep: walk the list in rank order, one cut per position."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], stable[i]))
    total_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for k in range(1, n + 1):
        top = order[:k]
        tp = sum(labels[i] for i in top)
        precision = tp / k
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_perfect_ranking():
    assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_one_pos_one_neg_reversed():
    assert pr_auc([0.2, 0.7], [1, 0]) == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_random_200_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(200)
    y = (rng.random(200) < 0.3).astype(int)
    y[0], y[1] = 1, 0
    assert abs(pr_auc(s, y) - sweep_oracle(s.tolist(), y.tolist(), list(range(200)))) <= 1e-12


def test_ties_follow_stable_index():
    s = [0.5, 0.5, 0.5, 0.5]
    assert pr_auc(s, [0, 0, 1, 1]) == pytest.approx((1 / 3 + 2 / 4) / 2, abs=1e-15)
    # reversing the stable index puts the positives first
    assert pr_auc(s, [0, 0, 1, 1], stable_index=[3, 2, 1, 0]) == 1.0


def test_no_positives_or_negatives_raise():
    with pytest.raises(UndefinedMetricError):
        pr_auc([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        pr_auc([0.1, 0.2], [1, 1])


def test_nonfinite_scores_rejected():
    with pytest.raises(ValueError):
        pr_auc([0.1, np.nan], [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_monotone_transform_invariance(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 5, n) / 5.0  # plenty of ties
    y = rng.integers(0, 2, n)
    y[0], y[-1] = 1, 0
    assert pr_auc(s, y) == pr_auc(np.exp(3 * s) - 7, y)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 80), st.integers(0, 2**32 - 1))
def test_pr_auc_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[-1] = 1, 0
    v = pr_auc(rng.random(n), y)
    assert 0.0 < v <= 1.0


# ----------------------------------------------------------------- gains

def test_relative_gain_examples():
    assert relative_gain(0.5, 0.5) == 0.0
    assert relative_gain(0.3, 0.4) == pytest.approx(-25.0, abs=1e-12)


def test_relative_gain_headline_shape():
    # the production headline gain pairing: 0.8268 over 0.5003
    assert relative_gain(0.8268, 0.5003) == pytest.approx(65.27, abs=0.01)


def test_relative_gain_zero_base():
    with pytest.raises(UndefinedMetricError):
        relative_gain(0.5, 0.0)


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_relative_gain_sign(a, b):
    g = relative_gain(a, b)
    assert (g > 0) == (a > b) and (g < 0) == (a < b)


def test_gain_table_shape_and_identical_models():
    pr = {m: {d: {t: 0.1 + 0.01 * t + 0.001 * d for t in range(3)} for d in (7, 8, 9)}
          for m in ("baseline", "baseline-upsampled", "mtl")}
    rows = gain_table(pr)
    assert len(rows) == 3 * 3 * 2 + 3 * 2
    assert all(r["gain"] == 0.0 for r in rows)


def test_csv_round_trip():
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": "x"}, {"a": 2, "b": None, "c": "y"}]
    assert csv_to_rows(rows_to_csv(rows, ("a", "b", "c"))) == rows


# ------------------------------------------------------------ histograms

def test_histogram_constant():
    h = score_histogram(np.full(7, 0.5), n_bins=10)
    assert h.normalized_counts.max() == 1.0
    assert np.count_nonzero(h.normalized_counts) == 1


def test_histogram_bin_centers_equal_mass():
    centers = (np.arange(20) + 0.5) / 20
    h = score_histogram(np.repeat(centers, 3), n_bins=20)
    np.testing.assert_allclose(h.normalized_counts, 1 / 20, atol=1e-15)


def test_histogram_edges_and_right_closed():
    h = score_histogram([0.0, 1.0, 1.0, 0.5], n_bins=4)
    np.testing.assert_array_equal(h.bin_edges, [0.0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(h.normalized_counts, [0.25, 0.0, 0.25, 0.5])


def test_histogram_errors():
    with pytest.raises(ValueError):
        score_histogram([], 10)
    with pytest.raises(ValueError):
        score_histogram([0.5], 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.integers(2, 50))
def test_histogram_mass_sums_to_one(xs, bins):
    h = score_histogram(xs, bins)
    assert abs(h.normalized_counts.sum() - 1.0) <= 1e-12
    assert np.all(h.normalized_counts >= 0)


# ------------------------------------------------------------ case study

def test_pick_titles_comparable_pair():
    counts = {1: 100, 2: 40, 3: 38, 4: 10, 5: 9}
    kinds = {1: "global", 2: "local", 3: "global", 4: "local", 5: "global"}
    loc, glb = pick_titles(counts, kinds, territory=0)
    assert (loc.title_id, glb.title_id) == (2, 3)
    assert abs(loc.positives - glb.positives) < 0.25 * max(loc.positives, glb.positives)


def test_pick_titles_none_raises():
    with pytest.raises(ValueError, match="comparable"):
        pick_titles({1: 100, 2: 10}, {1: "global", 2: "local"}, territory=0)


def _identical_report():
    rng = np.random.default_rng(0)
    picks = [TitlePick(0, 1, "local", 5), TitlePick(0, 2, "global", 5)]
    users = np.arange(50)
    table = rng.random((50, 3))

    def scorer(u, t):
        return table[np.asarray(u), t]

    labelled = {t: (users, (rng.random(50) < 0.3).astype(int)) for t in (1, 2)}
    return case_study({"baseline": scorer, "baseline-upsampled": scorer, "mtl": scorer}, picks,
                      {1: users, 2: users}, labelled, n_bins=10)


def test_case_study_identical_models():
    rep = _identical_report()
    for row in rep.title_rows():
        assert row["gain_mtl_vs_baseline"] == 0.0
        assert row["delta_mean_mtl_vs_baseline"] == 0.0
    for t in (1, 2):
        np.testing.assert_array_equal(rep.histograms[(t, "mtl")].normalized_counts,
                                      rep.histograms[(t, "baseline")].normalized_counts)


def test_case_study_csv_round_trip():
    rep = _identical_report()
    titles_csv, hist_csv = rep.to_csv()
    assert csv_to_rows(titles_csv) == rep.title_rows()
    back = csv_to_rows(hist_csv)
    assert back == rep.histogram_rows()
    for t in (1, 2):
        for m in rep.models:
            mass = sum(r["mass"] for r in back if r["title_id"] == t and r["model"] == m)
            assert abs(mass - 1.0) <= 1e-12
    assert isinstance(rep, CaseStudyReport)


def test_histogram_svg_is_wellformed():
    import xml.etree.ElementTree as ET

    svg = histogram_svg(score_histogram(np.linspace(0, 1, 30), 10), "title 3 / mtl")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len([e for e in root if e.tag.endswith("rect")]) == 10
