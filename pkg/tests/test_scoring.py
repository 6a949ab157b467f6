import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpnet import scoring as S
from cpnet.models import UNetConfig, build_cpnet, variant_config
from cpnet.synth import FrameSequence

import oracles


def to_pm1(x01):
    return 2 * np.asarray(x01, dtype=np.float64) - 1


# -- psnr -------------------------------------------------------------------


def test_psnr_zero_error_is_capped():
    x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8))
    assert S.psnr(x, x) == 300.0
    assert S.psnr(x, x, "literal") == 300.0


def test_psnr_uniform_error_twenty_db():
    gt = np.full((3, 8, 8), 0.4)
    assert S.psnr(to_pm1(gt + 0.1), to_pm1(gt)) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("err,level", [(0.1, 0.4), (0.03, 0.7), (0.2, 0.1)])
def test_mode_difference_identity(err, level):
    gt = np.full((3, 6, 5), level)
    pred = gt + err
    n = gt.size
    peak_pred = pred.max()
    diff = S.psnr(to_pm1(pred), to_pm1(gt)) - S.psnr(to_pm1(pred), to_pm1(gt), "literal")
    # standard - literal = 10 log10(N) + 20 log10(peak) - 10 log10(max(pred)), with peak = 1
    want = 10 * math.log10(n) + 20 * math.log10(1.0) - 10 * math.log10(peak_pred)
    assert diff == pytest.approx(want, abs=1e-9)


def test_psnr_strictly_decreasing_in_mse():
    gt = np.zeros((3, 4, 4))
    values = [S.psnr(to_pm1(gt + e), to_pm1(gt)) for e in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_and_mode_errors():
    with pytest.raises(ValueError):
        S.psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        S.psnr(np.zeros(3), np.ones(3), "bogus")


# -- normalisation and decisions --------------------------------------------


def test_normalize_examples():
    np.testing.assert_array_equal(S.normalize_scores([30, 40, 50]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(S.normalize_scores([37, 37]), [0.5, 0.5])
    np.testing.assert_array_equal(S.normalize_scores([12.0]), [0.5])
    with pytest.raises(ValueError):
        S.normalize_scores([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=30), st.floats(0.01, 100), st.floats(-50, 50))
def test_normalize_affine_invariant(p, a, b):
    p = np.array(p)
    np.testing.assert_allclose(S.normalize_scores(a * p + b), S.normalize_scores(p), atol=1e-6)


def test_decide_examples():
    assert S.decide(0.2, S.DecisionConfig(0.5)) == 1
    assert S.decide(0.9, S.DecisionConfig(0.5)) == 0
    assert S.decide(0.5, S.DecisionConfig(0.5)) == 0
    hi = S.DecisionConfig(0.5, "high-score-abnormal")
    assert S.decide(0.9, hi) == 1 and S.decide(0.5, hi) == 0


def test_decision_config_validation():
    with pytest.raises(ValueError):
        S.DecisionConfig(gamma=1.5)
    with pytest.raises(ValueError):
        S.DecisionConfig(polarity="sideways")


# -- ROC / AUC ---------------------------------------------------------------


def test_auc_examples():
    assert S.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert S.roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]).auc == 0.5


def test_auc_random_twenty_points():
    rng = np.random.default_rng(20)
    s = rng.random(20)
    y = np.r_[np.ones(8, int), np.zeros(12, int)]
    rng.shuffle(y)
    assert abs(S.roc_auc(s, y).auc - float(oracles.auc_pairs(s, y))) <= 1e-12


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pair_counting_with_ties(pairs):
    scores = [s / 4 for s, _ in pairs]  # coarse grid forces many ties
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(ValueError):
            S.roc_auc(scores, labels)
        return
    got = S.roc_auc(scores, labels).auc
    assert abs(got - float(oracles.auc_pairs(scores, labels))) <= 1e-12


def test_roc_curve_shape():
    r = S.roc_auc([0.9, 0.5, 0.5, 0.1], [1, 0, 1, 0])
    assert math.isinf(r.thresholds[0]) and r.fpr[0] == 0 and r.tpr[0] == 0
    assert r.fpr[-1] == 1 and r.tpr[-1] == 1
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert r.auc == float(Fraction(7, 8))


def test_auc_input_errors():
    with pytest.raises(ValueError):
        S.roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        S.roc_auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        S.roc_auc([0.1, 0.2], [1])


# -- margins ----------------------------------------------------------------


def series(psnr, labels, vid="v"):
    psnr = np.asarray(psnr, float)
    return S.ScoreSeries(vid, np.arange(len(psnr)), psnr, S.normalize_scores(psnr), np.asarray(labels))


def test_margin_positive_when_abnormal_lower():
    rep = S.margin_report([series([30, 31, 20, 21, 32], [0, 0, 1, 1, 0])])
    assert rep.psnr_margin > 0 and rep.score_margin > 0
    assert rep.psnr_normal == pytest.approx(31.0) and rep.psnr_abnormal == pytest.approx(20.5)


def test_margin_needs_both_classes():
    with pytest.raises(ValueError):
        S.margin_report([series([1, 2], [0, 0])])


# -- end to end on a model --------------------------------------------------


def test_evaluate_and_csv(tmp_path):
    cfg = UNetConfig(depth=2, height=16, width=16)
    model = build_cpnet(variant_config("cpnet037", cfg, True))
    rng = np.random.default_rng(1)
    videos = []
    for i, n in enumerate((9, 11)):
        labels = np.zeros(n, np.int8)
        labels[6:8] = 1
        videos.append((f"test_{i:02d}", FrameSequence(rng.uniform(-1, 1, (n, 3, 16, 16)), labels)))
    res = S.evaluate(model, videos)
    assert [s.video_id for s in res.series] == ["test_00", "test_01"]
    assert [len(s.psnr) for s in res.series] == [5, 7]
    assert 0 <= res.auc <= 1
    S.write_scores_csv(res.series, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 1 + 5 + 7
    assert lines[0] == "video_id,frame_index,psnr_db,score,label,decision"
    S.write_roc_csv(res.roc, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1].startswith("inf,0,0")
