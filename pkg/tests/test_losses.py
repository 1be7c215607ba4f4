import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import biospeech.tensorad as ad
from biospeech.losses import (
    InfeasibleCTC,
    LossConfig,
    TrialPrediction,
    TrialTarget,
    audio_loss,
    combine_overt,
    combine_silent,
    ctc_loss,
    ctc_targets,
    dtw,
    dtw_cost_matrix,
    dtw_loss,
    overt_loss,
    phoneme_ce,
    silent_loss,
)
from biospeech.phoneme import default_inventory
from biospeech.tensorad import Tensor
from oracles import ctc_brute, dtw_brute

INV = default_inventory()
SIL = INV.sil_index


def T64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_audio_loss_examples():
    y = np.zeros((1, 80))
    assert audio_loss(T64(y), y).item() == 0.0
    yh = y.copy()
    yh[0, 3], yh[0, 10] = 3.0, 4.0
    assert audio_loss(T64(yh), y).item() == pytest.approx(5.0)
    two = np.zeros((2, 80))
    two[0, 0], two[1, 0] = 1.0, 3.0
    assert audio_loss(T64(two), np.zeros((2, 80))).item() == pytest.approx(2.0)
    with pytest.raises(ValueError, match="mismatch"):
        audio_loss(T64(two), np.zeros((3, 80)))


def test_phoneme_ce_examples():
    lp = np.full((3, 40), -np.inf)
    lp[:, 5] = 0.0
    lp = np.maximum(lp, -1e30)
    assert phoneme_ce(T64(lp), [5, 5, 5]).item() == pytest.approx(0.0)
    one = np.log(np.full((1, 40), 0.5 / 39))
    one[0, 2] = math.log(0.5)
    assert phoneme_ce(T64(one), [2]).item() == pytest.approx(math.log(2), abs=1e-12)
    uni = np.log(np.full((4, 40), 1 / 40))
    assert phoneme_ce(T64(uni), [0, 1, 2, 3]).item() == pytest.approx(math.log(40), abs=1e-12)
    with pytest.raises(ValueError, match="outside"):
        phoneme_ce(T64(uni), [0, 1, 2, 40])


def test_ctc_examples():
    lp = np.log([[0.7, 0.3]])
    assert ctc_loss(T64(lp), [0], blank=1).item() == pytest.approx(-math.log(0.7))
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc_loss(T64(lp), [0], blank=1).item() == pytest.approx(-math.log(0.75))


def test_ctc_infeasible():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(InfeasibleCTC):
        ctc_loss(T64(lp), [0, 1, 0], blank=2)
    # a repeated label needs a blank between the two copies
    with pytest.raises(InfeasibleCTC):
        ctc_loss(T64(lp), [0, 0], blank=2)
    with pytest.raises(ValueError, match="blank"):
        ctc_loss(T64(lp), [2], blank=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.data())
def test_ctc_property_vs_brute(T, K, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    blank = K - 1
    n = data.draw(st.integers(0, min(3, T)))
    labels = data.draw(st.lists(st.integers(0, K - 2), min_size=n, max_size=n))
    lp = rng.normal(size=(T, K))
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    ref = ctc_brute(lp, labels, blank)
    if not np.isfinite(ref):
        with pytest.raises(InfeasibleCTC):
            ctc_loss(T64(lp), labels, blank)
        return
    assert ctc_loss(T64(lp), labels, blank).item() == pytest.approx(ref, abs=1e-9)


def test_ctc_gradient(rng):
    def fn(x):
        return ctc_loss(ad.log_softmax(x), [0, 1, 1], blank=3)
    assert ad.gradcheck(fn, [rng.normal(size=(6, 4))], h=1e-6) < 1e-5


def test_ctc_targets_policies():
    frames = [SIL, SIL, 3, 3, SIL, 3, 7, SIL]
    assert ctc_targets(frames, "reuse_sil") == ([3, 3, 7], SIL)
    assert ctc_targets(frames, "extra_blank") == ([SIL, 3, SIL, 3, 7, SIL], 40)


def test_dtw_toy_path():
    pred = np.array([[0.0], [1.0]])
    gt = np.array([[0.0], [1.0], [1.0]])
    total, path = dtw(np.abs(pred - gt.T))
    assert total == 0.0
    assert path == [(0, 0), (1, 1), (1, 2)]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.data())
def test_dtw_property_vs_brute(n, m, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    cost = rng.integers(0, 10, size=(n, m)).astype(float)
    total, path = dtw(cost)
    assert total == dtw_brute(cost)
    assert sum(cost[i, j] for i, j in path) == total
    assert path[0] == (0, 0) and path[-1] == (n - 1, m - 1)
    for (a, b), (c, d) in zip(path, path[1:]):
        assert (c - a, d - b) in ((1, 0), (0, 1), (1, 1))


def test_dtw_loss_identical_is_zero(rng):
    y = rng.normal(size=(6, 80))
    lp = np.log(np.full((6, 40), 1 / 40))
    loss, al = dtw_loss(T64(y), T64(lp), y, [0] * 6, beta=0.0)
    assert loss.item() == 0.0
    assert al.path == [(i, i) for i in range(6)]


def test_dtw_single_cell_cost():
    pred = np.zeros((1, 80))
    gt = np.zeros((1, 80))
    gt[0, 0] = 2.0
    lp = np.log(np.full((1, 40), 0.5 / 39))
    lp[0, 4] = math.log(0.5)
    loss, _ = dtw_loss(T64(pred), T64(lp), gt, [4], beta=0.5)
    assert loss.item() == pytest.approx(2.0 + 0.5 * math.log(2), abs=1e-12)


def test_dtw_loss_gradient(rng):
    gt = rng.normal(size=(5, 4))
    labels = rng.integers(0, 6, size=5)

    def fn(m, z):
        loss, _ = dtw_loss(m, ad.log_softmax(z), gt, labels, beta=0.5)
        return loss
    assert ad.gradcheck(fn, [rng.normal(size=(4, 4)), rng.normal(size=(4, 6))], h=1e-6) < 1e-4


def test_beta_monotone(rng):
    m = rng.normal(size=(7, 8))
    gt = rng.normal(size=(9, 8))
    lp = np.log(rng.dirichlet(np.ones(40), size=7))
    labels = rng.integers(0, 40, size=9)
    vals = [dtw_loss(T64(m), T64(lp), gt, labels, beta=b)[0].item() for b in (0.0, 0.25, 0.5, 1.0, 2.0)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    d, nlp, c = dtw_cost_matrix(m, lp, gt, labels, 0.5)
    assert np.all(nlp >= 0) and np.allclose(c, d + 0.5 * nlp)


def test_combine_arithmetic():
    assert combine_overt(2.0, 1.0, 0.5, 0.5) == 2.5
    assert combine_overt(7.0, 1.0, 0.5, 0.0) == 1.5
    assert combine_silent(4.0, 1.0, 0.5) == 3.0


def _pred(mfcc, lp):
    return TrialPrediction(T64(mfcc), T64(lp), T64(lp))


def test_overt_perfect_equals_ctc_floor():
    labels = np.array([SIL, SIL, 3, 3, 3, SIL])
    mfcc = np.arange(6 * 80, dtype=float).reshape(6, 80) / 100
    lp = np.full((6, 40), math.log(1e-12))
    lp[np.arange(6), labels] = 0.0
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    total, parts = overt_loss([_pred(mfcc, lp)], [TrialTarget(mfcc, labels)], LossConfig(alpha=0.5))
    assert parts["audio"] == 0.0 and parts["phoneme"] < 1e-9
    assert parts["ctc"] >= 0.0
    assert total.item() == pytest.approx(parts["ctc"] + parts["phoneme"], abs=1e-12)


def test_overt_and_silent_compose_terms(rng):
    labels = np.array([SIL, 3, 3, 7, SIL, SIL])
    mfcc = rng.normal(size=(6, 80))
    lp = np.log(rng.dirichlet(np.ones(40), size=6))
    pred = rng.normal(size=(6, 80))
    cfg = LossConfig(alpha=0.3, beta=0.5)
    total, parts = overt_loss([_pred(pred, lp)], [TrialTarget(mfcc, labels)], cfg)
    assert total.item() == pytest.approx(0.3 * parts["audio"] + parts["phoneme"] + parts["ctc"])
    total, parts = silent_loss([_pred(pred, lp)], [TrialTarget(mfcc, labels)], cfg)
    assert total.item() == pytest.approx(0.3 * parts["dtw"] + parts["ctc"])
    with pytest.raises(ValueError, match="empty"):
        silent_loss([], [], cfg)


def test_silent_identical_is_ctc_only(rng):
    labels = np.array([SIL, 3, 3, 7, SIL, SIL])
    mfcc = rng.normal(size=(6, 80))
    lp = np.log(rng.dirichlet(np.ones(40), size=6))
    total, parts = silent_loss([_pred(mfcc, lp)], [TrialTarget(mfcc, labels)], LossConfig(beta=0.0))
    assert parts["dtw"] == 0.0
    assert total.item() == pytest.approx(parts["ctc"])


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(ctc_blank_policy="none")
