import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import biospeech.trainer as trainer
from biospeech.model import ModelConfig
from biospeech.synthgen import SynthConfig, dataset_trials, generate
from biospeech.tensorad import Tensor
from biospeech.trainer import (
    AdamState,
    EarlyStopping,
    Normalizer,
    TrainConfig,
    Trial,
    adamw_step,
    cosine_lr,
    fit,
    group_batches,
    make_batch,
    predict,
    read_log,
    split_train_val,
    truncate8,
    unbatch,
    write_log,
)


def test_make_batch_examples():
    x, lay = make_batch([np.ones((5000, 137), np.float32)], 2048)
    assert x.shape == (3, 137, 2048)
    assert (lay.B, lay.pad_len, lay.N_S) == (3, 1144, 5000)
    assert np.all(x[2, :, 5000 - 4096:] == 0) and np.all(x[2, :, :5000 - 4096] == 1)
    _, lay = make_batch([np.ones((2048, 4))], 2048)
    assert (lay.B, lay.pad_len) == (1, 0)
    _, lay = make_batch([np.ones((1, 4))], 2048)
    assert (lay.B, lay.pad_len) == (1, 2047)


def test_make_batch_preserves_sample_order(rng):
    a, b = rng.normal(size=(1500, 3)), rng.normal(size=(1000, 3))
    x, _ = make_batch([a, b], 1024)
    flat = x.transpose(0, 2, 1).reshape(-1, 3)
    np.testing.assert_allclose(flat[:2500], np.concatenate([a, b]).astype(np.float32))
    assert np.all(flat[2500:] == 0)


def test_unbatch_two_trials_one_row():
    x, lay = make_batch([np.ones((1024, 2)), np.ones((1024, 2))], 2048)
    assert lay.B == 1
    out = unbatch(np.zeros((1, 256, 5)), lay)
    assert [o.shape for o in out] == [(128, 5), (128, 5)]


def test_unbatch_pad_only_tail_row():
    _, lay = make_batch([np.ones((2048, 2))], 2048)
    assert lay.frame_counts() == [256]
    # layout with an explicitly empty extra row contributes nothing
    lay.B, lay.pad_len = 2, 2048
    out = unbatch(np.zeros((2, 256, 3)), lay)
    assert [o.shape[0] for o in out] == [256]


def test_unbatch_errors():
    _, lay = make_batch([np.ones((2048, 2))], 2048)
    with pytest.raises(ValueError, match="do not match"):
        unbatch(np.zeros((2, 256, 3)), lay)
    _, lay = make_batch([np.ones((1001, 2))], 2048)
    with pytest.raises(ValueError, match="multiples of 8"):
        unbatch(np.zeros((1, 256, 3)), lay)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 700), min_size=1, max_size=8), st.sampled_from([64, 256, 2048]))
def test_round_trip_property(lengths, l):
    trials = [np.full((8 * n, 1), float(i)) for i, n in enumerate(lengths)]
    x, lay = make_batch(trials, l)
    assert lay.B == max(1, math.ceil(8 * sum(lengths) / l))
    # identity network at 1/8 resolution: keep every 8th sample
    frames = x[:, :, ::8].transpose(0, 2, 1)
    out = unbatch(frames, lay)
    assert [o.shape[0] for o in out] == lengths
    for i, o in enumerate(out):
        assert np.all(o == i)


def test_unbatch_keeps_tensor_on_tape():
    _, lay = make_batch([np.ones((64, 2)), np.ones((64, 2))], 128)
    out = unbatch(Tensor(np.zeros((1, 16, 3))), lay)
    assert all(isinstance(o, Tensor) and o.shape == (8, 3) for o in out)


def test_group_batches_covers_all():
    lengths = [1000, 3000, 500, 4000, 200]
    groups = group_batches(lengths, 2048, 1, [4, 3, 2, 1, 0])
    assert sorted(i for g in groups for i in g) == list(range(5))
    assert groups[0] == [4, 3]


def test_truncate8():
    assert truncate8(np.zeros((1007, 2))).shape == (1000, 2)
    assert truncate8(np.zeros((1000, 2))).shape == (1000, 2)


def test_cosine_lr_examples():
    assert cosine_lr(0) == pytest.approx(1e-3)
    assert cosine_lr(100) == pytest.approx(5.05e-4)
    assert cosine_lr(200) == pytest.approx(1e-5)
    lrs = [cosine_lr(e) for e in range(201)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def _p(values):
    return {"w": Tensor(np.array(values, dtype=np.float32), True)}


def test_adamw_zero_grad_no_decay():
    p = _p([1.0, -2.0, 3.0])
    adamw_step(p, {"w": np.zeros(3)}, AdamState(), 1e-3, 0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0, 3.0])


def test_adamw_zero_grad_decay_only():
    p = _p([1.0, -2.0, 3.0])
    st_ = AdamState()
    adamw_step(p, {"w": np.zeros(3)}, st_, 1e-3, 1e-5)
    np.testing.assert_allclose(st_.master["w"], np.array([1.0, -2.0, 3.0]) * (1 - 1e-8), rtol=0, atol=1e-15)


def test_adamw_constant_gradient_descends():
    p = _p([0.0, 0.0])
    st_ = AdamState()
    for _ in range(50):
        adamw_step(p, {"w": np.array([2.0, -0.5])}, st_, 1e-2, 1e-5)
    assert p["w"].data[0] < 0 < p["w"].data[1]
    # bias-corrected Adam moves about lr per step regardless of gradient scale
    assert p["w"].data[0] == pytest.approx(-0.5, rel=0.01)


def test_adamw_rejects_nan():
    p = _p([1.0])
    with pytest.raises(FloatingPointError, match="w"):
        adamw_step(p, {"w": np.array([np.nan])}, AdamState(), 1e-3, 0.0)


def test_early_stopping_rule():
    es = EarlyStopping(10)
    stops = [es.update(e, float(e)) for e in range(1, 30)]
    assert stops.index(True) + 1 == 11
    es = EarlyStopping(2)
    assert [es.update(e, v) for e, v in enumerate([5, 4, 4, 3, 3.5, 3.2], 1)] == [False] * 5 + [True]
    assert es.best_epoch == 4


def test_split_train_val():
    tr, va = split_train_val(20, 0.1, 0)
    assert len(va) == 2 and sorted(tr + va) == list(range(20))
    assert split_train_val(20, 0.1, 0) == (tr, va)
    assert split_train_val(2, 0.1, 0)[1] != []
    with pytest.raises(ValueError, match="empty"):
        split_train_val(0, 0.1, 0)


def test_train_config_validation():
    assert TrainConfig(mode="imagined").loss_name == "silent"
    assert TrainConfig(mode="overt").loss_name == "overt"
    with pytest.raises(ValueError, match="mode"):
        TrainConfig(mode="sung")
    with pytest.raises(ValueError, match="modality"):
        TrainConfig(modality="emg")


def test_normalizer_round_trip(tmp_path, rng):
    t = Trial("a", rng.normal(3.0, 2.0, size=(400, 4)).astype(np.float32), np.zeros((50, 80)), np.zeros(50, int))
    n = Normalizer.fit([t])
    z = n.apply(t.signal)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-5)
    n.save(tmp_path / "n.bin")
    np.testing.assert_allclose(Normalizer.load(tmp_path / "n.bin").mean, n.mean.astype(np.float32))


# -- fit on a small generated corpus -------------------------------------------------

TINY = ModelConfig(in_channels=10, conv_channels=16, groups=4, gru_hidden=16)


@pytest.fixture(scope="module")
def tiny_trials():
    ds = generate(SynthConfig(n_sentences=6, n_eeg=8, n_emg=2, seed=3, min_phonemes=3, max_phonemes=4))
    return dataset_trials(ds)


def test_fit_stops_on_rising_validation_loss(tiny_trials, monkeypatch):
    calls = iter(range(1000))
    monkeypatch.setattr(trainer, "evaluate_loss", lambda *a, **k: 1.0 + next(calls))
    res = fit(tiny_trials, TINY, TrainConfig(max_epochs=50, early_stop_patience=10, val_fraction=0.2))
    assert res.stopped_epoch == 11 and res.best_epoch == 1
    assert len([r for r in res.log if r.split == "val"]) == 11


def test_fit_is_deterministic(tiny_trials, tmp_path):
    cfg = TrainConfig(max_epochs=3, val_fraction=0.2, seed=4)
    a, b = fit(tiny_trials, TINY, cfg), fit(tiny_trials, TINY, cfg)
    assert [(r.epoch, r.split, r.loss, r.lr) for r in a.log] == [(r.epoch, r.split, r.loss, r.lr) for r in b.log]
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    write_log(tmp_path / "log.csv", a.log)
    back = read_log(tmp_path / "log.csv")
    assert [(r.epoch, r.split) for r in back] == [(r.epoch, r.split) for r in a.log]
    assert back[0].loss == pytest.approx(a.log[0].loss, rel=1e-8)


def test_fit_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        fit([], TINY, TrainConfig())


def test_fit_silent_mode_and_predict(tiny_trials):
    res = fit(tiny_trials, TINY, TrainConfig(max_epochs=2, val_fraction=0.2, mode="whispered"))
    assert set(res.components[0]) == {"dtw", "ctc"}
    preds = predict(res.params, tiny_trials, TINY, res.normalizer)
    for t, (m, lp) in zip(tiny_trials, preds):
        assert m.shape == (t.n_frames, 80) and lp.shape == (t.n_frames, 40)


@pytest.mark.slow
def test_fit_overfits_overt_corpus():
    trials = dataset_trials(generate(SynthConfig(n_sentences=20, seed=7)))
    res = fit(trials, ModelConfig(conv_channels=64, gru_hidden=64), TrainConfig())
    train = [r.loss for r in res.log if r.split == "train"]
    assert res.stopped_epoch <= 200
    assert train[-1] < 0.1 * train[0]
