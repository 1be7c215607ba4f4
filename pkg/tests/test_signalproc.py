import numpy as np
import pytest

from biospeech.signalproc import (
    BANDS,
    EEG,
    EMG,
    Epoch,
    FilterSpec,
    InvalidFilterSpec,
    RawRecording,
    apply_filter,
    band_isolate,
    common_average_reference,
    design_fir,
    epoch_and_baseline,
    notch_harmonics,
    preprocess,
    read_epoch,
    read_raw,
    write_epoch,
    write_raw,
)
from oracles import fft_gain_db

FS = 1000


def sine(freq, seconds=8.0, amp=1.0):
    t = np.arange(int(seconds * FS)) / FS
    return amp * np.sin(2 * np.pi * freq * t)


def run(x, spec):
    rec = RawRecording(x[:, None], FS, [EEG])
    return apply_filter(rec, spec).samples[:, 0]


def test_notch_removes_line_frequency():
    x = sine(60.0)
    y = run(x, FilterSpec("notch_comb", notch_base_hz=60.0))
    core = slice(x.size // 4, 3 * x.size // 4)
    assert np.sqrt(np.mean(y[core] ** 2)) <= 0.01 * np.sqrt(np.mean(x[core] ** 2))


def test_notch_harmonics_stop_below_nyquist():
    assert notch_harmonics(FilterSpec("notch_comb"), FS) == [60.0, 120.0, 180.0]
    assert notch_harmonics(FilterSpec("notch_comb", max_harmonic_hz=None), FS)[-1] == 480.0


def test_highpass_kills_dc():
    x = np.full(6000, 3.0)
    h = design_fir(FilterSpec("high_pass", low_hz=2.0), FS)
    y = run(x, FilterSpec("high_pass", low_hz=2.0))
    edge = h.size
    assert np.max(np.abs(y[edge:-edge])) < 1e-3 * 3.0


def test_broadband_passes_10hz():
    x = sine(10.0)
    y = run(x, FilterSpec("band_pass", low_hz=0.5, high_hz=200.0))
    assert abs(fft_gain_db(x, y, 10.0, FS)) < 1.0


@pytest.mark.parametrize("band,freq,passes", [
    ("delta", 2.0, True),
    ("delta", 20.0, False),
    ("high_gamma", 100.0, True),
    ("theta", 6.0, True),
    ("beta", 20.0, True),
])
def test_band_isolate(band, freq, passes):
    x = sine(freq, seconds=16.0)
    ep = Epoch(x[:, None], "s", FS, [EEG])
    y = band_isolate(ep, band).samples[:, 0]
    assert y.size == x.size
    gain = fft_gain_db(x, y, freq, FS)
    if passes:
        assert abs(gain) < 1.0
    else:
        assert gain <= -40.0


def test_band_isolate_leaves_other_roles_alone():
    x = np.column_stack([sine(20.0), sine(20.0)])
    ep = Epoch(x, "s", FS, [EEG, EMG])
    y = band_isolate(ep, "delta").samples
    np.testing.assert_array_equal(y[:, 1], x[:, 1])


def test_filters_are_zero_phase():
    # a symmetric impulse stays centred
    x = np.zeros(4001)
    x[2000] = 1.0
    y = run(x, FilterSpec("band_pass", low_hz=8.0, high_hz=12.0))
    assert np.argmax(np.abs(y)) == 2000
    np.testing.assert_allclose(y[2000 - 500:2000], y[2001:2001 + 500][::-1], atol=1e-12)


def test_invalid_specs():
    with pytest.raises(InvalidFilterSpec, match="Nyquist"):
        design_fir(FilterSpec("band_pass", low_hz=10, high_hz=600), FS)
    with pytest.raises(InvalidFilterSpec):
        design_fir(FilterSpec("band_pass", low_hz=20, high_hz=10), FS)
    with pytest.raises(InvalidFilterSpec):
        design_fir(FilterSpec("notch_comb", notch_base_hz=500), FS)
    with pytest.raises(InvalidFilterSpec):
        design_fir(FilterSpec("lowpass", low_hz=5), FS)
    with pytest.raises(ValueError, match="unknown band"):
        band_isolate(Epoch(np.zeros((10, 1)), "s", FS, [EEG]), "kappa")
    assert set(BANDS) == {"delta", "theta", "alpha", "beta", "gamma", "high_gamma"}


def test_car_examples(rng):
    ep = Epoch(np.array([[1.0, 3.0]]), "s", FS, [EEG, EEG])
    np.testing.assert_array_equal(common_average_reference(ep).samples, [[-1.0, 1.0]])
    zm = rng.normal(size=(50, 4))
    zm -= zm.mean(axis=1, keepdims=True)
    ep = Epoch(zm, "s", FS, [EEG] * 4)
    np.testing.assert_allclose(common_average_reference(ep).samples, zm, atol=1e-15)


def test_car_per_role(rng):
    x = rng.normal(size=(200, 137)) + 5.0
    roles = [EEG] * 127 + [EMG] * 10
    out = common_average_reference(Epoch(x, "s", FS, roles), per_role=True).samples
    assert np.max(np.abs(out[:, :127].mean(axis=1))) < 1e-9 * np.abs(x).max()
    assert np.max(np.abs(out[:, 127:].mean(axis=1))) < 1e-9 * np.abs(x).max()


def test_car_single_channel_group_raises():
    with pytest.raises(ValueError, match=">= 2 channels"):
        common_average_reference(Epoch(np.ones((5, 3)), "s", FS, [EEG, EEG, EMG]))


def test_epoch_and_baseline_examples():
    x = np.full((4000, 2), 5.0)
    x[1000:3000] = 7.0
    rec = RawRecording(x, FS, [EEG, EEG], [(1000, 3000, "s1")])
    ep = epoch_and_baseline(rec, 0, 200.0)
    assert ep.n_frames == 2000 and ep.sentence_id == "s1"
    np.testing.assert_array_equal(ep.samples, 2.0)
    # only samples 800..999 form the baseline
    x[:800] = 100.0
    ep = epoch_and_baseline(RawRecording(x, FS, [EEG, EEG], [(1000, 3000, "s1")]), 0)
    np.testing.assert_array_equal(ep.samples, 2.0)


def test_epoch_zero_baseline_is_raw_slice(rng):
    x = rng.normal(size=(1500, 3))
    x[800:1000] -= x[800:1000].mean(axis=0)
    ep = epoch_and_baseline(RawRecording(x, FS, [EEG] * 3, [(1000, 1400, "s")]), 0)
    np.testing.assert_allclose(ep.samples, x[1000:1400], atol=1e-12)


def test_epoch_shortfall_is_named():
    rec = RawRecording(np.zeros((500, 2)), FS, [EEG, EEG], [(150, 400, "s")])
    with pytest.raises(ValueError, match="short by 50"):
        epoch_and_baseline(rec, 0)
    with pytest.raises(IndexError):
        epoch_and_baseline(rec, 3)


def test_recording_validation():
    with pytest.raises(ValueError, match="role tags"):
        RawRecording(np.zeros((10, 2)), FS, [EEG])
    with pytest.raises(ValueError, match="outside"):
        RawRecording(np.zeros((10, 2)), FS, [EEG, EEG], [(5, 20, "s")])


def test_preprocess_chain_shapes(rng):
    x = rng.normal(size=(3000, 6))
    rec = RawRecording(x, FS, [EEG] * 4 + [EMG] * 2, [(500, 1300, "a"), (1800, 2600, "b")])
    eps = preprocess(rec, band="alpha")
    assert [e.sentence_id for e in eps] == ["a", "b"]
    assert all(e.samples.shape == (800, 6) for e in eps)


def test_raw_and_epoch_round_trip(tmp_path, rng):
    x = rng.normal(size=(300, 3)).astype(np.float32)
    rec = RawRecording(x, FS, [EEG, EEG, EMG], [(10, 100, "S0001"), (150, 250, "S0002")])
    write_raw(tmp_path / "rec", rec)
    back = read_raw(tmp_path / "rec")
    np.testing.assert_array_equal(back.samples, x)
    assert back.channel_roles == rec.channel_roles and back.trial_markers == rec.trial_markers
    ep = Epoch(x[:50].astype(np.float64), "S0001", FS, [EEG, EEG, EMG], 200.0)
    write_epoch(tmp_path / "ep", ep)
    e2 = read_epoch(tmp_path / "ep")
    np.testing.assert_array_equal(e2.samples, x[:50])
    assert e2.sentence_id == "S0001" and e2.baseline_window_ms == 200.0
    assert (tmp_path / "rec.f32").stat().st_size == 300 * 3 * 4
