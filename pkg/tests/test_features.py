import numpy as np
import pytest
from scipy import fft as sfft

from biospeech.features import (
    ANALYSIS_RATE,
    N_MFCC,
    AudioClip,
    MfccFrames,
    build_training_target,
    extract_mfcc,
    hz_to_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    n_frames_for,
    power_frames,
    read_mfcc,
    read_pcm16,
    write_mfcc,
    write_pcm16,
)
from biospeech.phoneme import AlignedTranscript, default_inventory

INV = default_inventory()


def tone(freq, seconds, sr=ANALYSIS_RATE, amp=0.3):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def test_one_second_gives_125_frames():
    mf = extract_mfcc(tone(440.0, 1.0))
    assert mf.frames.shape == (125, N_MFCC)
    assert mf.frame_period_ms == 8.0
    assert n_frames_for(1000.0) == 125
    assert n_frames_for(1001.0) == 126


def test_silence_is_constant():
    mf = extract_mfcc(AudioClip(np.zeros(ANALYSIS_RATE // 2), ANALYSIS_RATE))
    assert np.all(np.isfinite(mf.frames))
    assert np.all(mf.frames == mf.frames[0])


@pytest.mark.parametrize("k", [5, 20, 40, 60, 75])
def test_tone_at_filter_centre_peaks_in_that_filter(k):
    f = mel_center_frequencies()[k]
    clip = tone(f, 0.5)
    spec = power_frames(clip.samples, 40)
    resp = spec[20] @ mel_filterbank().T
    assert int(np.argmax(resp)) == k


def test_mel_scale_round_trip():
    f = np.array([0.0, 100.0, 1000.0, 7999.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.5)


def test_filterbank_shape_and_nonnegative():
    fb = mel_filterbank()
    assert fb.shape[0] == 80
    assert np.all(fb >= 0) and np.all(fb.sum(axis=1) > 0)


def test_other_rates_are_resampled():
    a = extract_mfcc(tone(500.0, 1.0, sr=ANALYSIS_RATE))
    b = extract_mfcc(tone(500.0, 1.0, sr=44100))
    assert a.n_frames == b.n_frames
    # the strongest mel band (inverse orthonormal DCT) agrees frame by frame
    peak = lambda mf: np.argmax(sfft.idct(mf.frames, type=2, norm="ortho", axis=1), axis=1)
    np.testing.assert_array_equal(peak(a)[5:-5], peak(b)[5:-5])


def test_too_short_clip_raises():
    with pytest.raises(ValueError, match="shorter than one"):
        extract_mfcc(AudioClip(np.ones(100), ANALYSIS_RATE))
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]), ANALYSIS_RATE)


def test_training_target_lengths():
    tr = AlignedTranscript("s", "", [("sil", 0, 500), ("aa", 500, 1500), ("sil", 1500, 2000)])
    mf, labels = build_training_target(tone(300.0, 2.0), tr, INV)
    assert mf.n_frames == 250 and len(labels) == 250


def test_training_target_short_transcript_pads_sil():
    tr = AlignedTranscript("s", "", [("aa", 0, 960)])
    mf, labels = build_training_target(tone(300.0, 1.0), tr, INV)
    assert len(labels) == mf.n_frames == 125
    assert labels[-5:] == [INV.sil_index] * 5
    assert labels[0] == INV.index("aa")


def test_training_target_long_transcript_raises():
    tr = AlignedTranscript("s", "", [("aa", 0, 1100)])
    with pytest.raises(ValueError, match="tolerance"):
        build_training_target(tone(300.0, 1.0), tr, INV)


def test_mfcc_file_round_trip(tmp_path, rng):
    mf = MfccFrames(rng.normal(size=(17, 80)).astype(np.float32).astype(np.float64))
    write_mfcc(tmp_path / "x", mf)
    back = read_mfcc(tmp_path / "x")
    np.testing.assert_array_equal(back.frames, mf.frames)
    assert (tmp_path / "x.txt").read_text() == "frames=17 period_ms=8 dim=80\n"


def test_pcm_round_trip(tmp_path):
    clip = tone(440.0, 0.1)
    write_pcm16(tmp_path / "a.wav", clip)
    back = read_pcm16(tmp_path / "a.wav")
    assert back.sample_rate_hz == ANALYSIS_RATE
    np.testing.assert_allclose(back.samples, clip.samples, atol=2 / 32768)
    raw = (np.round(clip.samples * 32767)).astype("<i2")
    raw.tofile(tmp_path / "a.pcm")
    np.testing.assert_allclose(read_pcm16(tmp_path / "a.pcm", ANALYSIS_RATE).samples, clip.samples, atol=2 / 32768)
    with pytest.raises(ValueError, match="sample rate"):
        read_pcm16(tmp_path / "a.pcm")
