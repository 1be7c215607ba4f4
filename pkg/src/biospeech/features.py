"""80-dimensional MFCC targets at an 8 ms frame period."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import signal

from .phoneme import AlignedTranscript, PhonemeInventory, frame_labels

ANALYSIS_RATE = 16000
HOP = 128  # 8 ms at 16 kHz
WIN = 512  # 32 ms
N_FFT = 1024  # 512-sample window zero-padded; resolves the narrow low mel filters
N_MELS = 80
N_MFCC = 80
PREEMPH = 0.97
LOG_FLOOR = 1e-10
FRAME_PERIOD_MS = 8.0
DURATION_TOLERANCE_MS = 50.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("empty audio clip")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio clip contains non-finite samples")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * self.samples.size / self.sample_rate_hz


@dataclass
class MfccFrames:
    frames: np.ndarray  # T x 80
    frame_period_ms: float = FRAME_PERIOD_MS

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmax: float = ANALYSIS_RATE / 2) -> np.ndarray:
    """Peak frequency of each triangular filter."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = ANALYSIS_RATE) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1) on the mel scale, 0 Hz to Nyquist, peak 1."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for k in range(n_mels):
        lo, c, hi = edges[k], edges[k + 1], edges[k + 2]
        rise = (bins - lo) / (c - lo)
        fall = (hi - bins) / (hi - c)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
    fb.setflags(write=False)
    return fb


def resample_to(clip: AudioClip, rate: int = ANALYSIS_RATE) -> np.ndarray:
    if clip.sample_rate_hz == rate:
        return clip.samples
    g = math.gcd(int(clip.sample_rate_hz), rate)
    return signal.resample_poly(clip.samples, rate // g, int(clip.sample_rate_hz) // g)


def n_frames_for(duration_ms: float) -> int:
    return int(math.ceil(round(duration_ms / FRAME_PERIOD_MS, 9)))


def power_frames(x: np.ndarray, n_frames: int) -> np.ndarray:
    """Pre-emphasised Hann-windowed power spectra; frame t is centred on sample t*HOP + HOP/2."""
    y = np.append(x[:1], x[1:] - PREEMPH * x[:-1])
    pad_left = WIN // 2 - HOP // 2
    need = (n_frames - 1) * HOP + WIN
    padded = np.zeros(max(need, pad_left + y.size))
    padded[pad_left:pad_left + y.size] = y
    idx = np.arange(n_frames)[:, None] * HOP + np.arange(WIN)[None, :]
    frames = padded[idx] * signal.get_window("hann", WIN, fftbins=True)
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2


def extract_mfcc(clip: AudioClip) -> MfccFrames:
    """Log mel energies (80 filters) in an orthonormal DCT-II basis, 8 ms hop."""
    x = resample_to(clip)
    if x.size < WIN:
        raise ValueError(
            f"clip of {clip.duration_ms:.1f} ms is shorter than one {1000 * WIN / ANALYSIS_RATE:.0f} ms window"
        )
    n = n_frames_for(clip.duration_ms)
    mel = power_frames(x, n) @ mel_filterbank().T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    coeffs = sfft.dct(logmel, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return MfccFrames(coeffs)


def build_training_target(
    clip: AudioClip, transcript: AlignedTranscript, inventory: PhonemeInventory | None = None
) -> tuple[MfccFrames, list[int]]:
    """MFCC frames plus equal-length frame labels; trailing frames past the alignment are silence."""
    gap = transcript.duration_ms - clip.duration_ms
    if abs(gap) > DURATION_TOLERANCE_MS:
        raise ValueError(
            f"{transcript.sentence_id}: alignment {transcript.duration_ms} ms vs audio "
            f"{clip.duration_ms:.1f} ms exceeds {DURATION_TOLERANCE_MS} ms tolerance"
        )
    mf = extract_mfcc(clip)
    labels = frame_labels(
        transcript, FRAME_PERIOD_MS, mf.n_frames, inventory, slack_ms=DURATION_TOLERANCE_MS
    )
    return mf, labels


# -- file formats -------------------------------------------------------------

def read_pcm16(path: str | Path, sample_rate_hz: int | None = None) -> AudioClip:
    """Read a mono 16-bit PCM WAV, or header-less LE int16 when ``sample_rate_hz`` is given."""
    path = Path(path)
    with open(path, "rb") as fh:
        is_riff = fh.read(4) == b"RIFF"
    if is_riff:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2 or w.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    else:
        if sample_rate_hz is None:
            raise ValueError(f"{path}: raw PCM needs an explicit sample rate")
        rate, raw = sample_rate_hz, path.read_bytes()
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(data, rate)


def write_pcm16(path: str | Path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate_hz))
        w.writeframes(pcm.tobytes())


def write_mfcc(stem: str | Path, mf: MfccFrames) -> None:
    """``<stem>.f32`` LE float32 T x 80 plus a one-line ``<stem>.txt`` sidecar."""
    stem = Path(stem)
    np.ascontiguousarray(mf.frames, dtype="<f4").tofile(stem.with_suffix(".f32"))
    stem.with_suffix(".txt").write_text(
        f"frames={mf.n_frames} period_ms={mf.frame_period_ms:g} dim={mf.frames.shape[1]}\n", encoding="utf-8"
    )


def read_mfcc(stem: str | Path) -> MfccFrames:
    stem = Path(stem)
    meta = dict(kv.split("=") for kv in stem.with_suffix(".txt").read_text("utf-8").split())
    dim = int(meta.get("dim", N_MFCC))
    frames = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").reshape(-1, dim).astype(np.float64)
    if frames.shape[0] != int(meta["frames"]):
        raise ValueError(f"{stem}: sidecar says {meta['frames']} frames, payload has {frames.shape[0]}")
    return MfccFrames(frames, float(meta["period_ms"]))
