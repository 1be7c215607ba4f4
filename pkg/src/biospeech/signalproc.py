"""Biosignal preprocessing: FIR filtering, common average reference, epoching.

All filters are odd-length linear-phase FIR (Hamming windowed sinc) applied
as a centred convolution, i.e. zero phase with no group delay. Samples are
stored frames x channels throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

EEG = "EEG"
EMG = "EMG"

BANDS: dict[str, tuple[float, float]] = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "beta": (12.0, 30.0),
    "gamma": (30.0, 70.0),
    "high_gamma": (70.0, 200.0),
}

# Hamming main-lobe transition width is ~3.3 * fs / taps.
_HAMMING_TW = 3.3


class InvalidFilterSpec(ValueError):
    pass


@dataclass
class RawRecording:
    samples: np.ndarray
    sample_rate_hz: int
    channel_roles: list[str]
    trial_markers: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be frames x channels, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.shape[1] != len(self.channel_roles):
            raise ValueError(
                f"{self.samples.shape[1]} channels but {len(self.channel_roles)} role tags"
            )
        n = self.samples.shape[0]
        for onset, offset, sid in self.trial_markers:
            if not 0 <= onset < offset <= n:
                raise ValueError(f"marker {sid} ({onset}, {offset}) outside 0..{n}")

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    def role_mask(self, role: str | None) -> np.ndarray:
        roles = np.asarray(self.channel_roles)
        return np.ones(len(roles), bool) if role is None else roles == role


@dataclass
class Epoch:
    samples: np.ndarray
    sentence_id: str
    sample_rate_hz: int
    channel_roles: list[str]
    baseline_window_ms: float = 200.0

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    def role_mask(self, role: str | None) -> np.ndarray:
        roles = np.asarray(self.channel_roles)
        return np.ones(len(roles), bool) if role is None else roles == role


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # band_pass | high_pass | notch_comb
    low_hz: float | None = None
    high_hz: float | None = None
    notch_base_hz: float = 60.0
    notch_halfwidth_hz: float = 3.0
    taps: int | None = None
    zero_phase: bool = True
    max_harmonic_hz: float | None = 200.0

    def validate(self, fs: float) -> None:
        nyq = fs / 2.0
        if self.kind == "band_pass":
            if self.low_hz is None or self.high_hz is None:
                raise InvalidFilterSpec("band_pass needs low_hz and high_hz")
            if not 0 < self.low_hz < self.high_hz < nyq:
                raise InvalidFilterSpec(
                    f"band_pass requires 0 < low < high < Nyquist ({nyq} Hz); "
                    f"got {self.low_hz}-{self.high_hz} Hz"
                )
        elif self.kind == "high_pass":
            if self.low_hz is None or not 0 < self.low_hz < nyq:
                raise InvalidFilterSpec(f"high_pass cutoff must be in (0, {nyq}) Hz, got {self.low_hz}")
        elif self.kind == "notch_comb":
            if not 0 < self.notch_base_hz + self.notch_halfwidth_hz < nyq:
                raise InvalidFilterSpec(f"notch base {self.notch_base_hz} Hz at/above Nyquist {nyq} Hz")
        else:
            raise InvalidFilterSpec(f"unknown filter kind {self.kind!r}")
        if self.taps is not None and (self.taps < 3 or self.taps % 2 == 0):
            raise InvalidFilterSpec("taps must be odd and >= 3")


def notch_harmonics(spec: FilterSpec, fs: float) -> list[float]:
    """Harmonics of the notch base strictly below Nyquist (and below max_harmonic_hz)."""
    nyq = fs / 2.0
    limit = nyq if spec.max_harmonic_hz is None else min(nyq, spec.max_harmonic_hz)
    out, k = [], 1
    while k * spec.notch_base_hz + spec.notch_halfwidth_hz < nyq and k * spec.notch_base_hz <= limit:
        out.append(k * spec.notch_base_hz)
        k += 1
    return out


def _odd_taps(fs: float, transition_hz: float) -> int:
    n = int(math.ceil(_HAMMING_TW * fs / transition_hz))
    return n + 1 if n % 2 == 0 else n


def default_transition_hz(low_hz: float | None, high_hz: float | None) -> float:
    """Transition width used when a spec does not pin ``taps``."""
    widths = [20.0]
    if low_hz is not None:
        widths.append(low_hz)
    if low_hz is not None and high_hz is not None:
        widths.append((high_hz - low_hz) / 2.0)
    return max(1.0, min(widths))


def design_fir(spec: FilterSpec, fs: float) -> np.ndarray:
    """Windowed-sinc (Hamming) taps for ``spec`` at sample rate ``fs``."""
    spec.validate(fs)
    if spec.kind == "notch_comb":
        taps = spec.taps or _odd_taps(fs, spec.notch_halfwidth_hz)
        edges = []
        for f in notch_harmonics(spec, fs):
            edges += [f - spec.notch_halfwidth_hz, f + spec.notch_halfwidth_hz]
        if not edges:
            h = np.zeros(taps)
            h[taps // 2] = 1.0
            return h
        return signal.firwin(taps, edges, window="hamming", pass_zero=True, fs=fs)

    taps = spec.taps or _odd_taps(fs, default_transition_hz(spec.low_hz, spec.high_hz))
    if spec.kind == "band_pass":
        h = signal.firwin(taps, [spec.low_hz, spec.high_hz], window="hamming", pass_zero=False, fs=fs)
    else:
        h = signal.firwin(taps, spec.low_hz, window="hamming", pass_zero=False, fs=fs)
    # Force an exact zero at DC: remove the residual tap sum with a window-shaped correction.
    w = signal.get_window("hamming", taps, fftbins=False)
    return h - h.sum() * w / w.sum()


def fir_apply(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Centred (delay-compensated) convolution along axis 0; output length = input length."""
    x = np.asarray(x, dtype=np.float64)
    y = signal.fftconvolve(x, h.reshape((-1,) + (1,) * (x.ndim - 1)), mode="same", axes=0)
    return y


def apply_filter(recording: RawRecording, spec: FilterSpec, channel_subset: str | None = None) -> RawRecording:
    """Filter the channels tagged ``channel_subset`` (all channels when None)."""
    mask = recording.role_mask(channel_subset)
    if not mask.any():
        raise ValueError(f"no channels with role {channel_subset!r}")
    h = design_fir(spec, recording.sample_rate_hz)
    out = np.array(recording.samples, dtype=np.float64, copy=True)
    out[:, mask] = fir_apply(out[:, mask], h)
    return replace(recording, samples=out, trial_markers=list(recording.trial_markers))


def _car(samples: np.ndarray, roles: Sequence[str], per_role: bool) -> np.ndarray:
    out = np.array(samples, dtype=np.float64, copy=True)
    roles = np.asarray(roles)
    groups = [roles == r for r in dict.fromkeys(roles)] if per_role else [np.ones(len(roles), bool)]
    for mask in groups:
        if mask.sum() < 2:
            name = roles[mask][0] if mask.any() else "?"
            raise ValueError(f"common average reference needs >= 2 channels in group {name}")
        out[:, mask] -= out[:, mask].mean(axis=1, keepdims=True)
    return out


def common_average_reference(data: Epoch | RawRecording, per_role: bool = True):
    """Subtract the cross-channel mean at every sample, per modality group."""
    return replace(data, samples=_car(data.samples, data.channel_roles, per_role))


def epoch_and_baseline(recording: RawRecording, marker_index: int, baseline_ms: float = 200.0) -> Epoch:
    """Cut one trial and subtract each channel's mean over the preceding baseline window."""
    try:
        onset, offset, sid = recording.trial_markers[marker_index]
    except IndexError:
        raise IndexError(f"no trial marker {marker_index} ({len(recording.trial_markers)} markers)") from None
    n_base = int(round(baseline_ms * recording.sample_rate_hz / 1000.0))
    if onset < n_base:
        raise ValueError(
            f"trial {sid}: baseline needs {n_base} samples before onset {onset}, "
            f"short by {n_base - onset}"
        )
    x = np.asarray(recording.samples, dtype=np.float64)
    trial = x[onset:offset]
    if n_base > 0:
        trial = trial - x[onset - n_base:onset].mean(axis=0, keepdims=True)
    else:
        trial = trial.copy()
    return Epoch(trial, sid, recording.sample_rate_hz, list(recording.channel_roles), baseline_ms)


def band_spec(band: str) -> FilterSpec:
    if band not in BANDS:
        raise ValueError(f"unknown band {band!r}; expected one of {sorted(BANDS)}")
    lo, hi = BANDS[band]
    return FilterSpec("band_pass", low_hz=lo, high_hz=hi)


def band_isolate(data: Epoch | RawRecording, band: str, role: str | None = EEG):
    """Zero-phase band-pass of the ``role`` channels to a named frequency band."""
    spec = band_spec(band)
    h = design_fir(spec, data.sample_rate_hz)
    mask = np.asarray(data.role_mask(role))
    if not mask.any():
        raise ValueError(f"no channels with role {role!r}")
    out = np.array(data.samples, dtype=np.float64, copy=True)
    out[:, mask] = fir_apply(out[:, mask], h)
    return replace(data, samples=out)


EEG_BAND = FilterSpec("band_pass", low_hz=0.5, high_hz=200.0)
EMG_HIGHPASS = FilterSpec("high_pass", low_hz=2.0)
LINE_NOTCH = FilterSpec("notch_comb", notch_base_hz=60.0)


def preprocess(recording: RawRecording, band: str | None = None, baseline_ms: float = 200.0) -> list[Epoch]:
    """Full chain: notch + per-modality filters, per-group CAR, optional band, epoch + baseline."""
    rec = recording
    roles = set(rec.channel_roles)
    if EEG in roles:
        rec = apply_filter(rec, EEG_BAND, EEG)
    if EMG in roles:
        rec = apply_filter(rec, EMG_HIGHPASS, EMG)
    rec = apply_filter(rec, LINE_NOTCH, None)
    rec = common_average_reference(rec, per_role=True)
    if band is not None and band != "full":
        rec = band_isolate(rec, band, EEG)
    return [epoch_and_baseline(rec, i, baseline_ms) for i in range(len(rec.trial_markers))]


# -- file formats -------------------------------------------------------------

def write_raw(stem: str | Path, recording: RawRecording) -> None:
    """Write ``<stem>.f32`` (LE float32, row-major frames x channels) and ``<stem>.hdr``."""
    stem = Path(stem)
    np.ascontiguousarray(recording.samples, dtype="<f4").tofile(stem.with_suffix(".f32"))
    lines = [
        f"sample_rate_hz {recording.sample_rate_hz}",
        f"channels {len(recording.channel_roles)}",
        f"frames {recording.n_frames}",
        "roles " + " ".join(recording.channel_roles),
        "markers",
    ]
    lines += [f"{a} {b} {sid}" for a, b, sid in recording.trial_markers]
    stem.with_suffix(".hdr").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_raw(stem: str | Path) -> RawRecording:
    stem = Path(stem)
    hdr = stem.with_suffix(".hdr")
    if not hdr.exists():
        raise FileNotFoundError(str(hdr))
    meta, markers, in_markers = {}, [], False
    for line in hdr.read_text("utf-8").splitlines():
        if not line.strip():
            continue
        if in_markers:
            a, b, sid = line.split()
            markers.append((int(a), int(b), sid))
        elif line.strip() == "markers":
            in_markers = True
        else:
            key, _, value = line.partition(" ")
            meta[key] = value.strip()
    n_ch = int(meta["channels"])
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    if data.size % n_ch:
        raise ValueError(f"{stem}.f32 size {data.size} is not a multiple of {n_ch} channels")
    return RawRecording(
        data.reshape(-1, n_ch).astype(np.float64),
        int(meta["sample_rate_hz"]),
        meta["roles"].split(),
        markers,
    )


def write_epoch(stem: str | Path, epoch: Epoch) -> None:
    stem = Path(stem)
    np.ascontiguousarray(epoch.samples, dtype="<f4").tofile(stem.with_suffix(".f32"))
    stem.with_suffix(".hdr").write_text(
        f"sentence_id {epoch.sentence_id}\nsample_rate_hz {epoch.sample_rate_hz}\n"
        f"channels {len(epoch.channel_roles)}\nframes {epoch.n_frames}\n"
        f"baseline_ms {epoch.baseline_window_ms:g}\nroles {' '.join(epoch.channel_roles)}\n",
        encoding="utf-8",
    )


def read_epoch(stem: str | Path) -> Epoch:
    stem = Path(stem)
    meta = dict(
        line.split(" ", 1) for line in stem.with_suffix(".hdr").read_text("utf-8").splitlines() if line.strip()
    )
    n_ch = int(meta["channels"])
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").reshape(-1, n_ch)
    return Epoch(
        data.astype(np.float64),
        meta["sentence_id"].strip(),
        int(meta["sample_rate_hz"]),
        meta["roles"].split(),
        float(meta["baseline_ms"]),
    )
