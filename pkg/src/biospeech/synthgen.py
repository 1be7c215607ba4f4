"""Synthetic corpus with planted per-phoneme spatial signatures and pseudo-MFCC targets.

Every phoneme owns a fixed random pattern over the channels; the clean
biosignal is that pattern held constant over each segment (silence is zero),
optionally band-limited, plus white noise at a chosen SNR. Targets are
per-phoneme 80-dim templates with a little jitter, so both the label and the
feature of every frame are known exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorad as ad
from .features import (ANALYSIS_RATE, FRAME_PERIOD_MS, AudioClip, MfccFrames, extract_mfcc, n_frames_for,
                       read_mfcc, write_mfcc)
from .phoneme import (AlignedTranscript, PhonemeInventory, default_inventory, frame_labels, read_alignment,
                      read_manifest, write_alignment, write_manifest)
from .signalproc import (BANDS, EEG, EMG, RawRecording, band_spec, design_fir, fir_apply, preprocess, read_raw,
                         write_raw)
from .trainer import Trial, trials_from_epochs

SYNTH_MODES = ("overt", "whispered", "imagined")


@dataclass(frozen=True)
class SynthConfig:
    n_sentences: int = 20
    min_phonemes: int = 4
    max_phonemes: int = 8
    n_eeg: int = 127
    n_emg: int = 10
    sample_rate_hz: int = 1000
    segment_ms_min: int = 40
    segment_ms_max: int = 200
    gap_ms: int = 500
    snr_db: float = 10.0
    seed: int = 0
    band_center_hz: float | None = None
    mode: str = "overt"
    stretch_min: float = 0.75
    stretch_max: float = 1.25
    template_jitter: float = 0.1
    audio_backed: bool = False

    def __post_init__(self):
        if not math.isfinite(self.snr_db) and self.snr_db != math.inf:
            raise ValueError("snr_db must be finite or +inf")
        if self.n_sentences < 0:
            raise ValueError("n_sentences must be >= 0")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise ValueError("need 1 <= min_phonemes <= max_phonemes")
        if not 8 <= self.segment_ms_min <= self.segment_ms_max:
            raise ValueError("need 8 <= segment_ms_min <= segment_ms_max")
        if self.sample_rate_hz != 1000:
            raise ValueError("the generator works on a 1 ms sample grid (sample_rate_hz=1000)")
        if self.mode not in SYNTH_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.stretch_min <= self.stretch_max:
            raise ValueError("bad stretch range")
        if self.gap_ms < 200:
            raise ValueError("gap_ms must cover the 200 ms baseline window")
        if self.band_center_hz is not None:
            band_of(self.band_center_hz)

    @property
    def n_channels(self) -> int:
        return self.n_eeg + self.n_emg

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        kinds = {f.name: str(f.type) for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if k not in kinds:
                raise ValueError(f"unknown synth config key {k!r}")
            kind = kinds[k]
            if v == "None":
                kw[k] = None
            elif kind.startswith("int"):
                kw[k] = int(v)
            elif kind.startswith("float"):
                kw[k] = float(v)
            elif kind.startswith("bool"):
                kw[k] = v in ("True", "true", "1")
            else:
                kw[k] = v
        return cls(**kw)


def band_of(freq_hz: float) -> str:
    """Name of the frequency band containing ``freq_hz`` (lower edge inclusive)."""
    for name, (lo, hi) in BANDS.items():
        if lo <= freq_hz < hi:
            return name
    raise ValueError(f"{freq_hz} Hz lies outside every named band")


@dataclass
class SynthDataset:
    config: SynthConfig | None
    recording: RawRecording
    transcripts: list[AlignedTranscript]  # target (overt) timing
    bio_transcripts: list[AlignedTranscript]  # timing of the biosignal
    mfcc: list[np.ndarray]
    signatures: np.ndarray | None  # M x C, silence row zero
    templates: np.ndarray | None  # M x 80
    clean: np.ndarray | None = None  # noiseless signature signal, frames x channels

    @property
    def sentence_ids(self) -> list[str]:
        return [t.sentence_id for t in self.transcripts]

    def target_labels(self, i: int, inventory: PhonemeInventory | None = None) -> np.ndarray:
        return np.asarray(frame_labels(self.transcripts[i], FRAME_PERIOD_MS, self.mfcc[i].shape[0], inventory))


def _rngs(seed: int, n: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def make_signatures(inventory: PhonemeInventory, n_channels: int, rng) -> np.ndarray:
    sig = rng.standard_normal((inventory.M, n_channels))
    sig /= np.sqrt((sig ** 2).mean(axis=1, keepdims=True))
    sig[inventory.sil_index] = 0.0
    return sig


def _sentence(rng, cfg: SynthConfig, inv: PhonemeInventory, sid: str):
    k = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
    speech = [i for i in range(inv.M) if i != inv.sil_index]
    tokens = [inv.sil_index] + [int(x) for x in rng.choice(speech, k)] + [inv.sil_index]
    durs = rng.integers(cfg.segment_ms_min, cfg.segment_ms_max + 1, len(tokens))
    if cfg.mode == "overt":
        bio = durs.copy()
    else:
        stretch = rng.uniform(cfg.stretch_min, cfg.stretch_max, len(tokens))
        bio = np.maximum(8, np.round(durs * stretch)).astype(int)
    text = " ".join(inv.symbol(t) for t in tokens[1:-1])

    def transcript(d):
        ends = np.cumsum(d)
        starts = ends - d
        return AlignedTranscript(sid, text, [(inv.symbol(t), float(a), float(b))
                                             for t, a, b in zip(tokens, starts, ends)])
    return tokens, transcript(durs), transcript(bio)


def _tone_audio(tr: AlignedTranscript, inv: PhonemeInventory, rng) -> AudioClip:
    """One sine per phoneme (silence is faint noise) at the analysis rate."""
    per_ms = ANALYSIS_RATE // 1000
    out = np.zeros(int(tr.duration_ms) * per_ms)
    for sym, a, b in tr.segments:
        i0, i1 = int(a) * per_ms, int(b) * per_ms
        t = np.arange(i1 - i0) / ANALYSIS_RATE
        idx = inv.index(sym)
        if idx == inv.sil_index:
            out[i0:i1] = 1e-3 * rng.standard_normal(i1 - i0)
        else:
            out[i0:i1] = 0.5 * np.sin(2 * np.pi * (150.0 + 90.0 * idx) * t)
    return AudioClip(out, ANALYSIS_RATE)


def generate(config: SynthConfig, inventory: PhonemeInventory | None = None, keep_clean: bool = False) -> SynthDataset:
    """Build the corpus; deterministic per ``config.seed``."""
    inv = inventory or default_inventory()
    cfg = config
    r_sig, r_tpl, r_noise, r_sent = _rngs(cfg.seed, 4)
    C = cfg.n_channels
    signatures = make_signatures(inv, C, r_sig)
    templates = r_tpl.standard_normal((inv.M, 80))
    roles = [EEG] * cfg.n_eeg + [EMG] * cfg.n_emg
    sent_rngs = _rngs(int(r_sent.integers(2**63)), max(cfg.n_sentences, 1))

    transcripts, bio_transcripts, mfccs, markers = [], [], [], []
    pos = cfg.gap_ms
    pieces = []  # (start sample, length, phoneme index)
    for i in range(cfg.n_sentences):
        rng = sent_rngs[i]
        sid = f"S{i + 1:04d}"
        tokens, tr, bio = _sentence(rng, cfg, inv, sid)
        n = int(bio.duration_ms)
        markers.append((pos, pos + n, sid))
        for sym, a, b in bio.segments:
            pieces.append((pos + int(a), int(b - a), inv.index(sym)))
        pos += n + cfg.gap_ms
        if cfg.audio_backed:
            mf = extract_mfcc(_tone_audio(tr, inv, rng)).frames
        else:
            T = n_frames_for(tr.duration_ms)
            labels = frame_labels(tr, FRAME_PERIOD_MS, T, inv)
            mf = templates[labels] + cfg.template_jitter * rng.standard_normal((T, 80))
        transcripts.append(tr)
        bio_transcripts.append(bio)
        mfccs.append(mf.astype(np.float32).astype(np.float64))  # same values as the on-disk float32

    clean = np.zeros((pos, C))
    emg = np.asarray(roles) == EMG
    for start, length, idx in pieces:
        clean[start:start + length] = signatures[idx]
    if cfg.mode == "imagined":
        clean[:, emg] = 0.0
    if cfg.band_center_hz is not None and pos:
        h = design_fir(band_spec(band_of(cfg.band_center_hz)), cfg.sample_rate_hz)
        clean = fir_apply(clean, h)

    if math.isinf(cfg.snr_db) or not pieces:
        noisy = clean.copy()
    else:
        active = np.zeros(pos, bool)
        for start, length, idx in pieces:
            if idx != inv.sil_index:
                active[start:start + length] = True
        carrying = ~emg if cfg.mode == "imagined" else np.ones(C, bool)
        p_sig = float((clean[active][:, carrying] ** 2).mean()) if active.any() else 1.0
        sigma = math.sqrt(p_sig / 10 ** (cfg.snr_db / 10))
        noisy = clean + sigma * r_noise.standard_normal(clean.shape)
    rec = RawRecording(noisy.astype(np.float32).astype(np.float64), cfg.sample_rate_hz, roles, markers)
    return SynthDataset(cfg, rec, transcripts, bio_transcripts, mfccs, signatures, templates,
                        clean if keep_clean else None)


def dataset_trials(ds: SynthDataset, band: str | None = None, modality: str = "eeg+emg",
                   ids: list[str] | None = None, inventory: PhonemeInventory | None = None) -> list[Trial]:
    """Run the preprocessing chain (optionally band-isolated) and pair epochs with targets."""
    epochs = preprocess(ds.recording, band=band)
    labels = [ds.target_labels(i, inventory) for i in range(len(ds.transcripts))]
    trials = trials_from_epochs(epochs, ds.mfcc, labels, modality)
    if ids is None:
        return trials
    by_id = {t.sentence_id: t for t in trials}
    missing = [s for s in ids if s not in by_id]
    if missing:
        raise KeyError(f"sentence ids not in dataset: {missing[:5]}")
    return [by_id[s] for s in ids]


# -- oracle ------------------------------------------------------------------------

def oracle_decode(epoch_samples: np.ndarray, signatures: np.ndarray, n_frames: int | None = None,
                  frame_samples: int = 8) -> np.ndarray:
    """Nearest-signature label of the sample at each frame centre."""
    x = np.asarray(epoch_samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != signatures.shape[1]:
        raise ValueError(f"epoch has shape {x.shape}; signatures expect {signatures.shape[1]} channels")
    n = x.shape[0] // frame_samples if n_frames is None else n_frames
    centres = np.minimum(np.arange(n) * frame_samples + frame_samples // 2, x.shape[0] - 1)
    v = x[centres]
    d = (v ** 2).sum(1)[:, None] - 2 * v @ signatures.T + (signatures ** 2).sum(1)[None, :]
    return np.argmin(d, axis=1)


def oracle_accuracy(ds: SynthDataset, signatures: np.ndarray | None = None,
                    inventory: PhonemeInventory | None = None) -> float:
    """Frame accuracy (%) of the matched-filter oracle against the biosignal-timed labels."""
    inv = inventory or default_inventory()
    sig = ds.signatures if signatures is None else signatures
    if sig is None:
        raise ValueError("dataset carries no signatures")
    hit = total = 0
    for (onset, offset, _), bio in zip(ds.recording.trial_markers, ds.bio_transcripts):
        x = ds.recording.samples[onset:offset]
        n = x.shape[0] // 8
        labels = np.asarray(frame_labels(bio, FRAME_PERIOD_MS, n, inv))
        pred = oracle_decode(x, sig, n)
        hit += int((pred == labels).sum())
        total += n
    return 100.0 * hit / total if total else float("nan")


# -- files -------------------------------------------------------------------------

def write_dataset(ds: SynthDataset, out_dir: str | Path, test_ids: list[str] | None = None) -> None:
    """Write recording, alignments, MFCC targets, manifest, signatures and config under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("alignments", "bio_alignments", "mfcc"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_raw(out / "recording", ds.recording)
    rows = []
    for i, (tr, bio, mf) in enumerate(zip(ds.transcripts, ds.bio_transcripts, ds.mfcc)):
        sid = tr.sentence_id
        write_alignment(out / "alignments" / f"{sid}.txt", tr)
        write_alignment(out / "bio_alignments" / f"{sid}.txt", bio)
        write_mfcc(out / "mfcc" / sid, MfccFrames(mf))
        rows.append({"sentence_id": sid, "text": tr.text, "alignment": f"alignments/{sid}.txt",
                     "mfcc": f"mfcc/{sid}", "biosignal": "recording", "marker_index": i})
    write_manifest(out / "manifest.tsv", rows)
    if ds.signatures is not None:
        ad.save_checkpoint(out / "signatures.bin", {"signatures": ds.signatures, "templates": ds.templates})
    if ds.config is not None:
        (out / "synth_config.txt").write_text(ds.config.to_text(), encoding="utf-8")
    if test_ids is not None:
        write_split(out / "split.txt", [s for s in ds.sentence_ids if s not in set(test_ids)], test_ids)


def write_split(path: str | Path, train_ids: list[str], test_ids: list[str]) -> None:
    lines = [f"train {s}" for s in train_ids] + [f"test {s}" for s in test_ids]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_split(path: str | Path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    out: dict[str, list[str]] = {"train": [], "test": []}
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in out:
            raise ValueError(f"{path}:{lineno}: expected 'train|test sentence_id'")
        out[parts[0]].append(parts[1])
    overlap = set(out["train"]) & set(out["test"])
    if overlap:
        raise ValueError(f"{path}: sentences in both splits: {sorted(overlap)[:5]}")
    return out


def load_dataset(data_dir: str | Path) -> SynthDataset:
    """Read a corpus directory; signatures and generator config are optional (absent for real data)."""
    d = Path(data_dir)
    for name in ("manifest.tsv", "recording.hdr", "recording.f32"):
        if not (d / name).exists():
            raise FileNotFoundError(str(d / name))
    cfg_path = d / "synth_config.txt"
    cfg = SynthConfig.from_text(cfg_path.read_text("utf-8")) if cfg_path.exists() else None
    rec = read_raw(d / "recording")
    rows = read_manifest(d / "manifest.tsv")
    trs, bios, mfccs = [], [], []
    for r in rows:
        sid = r["sentence_id"]
        for rel in (r["alignment"], r["mfcc"] + ".f32"):
            if not (d / rel).exists():
                raise FileNotFoundError(str(d / rel))
        trs.append(read_alignment(d / r["alignment"], sid, r["text"]))
        bio_path = d / "bio_alignments" / f"{sid}.txt"
        bios.append(read_alignment(bio_path, sid, r["text"]) if bio_path.exists() else trs[-1])
        mfccs.append(read_mfcc(d / r["mfcc"]).frames)
    order = [r["marker_index"] for r in rows]
    if order != list(range(len(rows))) or len(rec.trial_markers) != len(rows):
        raise ValueError(f"{d}: manifest rows must list trial markers 0..{len(rec.trial_markers) - 1} in order")
    sig_path = d / "signatures.bin"
    sig, tpl = (None, None)
    if sig_path.exists():
        blob = ad.load_checkpoint(sig_path)
        sig, tpl = blob["signatures"].astype(np.float64), blob["templates"].astype(np.float64)
    return SynthDataset(cfg, rec, trs, bios, mfccs, sig, tpl)
