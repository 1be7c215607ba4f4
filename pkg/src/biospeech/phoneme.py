"""Phoneme label space, transcriptions and frame-level alignments."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

SIL = "sil"
GROUP_ORDER = (
    "Vowels",
    "Diphthongs",
    "Stops",
    "Affricates",
    "Fricatives",
    "Nasals",
    "Liquids",
    "Semivowels",
    "Silence",
)


class UnknownPhonemeError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered class labels with their articulatory group."""

    labels: tuple[str, ...]
    group_of: dict[str, str] = field(hash=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate phoneme labels in inventory")
        missing = [p for p in self.labels if p not in self.group_of]
        if missing:
            raise ValueError(f"phonemes without a group: {missing}")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.labels)})

    @property
    def M(self) -> int:
        return len(self.labels)

    @property
    def sil_index(self) -> int:
        return self._index[SIL]

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownPhonemeError(f"unknown phoneme symbol {symbol!r}") from None

    def symbol(self, index: int) -> str:
        return self.labels[index]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUP_ORDER}
        for p in self.labels:
            out.setdefault(self.group_of[p], []).append(p)
        return {g: v for g, v in out.items() if v}

    def group_index_array(self) -> list[int]:
        """Group id per class index (position in GROUP_ORDER)."""
        order = {g: i for i, g in enumerate(GROUP_ORDER)}
        return [order[self.group_of[p]] for p in self.labels]


def load_inventory(path: str | Path | None = None) -> PhonemeInventory:
    """Read an inventory file of ``group phoneme`` lines (``#`` comments allowed)."""
    if path is None:
        text = resources.files("biospeech").joinpath("data/phonemes.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    labels, group_of = [], {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        group, symbol = line.split()
        labels.append(symbol)
        group_of[symbol] = group
    return PhonemeInventory(tuple(labels), group_of)


@lru_cache(maxsize=1)
def default_inventory() -> PhonemeInventory:
    return load_inventory()


def parse_transcription(line: str, inventory: PhonemeInventory | None = None) -> list[int]:
    """Parse ``/sil, d, ih, .../`` into class indices."""
    inv = inventory or default_inventory()
    body = line.strip()
    if body.startswith("/"):
        body = body[1:]
    if body.endswith("/"):
        body = body[:-1]
    symbols = [s.strip() for s in body.split(",") if s.strip()]
    return [inv.index(s) for s in symbols]


@dataclass
class AlignedTranscript:
    sentence_id: str
    text: str
    segments: list[tuple[str, float, float]]

    def validate(self, inventory: PhonemeInventory | None = None) -> None:
        inv = inventory or default_inventory()
        prev_end = None
        for sym, start, end in self.segments:
            inv.index(sym)
            if end <= start:
                raise ValueError(f"{self.sentence_id}: empty segment {sym} [{start}, {end})")
            if prev_end is not None and start < prev_end:
                raise ValueError(
                    f"{self.sentence_id}: overlapping segments at {start} ms (previous ends {prev_end} ms)"
                )
            prev_end = end

    @property
    def duration_ms(self) -> float:
        return self.segments[-1][2] if self.segments else 0.0

    def phonemes(self) -> list[str]:
        return [s for s, _, _ in self.segments]

    def frame_labels(self, frame_period_ms: float, n_frames: int, **kw) -> list[int]:
        return frame_labels(self, frame_period_ms, n_frames, **kw)


def frame_labels(
    transcript: AlignedTranscript,
    frame_period_ms: float,
    n_frames: int,
    inventory: PhonemeInventory | None = None,
    slack_ms: float | None = None,
) -> list[int]:
    """Label each frame with the segment containing its center time.

    A center that falls exactly on a boundary belongs to the later segment;
    frames past the last segment (and in gaps) are silence.
    """
    inv = inventory or default_inventory()
    transcript.validate(inv)
    slack = frame_period_ms if slack_ms is None else slack_ms
    if n_frames * frame_period_ms + slack < transcript.duration_ms:
        raise ValueError(
            f"{transcript.sentence_id}: {n_frames} frames of {frame_period_ms} ms cannot cover "
            f"{transcript.duration_ms} ms"
        )
    sil = inv.sil_index
    labels = [sil] * n_frames
    segs = transcript.segments
    k = 0
    for t in range(n_frames):
        center = (t + 0.5) * frame_period_ms
        while k < len(segs) and segs[k][2] <= center:
            k += 1
        if k < len(segs) and segs[k][1] <= center:
            labels[t] = inv.index(segs[k][0])
    return labels


def collapse(frame_seq: Sequence[int]) -> list[int]:
    """Merge consecutive duplicates."""
    out: list[int] = []
    for x in frame_seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def read_alignment(path: str | Path, sentence_id: str | None = None, text: str = "") -> AlignedTranscript:
    """Read ``phoneme start_ms end_ms`` lines."""
    path = Path(path)
    segments = []
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'phoneme start_ms end_ms'")
        segments.append((parts[0], float(parts[1]), float(parts[2])))
    tr = AlignedTranscript(sentence_id or path.stem, text, segments)
    tr.validate()
    return tr


def _fmt_ms(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_alignment(path: str | Path, transcript: AlignedTranscript) -> None:
    lines = [f"{s} {_fmt_ms(a)} {_fmt_ms(b)}" for s, a, b in transcript.segments]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


MANIFEST_FIELDS = ("sentence_id", "text", "alignment", "mfcc", "biosignal", "marker_index")


def write_manifest(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: rec.get(k, "") for k in MANIFEST_FIELDS})


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["marker_index"] = int(r["marker_index"]) if r.get("marker_index") not in (None, "") else None
    return rows
