"""Evaluation: frame accuracy, DTW-aligned RMSE and MCD, macro F1, edit-distance rates, confusion."""
from __future__ import annotations

import csv
import math
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .losses import dtw
from .phoneme import PhonemeInventory, collapse, default_inventory

MCD_CONST = 10.0 / math.log(10.0)


def _labels(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


def phoneme_accuracy(pred_frames, gt_frames) -> float:
    """Percent of frames whose label matches."""
    p, g = _labels(pred_frames), _labels(gt_frames)
    if p.size != g.size:
        raise ValueError(f"{p.size} predicted frames vs {g.size} ground-truth frames; align first")
    if g.size == 0:
        raise ValueError("no frames to score")
    return 100.0 * float((p == g).sum()) / g.size


def dtw_path(pred_mfcc, gt_mfcc) -> list[tuple[int, int]]:
    """Plain Euclidean DTW path (no phoneme term)."""
    pred, gt = np.atleast_2d(np.asarray(pred_mfcc, float)), np.atleast_2d(np.asarray(gt_mfcc, float))
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("DTW needs non-empty sequences")
    return dtw(cdist(pred, gt))[1]


def rmse_after_dtw(pred_mfcc, gt_mfcc, path: Sequence[tuple[int, int]] | None = None) -> float:
    """RMSE over every coefficient of every frame pair on the DTW path."""
    pred, gt = np.atleast_2d(np.asarray(pred_mfcc, float)), np.atleast_2d(np.asarray(gt_mfcc, float))
    path = dtw_path(pred, gt) if path is None else path
    i, j = np.asarray(path).T
    return float(np.sqrt(np.mean((pred[i] - gt[j]) ** 2)))


def mcd(pred_mfcc, gt_mfcc, path: Sequence[tuple[int, int]] | None = None) -> float:
    """Mel-cepstral distortion in dB over DTW-aligned pairs, coefficient 0 excluded."""
    pred, gt = np.atleast_2d(np.asarray(pred_mfcc, float)), np.atleast_2d(np.asarray(gt_mfcc, float))
    path = dtw_path(pred, gt) if path is None else path
    i, j = np.asarray(path).T
    diff = pred[i, 1:] - gt[j, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * (diff ** 2).sum(axis=1))))


def macro_f1(pred_frames, gt_frames, n_classes: int | None = None) -> float:
    """Unweighted mean per-class F1; classes absent from both sequences are skipped."""
    p, g = _labels(pred_frames), _labels(gt_frames)
    if p.size != g.size:
        raise ValueError(f"{p.size} predicted frames vs {g.size} ground-truth frames")
    classes = np.union1d(p, g) if n_classes is None else [c for c in range(n_classes) if (p == c).any() or (g == c).any()]
    scores = []
    for c in classes:
        tp = float(((p == c) & (g == c)).sum())
        fp = float(((p == c) & (g != c)).sum())
        fn = float(((p != c) & (g == c)).sum())
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return " ".join(_PUNCT.sub("", text.lower()).split())


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def error_rate(pred_symbols: Sequence, gt_symbols: Sequence) -> float:
    """Unit-cost edit distance divided by the reference length."""
    if len(gt_symbols) == 0:
        raise ValueError("empty reference sequence")
    return levenshtein(list(pred_symbols), list(gt_symbols)) / len(gt_symbols)


def cer(pred_text: str, gt_text: str) -> float:
    return error_rate(normalize_text(pred_text), normalize_text(gt_text))


@dataclass
class Confusion:
    counts: np.ndarray  # GT rows, predicted columns
    within_group_fraction: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return 100.0 * float(np.trace(self.counts)) / self.total


def confusion_matrix(pred_frames, gt_frames, inventory: PhonemeInventory | None = None) -> Confusion:
    inv = inventory or default_inventory()
    p, g = _labels(pred_frames), _labels(gt_frames)
    if p.size != g.size:
        raise ValueError(f"{p.size} predicted frames vs {g.size} ground-truth frames")
    counts = np.zeros((inv.M, inv.M), dtype=np.int64)
    np.add.at(counts, (g, p), 1)
    grp = np.asarray(inv.group_index_array())
    same = grp[:, None] == grp[None, :]
    total = counts.sum()
    frac = float(counts[same].sum()) / total if total else float("nan")
    return Confusion(counts, frac)


def phoneme_mean_features(features, gt_frames, n_classes: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean feature vector (NaN rows for absent classes) and the presence mask."""
    x = np.asarray(features, dtype=np.float64)
    g = _labels(gt_frames)
    if x.shape[0] != g.size:
        raise ValueError(f"{x.shape[0]} feature frames vs {g.size} labels")
    sums = np.zeros((n_classes, x.shape[1]))
    np.add.at(sums, g, x)
    counts = np.bincount(g, minlength=n_classes)
    present = counts > 0
    means = np.full_like(sums, np.nan)
    means[present] = sums[present] / counts[present, None]
    return means, present


def write_mean_features(path: str | Path, means: np.ndarray, present: np.ndarray,
                        inventory: PhonemeInventory | None = None) -> None:
    inv = inventory or default_inventory()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phoneme", "present"] + [f"f{k}" for k in range(means.shape[1])])
        for k in range(means.shape[0]):
            vals = [f"{v:.9g}" for v in means[k]] if present[k] else [""] * means.shape[1]
            w.writerow([inv.symbol(k), int(present[k])] + vals)


# -- per-sentence evaluation ----------------------------------------------------------

def gt_frame_predictions(pred_labels, pred_mfcc, gt_mfcc, path=None) -> np.ndarray:
    """For each ground-truth frame, the label of its closest predicted frame on the DTW path."""
    pred_mfcc, gt_mfcc = np.asarray(pred_mfcc, float), np.asarray(gt_mfcc, float)
    path = dtw_path(pred_mfcc, gt_mfcc) if path is None else path
    best = np.full(gt_mfcc.shape[0], -1)
    bestd = np.full(gt_mfcc.shape[0], np.inf)
    for i, j in path:
        d = float(np.sum((pred_mfcc[i] - gt_mfcc[j]) ** 2))
        if d < bestd[j]:
            best[j], bestd[j] = i, d
    return _labels(pred_labels)[best]


def pred_frame_gt_labels(pred_mfcc, gt_mfcc, gt_labels, path=None) -> np.ndarray:
    """For each predicted frame, the ground-truth label of its closest cell on the DTW path."""
    pred_mfcc, gt_mfcc = np.asarray(pred_mfcc, float), np.asarray(gt_mfcc, float)
    path = dtw_path(pred_mfcc, gt_mfcc) if path is None else path
    best = np.full(pred_mfcc.shape[0], -1)
    bestd = np.full(pred_mfcc.shape[0], np.inf)
    for i, j in path:
        d = float(np.sum((pred_mfcc[i] - gt_mfcc[j]) ** 2))
        if d < bestd[i]:
            best[i], bestd[i] = j, d
    return _labels(gt_labels)[best]


@dataclass
class SentenceScore:
    sentence_id: str
    accuracy: float
    rmse: float
    mcd: float
    f1: float
    per: float


@dataclass
class MetricReport:
    per_sentence: list[SentenceScore]
    confusion: Confusion
    aggregate: dict[str, float] = field(default_factory=dict)


def evaluate(sentence_ids: Sequence[str], preds: Sequence[tuple[np.ndarray, np.ndarray]],
             targets: Sequence[tuple[np.ndarray, np.ndarray]], aligned: bool = True,
             inventory: PhonemeInventory | None = None) -> MetricReport:
    """Score (mfcc, log-probabilities) predictions against (mfcc, frame label) targets.

    ``aligned`` means prediction and target share a time base (overt); otherwise
    predicted labels are mapped to ground-truth frames along the MFCC DTW path.
    """
    inv = inventory or default_inventory()
    rows, all_p, all_g = [], [], []
    for sid, (pm, plp), (gm, gl) in zip(sentence_ids, preds, targets, strict=True):
        gl = _labels(gl)
        labels = np.asarray(plp).argmax(axis=1)
        path = dtw_path(pm, gm)
        if aligned:
            n = min(len(labels), len(gl))
            p, g = labels[:n], gl[:n]
        else:
            p, g = gt_frame_predictions(labels, pm, gm, path), gl
        per = error_rate(collapse(labels.tolist()), collapse(gl.tolist()))
        rows.append(SentenceScore(sid, phoneme_accuracy(p, g), rmse_after_dtw(pm, gm, path), mcd(pm, gm, path),
                                  macro_f1(p, g), per))
        all_p.append(p)
        all_g.append(g)
    conf = confusion_matrix(np.concatenate(all_p), np.concatenate(all_g), inv) if rows else \
        Confusion(np.zeros((inv.M, inv.M), np.int64), float("nan"))
    agg = {k: float(np.mean([getattr(r, k) for r in rows])) if rows else float("nan")
           for k in ("accuracy", "rmse", "mcd", "f1", "per")}
    agg["within_group_fraction"] = conf.within_group_fraction
    return MetricReport(rows, conf, agg)


def write_report(path: str | Path, report: MetricReport) -> None:
    cols = ["sentence_id", "accuracy", "rmse", "mcd", "f1", "per"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.per_sentence:
            w.writerow([r.sentence_id] + [f"{getattr(r, c):.6f}" for c in cols[1:]])
        w.writerow(["mean"] + [f"{report.aggregate[c]:.6f}" for c in cols[1:]])


def write_confusion(path: str | Path, conf: Confusion, inventory: PhonemeInventory | None = None) -> None:
    inv = inventory or default_inventory()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gt\\pred"] + list(inv.labels))
        for k in range(inv.M):
            w.writerow([inv.symbol(k)] + [int(c) for c in conf.counts[k]])
        w.writerow(["within_group_fraction", f"{conf.within_group_fraction:.6f}"])


def render_confusion_svg(path: str | Path, conf: Confusion, inventory: PhonemeInventory | None = None) -> None:
    """Row-normalised heat map with the phoneme-group blocks outlined."""
    from .plotting import plt, save_svg

    inv = inventory or default_inventory()
    rows = conf.counts.sum(axis=1, keepdims=True)
    norm = np.divide(conf.counts, rows, out=np.zeros(conf.counts.shape), where=rows > 0)
    fig, ax = plt.subplots(figsize=(9, 8))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(inv.M), inv.labels, rotation=90, fontsize=6)
    ax.set_yticks(range(inv.M), inv.labels, fontsize=6)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    grp = inv.group_index_array()
    start = 0
    for k in range(1, inv.M + 1):
        if k == inv.M or grp[k] != grp[start]:
            ax.add_patch(plt.Rectangle((start - 0.5, start - 0.5), k - start, k - start,
                                       fill=False, edgecolor="red", linewidth=1.2))
            start = k
    fig.colorbar(im, ax=ax, fraction=0.046)
    save_svg(fig, path)
