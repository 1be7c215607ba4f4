"""Sentence-property study (W score, length, PCC), Wilcoxon signed-rank, band ablation."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .metrics import evaluate
from .model import ModelConfig
from .phoneme import SIL, AlignedTranscript
from .trainer import TrainConfig, fit, predict

EXACT_MAX_N = 25


# -- W scores -------------------------------------------------------------------------

def w_scores(corpus: Sequence[AlignedTranscript] | Sequence[Sequence[str]]) -> tuple[dict[str, float], dict[str, float]]:
    """Per-phoneme token frequency over a training corpus, with and without silence."""
    seqs = [c.phonemes() if isinstance(c, AlignedTranscript) else list(c) for c in corpus]
    counts = Counter(tok for s in seqs for tok in s)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("empty corpus")
    with_sil = {k: v / total for k, v in sorted(counts.items())}
    speech = {k: v for k, v in counts.items() if k != SIL}
    n_speech = sum(speech.values())
    without = {k: v / n_speech for k, v in sorted(speech.items())} if n_speech else {}
    return with_sil, without


@dataclass
class SentenceProperties:
    sentence_id: str
    phoneme_seq_len: int
    w_score_with_sil: float
    w_score_without_sil: float


def sentence_properties(transcript: AlignedTranscript, with_sil: Mapping[str, float],
                        without_sil: Mapping[str, float]) -> SentenceProperties:
    """Sequence length and token-mean W scores; phonemes unseen in training count as 0."""
    toks = transcript.phonemes()
    speech = [t for t in toks if t != SIL]
    w1 = float(np.mean([with_sil.get(t, 0.0) for t in toks])) if toks else float("nan")
    w2 = float(np.mean([without_sil.get(t, 0.0) for t in speech])) if speech else float("nan")
    return SentenceProperties(transcript.sentence_id, len(toks), w1, w2)


# -- correlation ----------------------------------------------------------------------

def pearson(xs, ys) -> float:
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson undefined: zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# -- Wilcoxon signed-rank --------------------------------------------------------------

@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float  # two-sided
    w_plus: float
    w_minus: float
    n: int
    method: str  # exact | normal


def signed_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |a - b| over non-zero differences, and the difference signs."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    return stats.rankdata(np.abs(d)), np.sign(d)


def exact_null_cdf(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) when each rank is added with probability 1/2 (ties allowed)."""
    r2 = np.round(2 * np.asarray(ranks)).astype(np.int64)  # average ranks are half-integers
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:  # r >= 2 since every rank is >= 1
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    probs = counts / counts.sum()
    return float(probs[: int(math.floor(2 * w + 1e-9)) + 1].sum())


def wilcoxon_signed_rank(paired_a, paired_b) -> WilcoxonResult:
    """Two-sided signed-rank test; exact for n <= 25, tie-corrected normal otherwise."""
    ranks, signs = signed_ranks(paired_a, paired_b)
    n = ranks.size
    if n == 0:
        raise ValueError("all paired differences are zero")
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = min(1.0, 2.0 * exact_null_cdf(ranks, stat))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((t ** 3) - t).sum()) / 48.0
        z = (stat - mean) / math.sqrt(var)
        p = min(1.0, 2.0 * float(stats.norm.cdf(z)))
        method = "normal"
    return WilcoxonResult(stat, p, w_plus, w_minus, n, method)


# -- reports --------------------------------------------------------------------------

def property_correlation_report(accuracies: Mapping[str, float], props: Sequence[SentenceProperties],
                                out_dir: str | Path | None = None) -> dict[str, float]:
    """PCC of accuracy against length and both W scores; optional scatter CSV and SVG plots."""
    props = [p for p in props if p.sentence_id in accuracies]
    if len(props) < 2:
        raise ValueError("need at least 2 sentences")
    acc = [accuracies[p.sentence_id] for p in props]
    columns = {
        "length": [p.phoneme_seq_len for p in props],
        "w_with_sil": [p.w_score_with_sil for p in props],
        "w_without_sil": [p.w_score_without_sil for p in props],
    }
    pcc = {k: pearson(v, acc) for k, v in columns.items()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sentence_properties.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sentence_id", "accuracy", "length", "w_with_sil", "w_without_sil"])
            for p, a in zip(props, acc):
                w.writerow([p.sentence_id, f"{a:.6f}", p.phoneme_seq_len,
                            f"{p.w_score_with_sil:.6f}", f"{p.w_score_without_sil:.6f}"])
        with open(out / "pcc.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["property", "pcc"])
            for k, v in pcc.items():
                w.writerow([k, f"{v:.6f}"])
        for k, xs in columns.items():
            scatter_svg(out / f"scatter_{k}.svg", xs, acc, k, "phoneme accuracy (%)", pcc[k])
    return pcc


def scatter_svg(path: str | Path, xs, ys, xlabel: str, ylabel: str, r: float) -> None:
    from .plotting import plt, save_svg

    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(xs, ys, s=14)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(f"PCC = {r:.3f}")
    save_svg(fig, path)


def write_w_scores(path: str | Path, with_sil: Mapping[str, float], without_sil: Mapping[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phoneme", "w_with_sil", "w_without_sil"])
        for k in with_sil:
            w.writerow([k, f"{with_sil[k]:.9f}", f"{without_sil[k]:.9f}" if k in without_sil else ""])


# -- band ablation ---------------------------------------------------------------------

@dataclass
class AblationRow:
    band: str
    mode: str
    accuracy: float
    rmse: float
    mcd: float


def band_ablation(datasets: Mapping[str, object], bands: Sequence[str], model_config: ModelConfig,
                  train_config: TrainConfig, train_ids: Sequence[str], test_ids: Sequence[str]) -> list[AblationRow]:
    """Train and score one model per (band, mode) on the held-out sentences.

    ``datasets`` maps a speech mode to a synthgen dataset recorded in that mode.
    """
    from dataclasses import replace

    from .synthgen import dataset_trials

    rows = []
    for mode, ds in datasets.items():
        cfg = replace(train_config, mode=mode)
        for band in bands:
            b = None if band == "full" else band
            train = dataset_trials(ds, b, cfg.modality, list(train_ids))
            test = dataset_trials(ds, b, cfg.modality, list(test_ids))
            mc = replace(model_config, in_channels=train[0].signal.shape[1])
            res = fit(train, mc, cfg)
            preds = predict(res.params, test, mc, res.normalizer, cfg.seq_len)
            rep = evaluate([t.sentence_id for t in test], preds, [(t.target_mfcc, t.frame_labels) for t in test],
                           aligned=(mode == "overt"))
            rows.append(AblationRow(band, mode, rep.aggregate["accuracy"], rep.aggregate["rmse"],
                                    rep.aggregate["mcd"]))
    return rows


def write_ablation(path: str | Path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band", "mode", "accuracy", "rmse", "mcd"])
        for r in rows:
            w.writerow([r.band, r.mode, f"{r.accuracy:.6f}", f"{r.rmse:.6f}", f"{r.mcd:.6f}"])
