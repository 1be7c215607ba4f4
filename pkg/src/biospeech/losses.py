"""Training objectives: MFCC distance, frame cross-entropy, CTC and phoneme-weighted DTW.

Every loss is mean-normalised per frame so that trials of different length
weigh equally after the concatenation batching is undone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import tensorad as ad
from .phoneme import PhonemeInventory, collapse, default_inventory
from .tensorad import Tensor

PROB_FLOOR = 1e-12
NEG_INF = -np.inf


class InfeasibleCTC(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    ctc_blank_policy: str = "reuse_sil"  # or "extra_blank"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.ctc_blank_policy not in ("reuse_sil", "extra_blank"):
            raise ValueError(f"unknown ctc_blank_policy {self.ctc_blank_policy!r}")


# -- per-frame terms -------------------------------------------------------------

def audio_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over frames of the per-frame Euclidean distance between MFCC vectors."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"audio_loss frame mismatch: pred {pred.shape} vs target {target.shape}")
    return ad.mean(ad.l2norm(pred - target.astype(pred.dtype), axis=-1))


def one_hot(labels: Sequence[int], n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"target index {bad} outside 0..{n_classes - 1}")
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def phoneme_ce(logprobs: Tensor, frame_targets: Sequence[int]) -> Tensor:
    """Mean over frames of -log q[target]."""
    T, M = logprobs.shape
    if len(frame_targets) != T:
        raise ValueError(f"phoneme_ce length mismatch: {T} frames vs {len(frame_targets)} targets")
    oh = one_hot(frame_targets, M, logprobs.dtype)
    return ad.neg(ad.mean(ad.sum_(ad.mul(logprobs, oh), axis=1)))


# -- CTC ---------------------------------------------------------------------------

def ctc_min_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift right by k (left when negative), filling with -inf; length preserved."""
    out = np.full_like(a, NEG_INF)
    if k > 0:
        out[k:] = a[:a.size - k]
    else:
        out[:a.size + k] = a[-k:]
    return out


def _ctc_lattice(lp: np.ndarray, labels: Sequence[int], blank: int):
    T = lp.shape[0]
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    # s-2 -> s skip is allowed into a non-blank that differs from the label two back
    skip = np.zeros(S, bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    em = lp[:, ext]  # T x S

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        a = alpha[t - 1]
        a1 = _shift(a, 1)
        a2 = np.where(skip, _shift(a, 2), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(a, a1), a2) + em[t]

    beta = np.full((T, S), NEG_INF)  # excludes the emission at t
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        b = beta[t + 1] + em[t + 1]
        b1 = _shift(b, -1)
        b2 = np.where(skip_from, _shift(b, -2), NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(b, b1), b2)

    if S > 1:
        logp = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        logp = alpha[T - 1, 0]
    return ext, alpha, beta, logp


def ctc_loss(logprobs: Tensor, label_seq: Sequence[int], blank: int) -> Tensor:
    """-log of the total probability of all CTC alignments of ``label_seq``.

    ``logprobs`` is (T, K) log-probabilities; the gradient comes from the
    forward-backward occupancies, not from differentiating the recursion.
    """
    labels = [int(x) for x in label_seq]
    T, K = logprobs.shape
    if any(l == blank for l in labels):
        raise ValueError("label sequence contains the blank symbol")
    if any(not 0 <= l < K for l in labels):
        raise ValueError(f"label outside 0..{K - 1}")
    need = ctc_min_frames(labels)
    if T < need:
        raise InfeasibleCTC(f"{len(labels)} labels need at least {need} frames, got {T}")
    lp = logprobs.data.astype(np.float64)
    ext, alpha, beta, logp = _ctc_lattice(lp, labels, blank)
    if not np.isfinite(logp):
        raise InfeasibleCTC("label sequence has zero probability under the given log-probabilities")

    def bw(g):
        occ = np.exp(alpha + beta - logp)  # T x S
        grad = np.zeros((T, K))
        np.add.at(grad, (slice(None), ext), occ)
        return ((-float(g) * grad).astype(logprobs.dtype),)

    return ad.record_op(np.array(-logp, dtype=logprobs.dtype), (logprobs,), bw)


def ctc_targets(frame_labels: Sequence[int], policy: str = "reuse_sil",
                inventory: PhonemeInventory | None = None) -> tuple[list[int], int]:
    """CTC label sequence and blank index for a framewise transcript."""
    inv = inventory or default_inventory()
    seq = collapse(list(frame_labels))
    if policy == "reuse_sil":
        return [p for p in seq if p != inv.sil_index], inv.sil_index
    if policy == "extra_blank":
        return seq, inv.M
    raise ValueError(f"unknown ctc_blank_policy {policy!r}")


# -- DTW ---------------------------------------------------------------------------

@dataclass
class DtwAlignment:
    dist_matrix: np.ndarray
    cost_matrix: np.ndarray
    path: list[tuple[int, int]]  # 0-based (pred, gt) pairs
    align: np.ndarray  # gt index matched to each prediction step
    path_cost: float

    @property
    def T(self) -> int:
        return self.cost_matrix.shape[0]


def dtw(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-cost monotone path from (0, 0) to the far corner, steps (1,0), (0,1), (1,1).

    Backtracking prefers the diagonal, then (i-1, j), then (i, j-1) on ties.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty sequences")
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for d in range(n + m - 1):
        i = np.arange(max(0, d - m + 1), min(d, n - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(acc[i, j], acc[i, j + 1]), acc[i + 1, j])
        acc[i + 1, j + 1] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        cands = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(cands, key=lambda c: c[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return float(acc[n, m]), path


def row_alignment(path: Sequence[tuple[int, int]], cost: np.ndarray) -> np.ndarray:
    """For each row i, the path column with the lowest cost (first on ties)."""
    align = np.full(cost.shape[0], -1, dtype=np.int64)
    for i, j in path:
        if align[i] < 0 or cost[i, j] < cost[i, align[i]]:
            align[i] = j
    return align


def dtw_cost_matrix(pred_mfcc: np.ndarray, pred_logprobs: np.ndarray, gt_mfcc: np.ndarray,
                    gt_frame_labels: Sequence[int], beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance matrix, floored negative log-probability matrix and refined cost."""
    dist = cdist(np.asarray(pred_mfcc, np.float64), np.asarray(gt_mfcc, np.float64))
    lp = np.asarray(pred_logprobs, np.float64)[:, np.asarray(gt_frame_labels, dtype=np.int64)]
    nlp = -np.maximum(lp, np.log(PROB_FLOOR))
    return dist, nlp, dist + beta * nlp


def dtw_loss(pred_mfcc: Tensor, pred_logprobs: Tensor, gt_mfcc: np.ndarray,
             gt_frame_labels: Sequence[int], beta: float = 0.5) -> tuple[Tensor, DtwAlignment]:
    """Hard-path DTW loss on the phoneme-refined cost, averaged over prediction steps.

    Gradients flow through the matched cell of each prediction step; the path
    itself is treated as constant.
    """
    gt_mfcc = np.asarray(gt_mfcc)
    labels = np.asarray(gt_frame_labels, dtype=np.int64)
    if pred_mfcc.shape[0] != pred_logprobs.shape[0] or gt_mfcc.shape[0] != labels.size:
        raise ValueError("dtw_loss: sequence/label length mismatch")
    if pred_mfcc.shape[0] == 0 or gt_mfcc.shape[0] == 0:
        raise ValueError("dtw_loss needs non-empty sequences")
    dist, nlp, cost = dtw_cost_matrix(pred_mfcc.data, pred_logprobs.data, gt_mfcc, labels, beta)
    total, path = dtw(cost)
    align = row_alignment(path, cost)
    T = cost.shape[0]
    rows = np.arange(T)
    value = cost[rows, align].sum() / T
    alignment = DtwAlignment(dist, cost, path, align, total)

    def bw(g):
        g = float(g) / T
        diff = pred_mfcc.data.astype(np.float64) - gt_mfcc[align]
        d = dist[rows, align][:, None]
        gm = np.where(d > 0, diff / np.where(d > 0, d, 1.0), 0.0) * g
        glp = np.zeros(pred_logprobs.shape)
        unfloored = pred_logprobs.data[rows, labels[align]] > np.log(PROB_FLOOR)
        glp[rows, labels[align]] = np.where(unfloored, -beta * g, 0.0)
        return gm.astype(pred_mfcc.dtype), glp.astype(pred_logprobs.dtype)

    out = ad.record_op(np.array(value, dtype=pred_mfcc.dtype), (pred_mfcc, pred_logprobs), bw)
    return out, alignment


# -- composites ------------------------------------------------------------------

def combine_overt(audio, phoneme, ctc, alpha: float):
    return alpha * audio + phoneme + ctc


def combine_silent(dtw_term, ctc, alpha: float):
    return alpha * dtw_term + ctc


@dataclass
class TrialPrediction:
    mfcc: Tensor  # T x 80
    logprobs: Tensor  # T x 40
    ctc_logprobs: Tensor  # T x 40 (reuse_sil) or T x 41 (extra_blank)


@dataclass
class TrialTarget:
    mfcc: np.ndarray  # T_gt x 80
    frame_labels: np.ndarray  # T_gt


def _ctc_term(pred: TrialPrediction, target: TrialTarget, config: LossConfig) -> Tensor:
    labels, blank = ctc_targets(target.frame_labels, config.ctc_blank_policy)
    T = pred.ctc_logprobs.shape[0]
    return ad.mul(ctc_loss(pred.ctc_logprobs, labels, blank), 1.0 / T)


def overt_loss(preds: Sequence[TrialPrediction], targets: Sequence[TrialTarget],
               config: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """alpha * audio + phoneme CE + CTC, each averaged over trials."""
    if not preds:
        raise ValueError("empty batch")
    terms = {"audio": [], "phoneme": [], "ctc": []}
    for p, t in zip(preds, targets, strict=True):
        terms["audio"].append(audio_loss(p.mfcc, t.mfcc))
        terms["phoneme"].append(phoneme_ce(p.logprobs, t.frame_labels))
        terms["ctc"].append(_ctc_term(p, t, config))
    means = {k: ad.mul(_stack_sum(v), 1.0 / len(v)) for k, v in terms.items()}
    total = combine_overt(means["audio"], means["phoneme"], means["ctc"], config.alpha)
    return total, {k: v.item() for k, v in means.items()}


def silent_loss(preds: Sequence[TrialPrediction], targets: Sequence[TrialTarget],
                config: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """alpha * DTW + CTC, each averaged over trials."""
    if not preds:
        raise ValueError("empty batch")
    dtws, ctcs = [], []
    for p, t in zip(preds, targets, strict=True):
        d, _ = dtw_loss(p.mfcc, p.logprobs, t.mfcc, t.frame_labels, config.beta)
        dtws.append(d)
        ctcs.append(_ctc_term(p, t, config))
    dtw_mean = ad.mul(_stack_sum(dtws), 1.0 / len(dtws))
    ctc_mean = ad.mul(_stack_sum(ctcs), 1.0 / len(ctcs))
    total = combine_silent(dtw_mean, ctc_mean, config.alpha)
    return total, {"dtw": dtw_mean.item(), "ctc": ctc_mean.item()}


def _stack_sum(scalars: Sequence[Tensor]) -> Tensor:
    return ad.sum_(ad.concat([ad.reshape(s, (1,)) for s in scalars], axis=0))
