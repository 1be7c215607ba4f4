"""Concatenate-and-reshape batching, AdamW, cosine annealing and early stopping."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorad as ad
from .losses import LossConfig, TrialPrediction, TrialTarget, overt_loss, silent_loss
from .model import ModelConfig, forward, init_parameters
from .signalproc import EEG, EMG, Epoch
from .tensorad import Tensor

SEQ_LEN = 2048
MODES = ("overt", "whispered", "imagined")
MODALITIES = ("eeg", "eeg+emg")
OVERT_TOLERANCE_FRAMES = 7  # ~50 ms at 8 ms per frame


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_min: float = 1e-5
    t_max: int = 200
    weight_decay: float = 1e-5
    max_epochs: int = 200
    dropout: float = 0.1
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    mode: str = "overt"
    modality: str = "eeg+emg"
    seq_len: int = SEQ_LEN
    rows_per_batch: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not self.lr_min < self.lr:
            raise ValueError(f"lr_min {self.lr_min} must be below lr {self.lr}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        if self.seq_len % 8:
            raise ValueError("seq_len must be divisible by 8")
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.rows_per_batch < 1:
            raise ValueError("max_epochs, early_stop_patience and rows_per_batch must be positive")

    @property
    def loss_name(self) -> str:
        return "overt" if self.mode == "overt" else "silent"


def config_to_text(cfg) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())


def config_from_dict(cls, values: dict[str, str]):
    """Build a frozen config dataclass from string values, rejecting unknown keys."""
    types = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(cls)}
    kw = {}
    for key, raw in values.items():
        if key not in types:
            raise KeyError(key)
        typ = types[key]
        if typ == "int":
            kw[key] = int(raw)
        elif typ == "float":
            kw[key] = float(raw)
        elif typ == "bool":
            kw[key] = str(raw).lower() in ("1", "true", "yes")
        else:
            kw[key] = str(raw)
    return cls(**kw)


# -- batching --------------------------------------------------------------------

@dataclass
class BatchLayout:
    l: int
    N_S: int
    C: int
    B: int
    pad_len: int
    trial_spans: list[tuple[int, int, int]] = field(default_factory=list)  # (trial_id, start, end)

    def frame_counts(self) -> list[int]:
        return [(e - s) // 8 for _, s, e in self.trial_spans]


def n_rows(n_samples: int, l: int) -> int:
    return max(1, math.ceil(n_samples / l))


def _samples_of(trial) -> np.ndarray:
    x = trial.samples if hasattr(trial, "samples") else trial
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"trial must be frames x channels, got shape {x.shape}")
    return x


def make_batch(trials: Sequence, l: int = SEQ_LEN) -> tuple[np.ndarray, BatchLayout]:
    """Concatenate trials in time, zero-pad to a multiple of l and fold into (B, C, l).

    Trials should already be truncated to multiples of 8 samples (see
    ``truncate8``) so that every output frame maps to exactly one trial.
    """
    if l % 8:
        raise ValueError(f"l={l} is not divisible by 8")
    if not trials:
        raise ValueError("make_batch needs at least one trial")
    xs = [_samples_of(t) for t in trials]
    chans = {x.shape[1] for x in xs}
    if len(chans) != 1:
        raise ValueError(f"mixed channel counts in batch: {sorted(chans)}")
    C = chans.pop()
    spans, pos = [], 0
    for i, x in enumerate(xs):
        spans.append((i, pos, pos + x.shape[0]))
        pos += x.shape[0]
    N_S = pos
    B = n_rows(N_S, l)
    flat = np.zeros((B * l, C), dtype=np.float32)
    if N_S:
        flat[:N_S] = np.concatenate(xs, axis=0)
    out = flat.reshape(B, l, C).transpose(0, 2, 1).copy()
    return out, BatchLayout(l, N_S, C, B, B * l - N_S, spans)


def unbatch(outputs, layout: BatchLayout) -> list:
    """Undo make_batch at 1/8 time resolution; pad frames are dropped.

    Accepts an ndarray or a Tensor of shape (B, l/8, D); Tensors stay on the tape.
    """
    per_row = layout.l // 8
    shape = tuple(outputs.shape)
    if len(shape) != 3 or shape[0] != layout.B or shape[1] != per_row:
        raise ValueError(f"outputs of shape {shape} do not match layout (B={layout.B}, l/8={per_row})")
    D = shape[2]
    if any(s % 8 or e % 8 for _, s, e in layout.trial_spans):
        raise ValueError("trial spans are not multiples of 8 samples; truncate trials before make_batch")
    if isinstance(outputs, Tensor):
        flat = ad.reshape(outputs, (layout.B * per_row, D))
        return [ad.slice_(flat, slice(s // 8, e // 8)) for _, s, e in layout.trial_spans]
    flat = np.asarray(outputs).reshape(layout.B * per_row, D)
    return [flat[s // 8:e // 8] for _, s, e in layout.trial_spans]


def truncate8(x: np.ndarray) -> np.ndarray:
    """Drop trailing samples so the length is a multiple of 8 (at most 7 ms at 1 kHz)."""
    return x[: (x.shape[0] // 8) * 8]


def group_batches(lengths: Sequence[int], l: int, rows: int, order: Sequence[int]) -> list[list[int]]:
    """Greedy grouping in ``order`` so each batch holds about rows * l samples."""
    batches, cur, total = [], [], 0
    for i in order:
        cur.append(int(i))
        total += lengths[i]
        if total >= rows * l:
            batches.append(cur)
            cur, total = [], 0
    if cur:
        batches.append(cur)
    return batches


# -- optimisation ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    master: dict[str, np.ndarray] = field(default_factory=dict)  # float64 copies of the weights


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr_t: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One AdamW update in place; float64 master weights keep tiny decay steps from rounding away."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries) at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        if name not in state.master:
            state.master[name] = p.data.astype(np.float64)
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        w = state.master[name]
        g = np.asarray(grads.get(name, np.zeros(p.shape)), dtype=np.float64)
        w -= lr_t * weight_decay * w
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        w -= lr_t * m_hat / (np.sqrt(v_hat) + eps)
        p.data = w.astype(p.data.dtype)
    return params, state


def cosine_lr(epoch: int, lr: float = 1e-3, lr_min: float = 1e-5, t_max: int = 200) -> float:
    if not 0 <= epoch <= t_max:
        epoch = min(max(epoch, 0), t_max)
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * epoch / t_max))


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve on the best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


# -- data plumbing -----------------------------------------------------------------

@dataclass
class Trial:
    sentence_id: str
    signal: np.ndarray  # n x C biosignal at 1 kHz
    target_mfcc: np.ndarray  # T_gt x 80
    frame_labels: np.ndarray  # T_gt

    @property
    def n_frames(self) -> int:
        return self.signal.shape[0] // 8


def modality_mask(roles, modality: str) -> np.ndarray:
    roles = np.asarray(roles)
    if modality == "eeg":
        return roles == EEG
    if modality == "eeg+emg":
        return np.isin(roles, [EEG, EMG])
    raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")


def trials_from_epochs(epochs: Sequence[Epoch], mfccs: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
                       modality: str = "eeg+emg") -> list[Trial]:
    """Pair epochs with their targets, keeping the channels of ``modality``."""
    if not len(epochs) == len(mfccs) == len(labels):
        raise ValueError(f"{len(epochs)} epochs, {len(mfccs)} targets, {len(labels)} label sequences")
    out = []
    for ep, mf, lab in zip(epochs, mfccs, labels):
        mask = modality_mask(ep.channel_roles, modality)
        if not mask.any():
            raise ValueError(f"trial {ep.sentence_id} has no {modality} channels")
        lab = np.asarray(lab, dtype=np.int64)
        if len(lab) != len(mf):
            raise ValueError(f"trial {ep.sentence_id}: {len(mf)} MFCC frames but {len(lab)} labels")
        out.append(Trial(ep.sentence_id, truncate8(np.asarray(ep.samples[:, mask], dtype=np.float32)),
                         np.asarray(mf, dtype=np.float64), lab))
    return out


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, trials: Sequence[Trial]) -> "Normalizer":
        x = np.concatenate([t.signal for t in trials], axis=0).astype(np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def save(self, path: str | Path) -> None:
        ad.save_checkpoint(path, {"mean": self.mean, "std": self.std})

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        d = ad.load_checkpoint(path)
        return cls(d["mean"].astype(np.float64), d["std"].astype(np.float64))


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded split; at least one validation trial whenever there are two or more trials."""
    if n == 0:
        raise ValueError("empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1) if n > 1 else 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def overt_pair(pred_len: int, target: TrialTarget, sid: str = "") -> tuple[int, TrialTarget]:
    """Trim prediction and target to a common frame count when they differ by at most ~50 ms."""
    gt_len = len(target.frame_labels)
    if abs(pred_len - gt_len) > OVERT_TOLERANCE_FRAMES:
        raise ValueError(f"trial {sid}: {pred_len} predicted frames vs {gt_len} target frames")
    n = min(pred_len, gt_len)
    return n, TrialTarget(target.mfcc[:n], target.frame_labels[:n])


def batch_loss(params: dict[str, Tensor], trials: Sequence[Trial], model_config: ModelConfig,
               loss_config: LossConfig, mode: str, normalizer: Normalizer, l: int,
               train: bool, seed: int | None) -> tuple[Tensor, dict[str, float]]:
    x, layout = make_batch([normalizer.apply(truncate8(t.signal)) for t in trials], l)
    out = forward(params, x, model_config, train=train, seed=seed)
    mf = unbatch(out.mfcc_pred, layout)
    lp = unbatch(out.phoneme_logprobs, layout)
    clp = unbatch(out.ctc_logprobs, layout) if model_config.extra_blank else lp
    preds, targets = [], []
    for t, m, p, c in zip(trials, mf, lp, clp):
        target = TrialTarget(np.asarray(t.target_mfcc), np.asarray(t.frame_labels))
        if mode == "overt":
            n, target = overt_pair(m.shape[0], target, t.sentence_id)
            if n < m.shape[0]:
                m, p, c = m[:n], p[:n], c[:n]
        preds.append(TrialPrediction(m, p, c))
        targets.append(target)
    if mode == "overt":
        return overt_loss(preds, targets, loss_config)
    return silent_loss(preds, targets, loss_config)


def predict(params: dict[str, Tensor], trials: Sequence[Trial], model_config: ModelConfig,
            normalizer: Normalizer, l: int = SEQ_LEN, rows: int = 4) -> list[tuple[np.ndarray, np.ndarray]]:
    """Eval-mode (mfcc, phoneme log-probabilities) per trial, via the same batching path."""
    out: list = [None] * len(trials)
    groups = group_batches([t.signal.shape[0] for t in trials], l, rows, range(len(trials)))
    for g in groups:
        x, layout = make_batch([normalizer.apply(truncate8(trials[i].signal)) for i in g], l)
        o = forward(params, x, model_config, train=False)
        for i, m, p in zip(g, unbatch(o.mfcc_pred.data, layout), unbatch(o.phoneme_logprobs.data, layout)):
            out[i] = (m.astype(np.float64), p.astype(np.float64))
    return out


# -- training loop ---------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    lr: float
    wall_ms: float


@dataclass
class FitResult:
    params: dict[str, Tensor]
    model_config: ModelConfig
    normalizer: Normalizer
    log: list[LogRow]
    best_epoch: int
    stopped_epoch: int
    train_ids: list[str]
    val_ids: list[str]
    components: list[dict[str, float]] = field(default_factory=list)  # per-epoch mean train loss terms


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(snap: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), True, k) for k, v in snap.items()}


def fit(trials: Sequence[Trial], model_config: ModelConfig, config: TrainConfig,
        loss_config: LossConfig | None = None, init: dict[str, Tensor] | None = None,
        callback=None) -> FitResult:
    """Train with early stopping on a seeded validation split; returns the best-validation weights.

    ``callback(epoch, params, normalizer)`` runs after every epoch when given.
    """
    if not trials:
        raise ValueError("empty dataset")
    loss_config = loss_config or LossConfig()
    tr_idx, va_idx = split_train_val(len(trials), config.val_fraction, config.seed)
    train = [trials[i] for i in tr_idx]
    val = [trials[i] for i in va_idx]
    normalizer = Normalizer.fit(train)
    params = init if init is not None else init_parameters(model_config, config.seed)
    names = sorted(params)
    state = AdamState()
    stopper = EarlyStopping(config.early_stop_patience)
    best = _snapshot(params)
    last_good = best
    log: list[LogRow] = []
    components: list[dict[str, float]] = []
    rng = np.random.default_rng(config.seed + 1)
    lengths = [t.signal.shape[0] for t in train]
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr_t = cosine_lr(epoch - 1, config.lr, config.lr_min, config.t_max)
        batches = group_batches(lengths, config.seq_len, config.rows_per_batch, rng.permutation(len(train)))
        total, count = 0.0, 0
        comp_sum: dict[str, float] = {}
        for b in batches:
            with ad.Tape() as tape:
                loss, comps = batch_loss(params, [train[i] for i in b], model_config, loss_config, config.mode,
                                         normalizer, config.seq_len, True, int(rng.integers(2**31)))
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
                grads = tape.backward(loss, [params[n] for n in names])
            adamw_step(params, {n: grads[params[n]] for n in names}, state, lr_t, config.weight_decay,
                       config.beta1, config.beta2, config.adam_eps)
            total += loss.item() * len(b)
            count += len(b)
            for k, v in comps.items():
                comp_sum[k] = comp_sum.get(k, 0.0) + v * len(b)
        components.append({k: v / count for k, v in comp_sum.items()})
        last_good = _snapshot(params)
        log.append(LogRow(epoch, "train", total / count, lr_t, (time.perf_counter() - t0) * 1000))
        if val:
            t1 = time.perf_counter()
            v = evaluate_loss(params, val, model_config, loss_config, config, normalizer)
            if not np.isfinite(v):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", last_good)
            log.append(LogRow(epoch, "val", v, lr_t, (time.perf_counter() - t1) * 1000))
        else:
            v = total / count
        stop = stopper.update(epoch, v)
        if stopper.improved_last:
            best = last_good
        if callback is not None:
            callback(epoch, params, normalizer)
        if stop:
            break
    return FitResult(_restore(best), model_config, normalizer, log, stopper.best_epoch, epoch,
                     [t.sentence_id for t in train], [t.sentence_id for t in val], components)


def evaluate_loss(params, trials: Sequence[Trial], model_config: ModelConfig, loss_config: LossConfig,
                  config: TrainConfig, normalizer: Normalizer) -> float:
    lengths = [t.signal.shape[0] for t in trials]
    total = 0.0
    for b in group_batches(lengths, config.seq_len, config.rows_per_batch, range(len(trials))):
        loss, _ = batch_loss(params, [trials[i] for i in b], model_config, loss_config, config.mode,
                             normalizer, config.seq_len, False, None)
        total += loss.item() * len(b)
    return total / len(trials)


def write_log(path: str | Path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "lr", "wall_ms"])
        for r in rows:
            w.writerow([r.epoch, r.split, f"{r.loss:.9g}", f"{r.lr:.9g}", f"{r.wall_ms:.3f}"])


def read_log(path: str | Path) -> list[LogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [LogRow(int(r["epoch"]), r["split"], float(r["loss"]), float(r["lr"]), float(r["wall_ms"]))
                for r in csv.DictReader(fh)]
