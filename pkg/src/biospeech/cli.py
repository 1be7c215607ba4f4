"""Command line: synth, preprocess, train, eval, analyze.

Every command writes ``resolved_config.txt`` (all effective settings, seed
included) into its output directory and never modifies its inputs.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, metrics
from .losses import LossConfig
from .model import ModelConfig, load_model, save_model
from .signalproc import BANDS, preprocess, write_epoch
from .synthgen import SynthConfig, dataset_trials, generate, load_dataset, read_split, write_dataset
from .trainer import MODALITIES, MODES, Normalizer, TrainConfig, config_to_text, fit, predict, write_log

BAND_CHOICES = list(BANDS) + ["full"]


class ConfigError(ValueError):
    pass


def read_config_file(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    out = {}
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _coerce(cls, key: str, raw: str):
    f = {f.name: f for f in fields(cls)}[key]
    typ = str(f.type)
    if raw == "None" and "None" in typ:
        return None
    try:
        if typ.startswith("bool"):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def build(cls, values: dict[str, str], prefix: str = "", base=None):
    """Instantiate a config dataclass from the ``prefix``-ed keys of ``values``."""
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        kw[name] = _coerce(cls, name, raw)
    try:
        return replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def check_keys(values: dict[str, str], allowed_prefixes: dict[str, type]) -> None:
    for key in values:
        for prefix, cls in allowed_prefixes.items():
            if key.startswith(prefix) and key[len(prefix):] in {f.name for f in fields(cls)}:
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")


def write_resolved(out_dir: Path, command: str, sections: dict[str, object], extra: dict | None = None) -> None:
    lines = [f"command={command}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for prefix, cfg in sections.items():
        lines += [f"{prefix}{k}={v}" for k, v in asdict(cfg).items()]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(path: str, inputs: list[Path]) -> Path:
    out = Path(path)
    for p in inputs:
        if p.resolve() == out.resolve():
            raise ConfigError(f"--out-dir {out} must differ from input directory {p}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _band_arg(band: str | None) -> str | None:
    return None if band in (None, "full") else band


def _split(args, data_dir: Path) -> dict[str, list[str]]:
    path = Path(args.split_file) if args.split_file else data_dir / "split.txt"
    return read_split(path)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    values = read_config_file(args.config)
    check_keys(values, {"": SynthConfig})
    cfg = build(SynthConfig, values)
    over = {}
    if args.sentences is not None:
        over["n_sentences"] = args.sentences
    if args.seed is not None:
        over["seed"] = args.seed
    if args.mode is not None:
        over["mode"] = args.mode
    if args.band is not None:
        over["band_center_hz"] = None if args.band == "full" else float(np.mean(BANDS[args.band]))
    if args.snr_db is not None:
        over["snr_db"] = args.snr_db
    try:
        cfg = replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out_dir, [])
    ds = generate(cfg)
    n_test = int(round(args.test_fraction * cfg.n_sentences))
    test_ids = ds.sentence_ids[cfg.n_sentences - n_test:] if n_test else []
    write_dataset(ds, out, test_ids)
    write_resolved(out, "synth", {"": cfg}, {"test_fraction": args.test_fraction})
    print(f"wrote {cfg.n_sentences} sentences to {out}")
    return 0


def cmd_preprocess(args) -> int:
    data = Path(args.data_dir)
    ds = load_dataset(data)
    out = _out_dir(args.out_dir, [data])
    band = _band_arg(args.band)
    (out / "epochs").mkdir(exist_ok=True)
    for ep in preprocess(ds.recording, band=band):
        write_epoch(out / "epochs" / ep.sentence_id, ep)
    write_resolved(out, "preprocess", {}, {"data_dir": data, "band": args.band or "full", "baseline_ms": 200.0})
    print(f"wrote {len(ds.transcripts)} epochs to {out / 'epochs'}")
    return 0


def _train_configs(args):
    values = read_config_file(args.config)
    check_keys(values, {"model.": ModelConfig, "loss.": LossConfig, "": TrainConfig})
    tc = build(TrainConfig, {k: v for k, v in values.items() if "." not in k})
    over = {k: getattr(args, k) for k in ("mode", "modality", "seed") if getattr(args, k, None) is not None}
    if getattr(args, "epochs", None) is not None:
        over["max_epochs"] = args.epochs
    try:
        tc = replace(tc, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    mc = build(ModelConfig, values, "model.", ModelConfig(dropout=tc.dropout))
    lc = build(LossConfig, values, "loss.")
    if (lc.ctc_blank_policy == "extra_blank") != mc.extra_blank:
        mc = replace(mc, extra_blank=lc.ctc_blank_policy == "extra_blank")
    return tc, mc, lc


def cmd_train(args) -> int:
    data = Path(args.data_dir)
    tc, mc, lc = _train_configs(args)
    split = _split(args, data)
    ds = load_dataset(data)
    out = _out_dir(args.out_dir, [data])
    trials = dataset_trials(ds, _band_arg(args.band), tc.modality, split["train"])
    mc = replace(mc, in_channels=trials[0].signal.shape[1])
    print(f"loss={tc.loss_name} mode={tc.mode} modality={tc.modality} band={args.band or 'full'}", flush=True)
    res = fit(trials, mc, tc, lc)
    save_model(out, res.params, mc)
    res.normalizer.save(out / "normalizer.bin")
    write_log(out / "train_log.csv", res.log)
    (out / "train_config.txt").write_text(config_to_text(tc), encoding="utf-8")
    (out / "loss_config.txt").write_text(config_to_text(lc), encoding="utf-8")
    (out / "run.log").write_text(
        f"loss={tc.loss_name}\nbest_epoch={res.best_epoch}\nstopped_epoch={res.stopped_epoch}\n"
        f"train_ids={' '.join(res.train_ids)}\nval_ids={' '.join(res.val_ids)}\n", encoding="utf-8")
    write_resolved(out, "train", {"": tc, "model.": mc, "loss.": lc},
                   {"data_dir": data, "band": args.band or "full"})
    print(f"best epoch {res.best_epoch}, stopped at {res.stopped_epoch}; checkpoint in {out}")
    return 0


def _load_train_config(model_dir: Path) -> TrainConfig:
    path = model_dir / "train_config.txt"
    if not path.exists():
        raise FileNotFoundError(str(path))
    return build(TrainConfig, read_config_file(path))


def cmd_eval(args) -> int:
    data, model_dir = Path(args.data_dir), Path(args.model_dir)
    params, mc = load_model(model_dir)
    tc = _load_train_config(model_dir)
    if not (model_dir / "normalizer.bin").exists():
        raise FileNotFoundError(str(model_dir / "normalizer.bin"))
    norm = Normalizer.load(model_dir / "normalizer.bin")
    band = args.band or _resolved_value(model_dir, "band") or "full"
    mode = args.mode or tc.mode
    split = _split(args, data)
    if not split["test"]:
        raise ConfigError("split file lists no test sentences")
    ds = load_dataset(data)
    out = _out_dir(args.out_dir, [data, model_dir])
    trials = dataset_trials(ds, _band_arg(band), tc.modality, split["test"])
    preds = predict(params, trials, mc, norm, tc.seq_len)
    rep = metrics.evaluate([t.sentence_id for t in trials], preds,
                           [(t.target_mfcc, t.frame_labels) for t in trials], aligned=(mode == "overt"))
    metrics.write_report(out / "metrics.csv", rep)
    metrics.write_confusion(out / "confusion.csv", rep.confusion)
    metrics.render_confusion_svg(out / "confusion.svg", rep.confusion)
    feats = np.concatenate([lp for _, lp in preds])
    if mode == "overt":
        labels = np.concatenate([t.frame_labels[:len(lp)] for t, (_, lp) in zip(trials, preds)])
    else:
        labels = np.concatenate([metrics.pred_frame_gt_labels(m, t.target_mfcc, t.frame_labels)
                                 for t, (m, _) in zip(trials, preds)])
    n = min(len(feats), len(labels))
    means, present = metrics.phoneme_mean_features(feats[:n], labels[:n], mc.n_classes)
    metrics.write_mean_features(out / "mean_features.csv", means, present)
    write_resolved(out, "eval", {"": tc}, {"data_dir": data, "model_dir": model_dir, "band": band,
                                           "eval_mode": mode})
    a = rep.aggregate
    print(f"accuracy={a['accuracy']:.2f}% rmse={a['rmse']:.4f} mcd={a['mcd']:.3f} f1={a['f1']:.4f} "
          f"per={a['per']:.4f}")
    return 0


def _resolved_value(model_dir: Path, key: str) -> str | None:
    path = model_dir / "resolved_config.txt"
    if not path.exists():
        return None
    return read_config_file(path).get(key)


def _read_metric_column(path: Path, column: str = "accuracy") -> dict[str, float]:
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["sentence_id"]: float(r[column]) for r in csv.DictReader(fh) if r["sentence_id"] != "mean"}


def cmd_analyze(args) -> int:
    data = Path(args.data_dir)
    ds = load_dataset(data)
    split = _split(args, data)
    out = _out_dir(args.out_dir, [data])
    by_id = {t.sentence_id: t for t in ds.transcripts}
    train_tr = [by_id[s] for s in split["train"]]
    with_sil, without = analysis.w_scores(train_tr)
    analysis.write_w_scores(out / "w_scores.csv", with_sil, without)
    props = [analysis.sentence_properties(by_id[s], with_sil, without) for s in split["test"] or split["train"]]
    extra = {"data_dir": data}
    if args.metrics:
        acc = _read_metric_column(Path(args.metrics))
        analysis.property_correlation_report(acc, props, out)
        extra["metrics"] = args.metrics
    if args.compare:
        a = _read_metric_column(Path(args.compare[0]))
        b = _read_metric_column(Path(args.compare[1]))
        common = sorted(set(a) & set(b))
        res = analysis.wilcoxon_signed_rank([a[s] for s in common], [b[s] for s in common])
        with open(out / "wilcoxon.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "w_plus", "w_minus", "statistic", "p_value", "method"])
            w.writerow([res.n, res.w_plus, res.w_minus, res.statistic, f"{res.p_value:.6g}", res.method])
        extra["compare"] = " ".join(args.compare)
    sections = {}
    if args.bands:
        args.mode = args.mode or (ds.config.mode if ds.config else "overt")
        tc, mc, lc = _train_configs(args)
        rows = analysis.band_ablation({tc.mode: ds}, args.bands, mc, tc, split["train"], split["test"])
        analysis.write_ablation(out / "ablation.csv", rows)
        sections = {"": tc, "model.": mc}
        extra["bands"] = " ".join(args.bands)
    write_resolved(out, "analyze", sections, extra)
    print(f"analysis written to {out}")
    return 0


# -- parser ------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biospeech", description="Biosignal-to-speech decoding pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key=value settings file; flags override it")
        if data:
            sp.add_argument("--data-dir", required=True)
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    common(s, data=False)
    s.add_argument("--sentences", type=int)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--band", choices=BAND_CHOICES, help="plant signatures in this band (full = broadband)")
    s.add_argument("--snr-db", type=float)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="filter, re-reference and epoch a recording")
    common(s)
    s.add_argument("--band", choices=BAND_CHOICES)
    s.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("train", cmd_train, "train a model"),):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--mode", choices=MODES)
        s.add_argument("--modality", choices=MODALITIES)
        s.add_argument("--band", choices=BAND_CHOICES)
        s.add_argument("--split-file")
        s.add_argument("--epochs", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a trained model on the test split")
    common(s)
    s.add_argument("--model-dir", required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--band", choices=BAND_CHOICES)
    s.add_argument("--split-file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="W scores, PCC, Wilcoxon and band ablation reports")
    common(s)
    s.add_argument("--split-file")
    s.add_argument("--metrics", help="metrics.csv from eval, for the sentence-property correlations")
    s.add_argument("--compare", nargs=2, metavar=("A_CSV", "B_CSV"), help="paired Wilcoxon on accuracy")
    s.add_argument("--bands", nargs="+", choices=BAND_CHOICES, help="run a band ablation over these bands")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--modality", choices=MODALITIES)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
