"""Command-line entry point: ``eegstt <command> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict


from . import __version__
from . import formats as F
from .config import dump_config, load_config, merge
from .curriculum import HIST_BINS, CurriculumConfig
from .errors import ConfigError, EEGSTTError, FormatError
from .model import ModelConfig
from .signal import PreprocessConfig, extract_features
from .synth import SyntheticSpec, generate_synthetic
from .training import Dataset, TrainConfig, evaluate, format_mean_std, train_run

log = logging.getLogger("eegstt")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_LOG_COLUMNS = ["fold", "epoch", "train_loss", "train_accuracy", "test_accuracy", "macro_f1"]
CURRICULUM_LOG_COLUMNS = (["fold", "epoch", "mu", "sigma", "alpha", "subset_size", "mean_difficulty",
                           "median_difficulty"] + [f"hist_{i:02d}" for i in range(HIST_BINS)])


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- config plumbing

def _values(args, keys):
    file_values = load_config(args.config) if getattr(args, "config", None) else {}
    return merge(file_values, {k: getattr(args, k, None) for k in keys})


def synthetic_spec(values):
    keys = ("classes", "channels", "sample_rate", "trials_per_class", "trial_seconds", "intensities",
            "noise_std", "signature_amplitude", "seed")
    return SyntheticSpec(**{k: values[k] for k in keys if k in values})


def preprocess_config(values):
    keys = ("bandpass_low", "bandpass_high", "filter_order", "window_seconds", "segment_seconds",
            "welch_subwindow", "welch_overlap")
    return PreprocessConfig(**{k: values[k] for k in keys if k in values})


def model_config(values, channels, windows, bands, classes):
    mapping = {"spatial_dim": "spatial_dim", "temporal_dim": "temporal_dim", "hidden_dim": "hidden_dim",
               "spatial_heads": "spatial_heads", "temporal_heads": "temporal_heads",
               "layers": "encoder_layers", "attention_window": "attention_window"}
    extra = {dst: values[src] for src, dst in mapping.items() if src in values}
    return ModelConfig(channels=channels, windows=windows, bands=bands, classes=classes, **extra)


def train_config(values):
    mapping = {"learning_rate": "learning_rate", "epochs": "total_epochs", "batch_size": "batch_size",
               "seed": "seed", "optimizer": "optimizer", "curriculum": "curriculum_enabled", "folds": "folds"}
    return TrainConfig(**{dst: values[src] for src, dst in mapping.items() if src in values})


def curriculum_config(values, epochs):
    keys = ("beta", "alpha0", "mu_q0", "mu_q1", "sigma_frac0", "sigma_frac1")
    return CurriculumConfig(total_epochs=epochs, **{k: values[k] for k in keys if k in values})


def _load_recordings(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic != F.EEGR_MAGIC:
        raise FormatError(f"{path}: expected an EEGR raw recording file")
    return F.read_eegr(path)


def _features_from_raw(recordings, cfg):
    segments = []
    for rec in recordings:
        segments.extend(extract_features(rec, cfg))
    if not segments:
        raise ConfigError("no complete segments: recordings are shorter than one segment")
    return segments


def _load_dataset(path, values, classes=None):
    """Dataset plus ``(windows, window_seconds)`` from SEGB or raw EEGR input."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == F.SEGB_MAGIC:
        segments, header = F.read_segb(path)
        if "window_seconds" in values:
            seg_s = values.get("segment_seconds", PreprocessConfig.segment_seconds)
            expect = int(round(seg_s / values["window_seconds"]))
            if expect != header["windows"]:
                raise ConfigError(f"{path} holds {header['windows']} windows per segment; "
                                  f"--window-seconds {values['window_seconds']} implies {expect}")
        k = header["classes"]
        window_s = None
    elif magic == F.EEGR_MAGIC:
        pcfg = preprocess_config(values)
        segments = _features_from_raw(F.read_eegr(path), pcfg)
        k = classes or max(s.label for s in segments) + 1
        window_s = pcfg.window_seconds
    else:
        raise FormatError(f"{path}: expected a SEGB or EEGR file")
    return Dataset.from_segments(segments, k), window_s


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    values = _values(args, ("classes", "channels", "sample_rate", "trials_per_class", "trial_seconds",
                            "intensities", "noise_std", "signature_amplitude", "seed"))
    spec = synthetic_spec(values)
    recs = generate_synthetic(spec)
    F.write_eegr(args.out, recs)
    print(f"wrote {len(recs)} recordings to {args.out}")
    return EXIT_OK


def cmd_convert(args):
    if args.to_csv:
        recs = _load_recordings(args.input)
        if len(recs) != 1 and args.index is None:
            raise ConfigError(f"{args.input} holds {len(recs)} recordings; pass --index")
        rec = recs[args.index or 0]
        F.atomic_write(args.out, F.recording_to_csv(rec))
        print(f"wrote {rec.channels}x{rec.samples} CSV to {args.out}")
        return EXIT_OK
    meta_path = args.meta or os.path.splitext(args.input)[0] + ".meta"
    if not os.path.exists(meta_path):
        raise FormatError(f"{args.input}: missing metadata sidecar {meta_path}")
    rec = F.convert_csv(args.input, F.read_metadata(meta_path))
    F.write_eegr(args.out, [rec])
    print(f"wrote {rec.channels}x{rec.samples} recording to {args.out}")
    return EXIT_OK


def cmd_preprocess(args):
    values = _values(args, ("bandpass_low", "bandpass_high", "filter_order", "window_seconds",
                            "segment_seconds", "welch_subwindow", "welch_overlap"))
    cfg = preprocess_config(values)
    recs = []
    for path in args.inputs:
        recs.extend(_load_recordings(path))
    segments = _features_from_raw(recs, cfg)
    classes = args.classes or max(s.label for s in segments) + 1
    F.write_segb(args.out, segments, classes)
    floored = sum(s.floored for s in segments)
    if floored:
        log.warning("%d segments had a band variance clamped to the floor", floored)
    print(f"wrote {len(segments)} segments ({cfg.windows_per_segment} windows) to {args.out}")
    return EXIT_OK


def _manifest(args, values, run_dir, outputs):
    return {
        "artifact_version": __version__,
        "command": "train",
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items()},
        "seeds": {"master": values.get("seed", 0)},
        "inputs": {os.path.abspath(args.data): F.sha256_file(args.data)},
        "outputs": {k: os.path.join(run_dir, v) for k, v in outputs.items()},
    }


def write_report(path, result):
    agg = result.aggregate()
    lines = [
        f"folds: {len(result.folds)}",
        f"curriculum: {'on' if result.train_config.curriculum_enabled else 'off'}",
        f"encoder_layers: {result.model_config.encoder_layers}",
        f"accuracy: {format_mean_std(agg['accuracy_mean'], agg['accuracy_std'])}",
        f"macro_f1: {format_mean_std(agg['macro_f1_mean'], agg['macro_f1_std'])}",
    ]
    for f in result.folds:
        lines.append(f"fold {f.split.fold_id}: accuracy={f.report.accuracy:.4f} macro_f1={f.report.macro_f1:.4f} "
                     f"test_trials={','.join(map(str, f.split.test_trial_ids))}")
    F.atomic_write(path, "\n".join(lines) + "\n")


def cmd_train(args):
    values = _values(args, ("window_seconds", "segment_seconds", "spatial_dim", "temporal_dim", "hidden_dim",
                            "spatial_heads", "temporal_heads", "layers", "attention_window", "learning_rate",
                            "epochs", "batch_size", "seed", "optimizer", "curriculum", "folds", "beta", "alpha0",
                            "mu_q0", "mu_q1", "sigma_frac0", "sigma_frac1"))
    dataset, window_s = _load_dataset(args.data, values)
    _, t, c, b = dataset.features.shape
    mcfg = model_config(values, c, t, b, dataset.classes)
    tcfg = train_config(values)
    ccfg = curriculum_config(values, tcfg.total_epochs)
    if window_s is not None:
        values.setdefault("window_seconds", window_s)
    run_dir = args.out
    os.makedirs(run_dir, exist_ok=True)
    outputs = {"checkpoint": "model.sttc", "train_log": "train_log.csv", "curriculum_log": "curriculum_log.csv",
               "report": "report.txt", "metrics": "metrics.json", "difficulty": "difficulty.csv",
               "config": "config.txt"}
    manifest = _manifest(args, values, run_dir, outputs)
    manifest["model_config"] = mcfg.to_dict()
    manifest["train_config"] = asdict(tcfg)
    manifest["curriculum_config"] = asdict(ccfg)
    F.atomic_write(os.path.join(run_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
    F.atomic_write(os.path.join(run_dir, "config.txt"), dump_config(values))

    def on_fold(res):
        F.write_checkpoint(os.path.join(run_dir, f"fold{res.split.fold_id}.sttc"), res.params, mcfg)
        log.info("fold %d accuracy %.4f", res.split.fold_id, res.report.accuracy)

    result = train_run(dataset, mcfg, tcfg, ccfg, on_fold=on_fold)
    best = result.best_fold()
    F.write_checkpoint(os.path.join(run_dir, "model.sttc"), best.params, mcfg)

    train_rows, cur_rows, diff_rows = [], [], []
    for f in result.folds:
        train_rows += [{"fold": f.split.fold_id, **row} for row in f.epoch_log]
        for row in f.curriculum_log:
            hist = {f"hist_{i:02d}": v for i, v in enumerate(row["hist"])}
            cur_rows.append({"fold": f.split.fold_id, **{k: v for k, v in row.items() if k != "hist"}, **hist})
        diff_rows += [{"fold": f.split.fold_id, "sample": i, "difficulty": float(d), "intensity": float(s)}
                      for i, (d, s) in enumerate(zip(f.difficulty, f.train_intensity))]
    F.atomic_write(os.path.join(run_dir, "train_log.csv"), F.rows_to_csv(train_rows, TRAIN_LOG_COLUMNS))
    F.atomic_write(os.path.join(run_dir, "curriculum_log.csv"), F.rows_to_csv(cur_rows, CURRICULUM_LOG_COLUMNS))
    F.atomic_write(os.path.join(run_dir, "difficulty.csv"),
                   F.rows_to_csv(diff_rows, ["fold", "sample", "difficulty", "intensity"]))
    metrics = {"aggregate": result.aggregate(), "best_fold": best.split.fold_id,
               "folds": [{"fold": f.split.fold_id, **f.report.to_dict()} for f in result.folds]}
    F.atomic_write(os.path.join(run_dir, "metrics.json"), json.dumps(metrics, indent=2, sort_keys=True))
    write_report(os.path.join(run_dir, "report.txt"), result)
    agg = result.aggregate()
    print(f"accuracy {format_mean_std(agg['accuracy_mean'], agg['accuracy_std'])}  "
          f"macro_f1 {format_mean_std(agg['macro_f1_mean'], agg['macro_f1_std'])}")
    return EXIT_OK


def cmd_evaluate(args):
    params, mcfg = F.read_checkpoint(args.checkpoint)
    segments, header = F.read_segb(args.data)
    if header["classes"] != mcfg.classes:
        raise ConfigError(f"checkpoint has {mcfg.classes} classes but {args.data} declares {header['classes']}")
    shape = (header["windows"], header["channels"], header["bands"])
    if shape != (mcfg.windows, mcfg.channels, mcfg.bands):
        raise ConfigError(f"checkpoint expects segments {(mcfg.windows, mcfg.channels, mcfg.bands)}, "
                          f"data has {shape}")
    if args.trials:
        keep = {int(t) for t in args.trials.split(",")}
        segments = [s for s in segments if s.trial_id in keep]
    if not segments:
        raise ConfigError("no segments to evaluate")
    ds = Dataset.from_segments(segments, mcfg.classes)
    report = evaluate(params, mcfg, ds.features, ds.labels)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        F.atomic_write(args.out, text + "\n")
    print(text)
    return EXIT_OK


def tidy_rows(run_dir):
    """Long-format rows for one run directory."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{run_dir}: no manifest.json (not a training run directory)")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    run = os.path.basename(os.path.normpath(run_dir))
    ident = {
        "run": run,
        "layers": manifest["model_config"]["encoder_layers"],
        "window_seconds": manifest["config"].get("window_seconds", ""),
        "curriculum": "on" if manifest["train_config"]["curriculum_enabled"] else "off",
    }
    rows = []
    for r in F.read_csv_rows(os.path.join(run_dir, "train_log.csv")):
        for key in TRAIN_LOG_COLUMNS[2:]:
            rows.append({**ident, "source": "train", "fold": r["fold"], "epoch": r["epoch"],
                         "variable": key, "value": r[key]})
    cur_path = os.path.join(run_dir, "curriculum_log.csv")
    if os.path.exists(cur_path):
        for r in F.read_csv_rows(cur_path):
            for key in CURRICULUM_LOG_COLUMNS[2:]:
                rows.append({**ident, "source": "curriculum", "fold": r["fold"], "epoch": r["epoch"],
                             "variable": key, "value": r[key]})
    with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as fh:
        metrics = json.load(fh)
    for key, value in metrics["aggregate"].items():
        rows.append({**ident, "source": "summary", "fold": "", "epoch": "", "variable": key, "value": value})
    return rows


def cmd_plot_data(args):
    rows = []
    for run_dir in args.runs:
        rows.extend(tidy_rows(run_dir))
    cols = ["run", "layers", "window_seconds", "curriculum", "source", "fold", "epoch", "variable", "value"]
    F.atomic_write(args.out, F.rows_to_csv(rows, cols))
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_inspect(args):
    for path in args.files:
        print(json.dumps({"path": path, **F.inspect_file(path)}))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_preprocess_flags(p):
    p.add_argument("--window-seconds", dest="window_seconds", type=float)
    p.add_argument("--segment-seconds", dest="segment_seconds", type=float)
    p.add_argument("--bandpass-low", dest="bandpass_low", type=float)
    p.add_argument("--bandpass-high", dest="bandpass_high", type=float)
    p.add_argument("--filter-order", dest="filter_order", type=int)
    p.add_argument("--welch-subwindow", dest="welch_subwindow", type=int)
    p.add_argument("--welch-overlap", dest="welch_overlap", type=float)


def build_parser():
    parser = _Parser(prog="eegstt", description="EEG spatial-temporal transformer with curriculum training.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic raw recordings (EEGR)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--sample-rate", dest="sample_rate", type=float)
    p.add_argument("--trials-per-class", dest="trials_per_class", type=int)
    p.add_argument("--trial-seconds", dest="trial_seconds", type=float)
    p.add_argument("--intensities", help="comma-separated levels, e.g. 0.3,0.6,0.9")
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--signature-amplitude", dest="signature_amplitude", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="CSV + metadata sidecar to EEGR, or EEGR back to CSV")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="key=value sidecar (default: <input>.meta)")
    p.add_argument("--to-csv", action="store_true", help="export an EEGR recording as CSV")
    p.add_argument("--index", type=int, help="recording index for --to-csv")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("preprocess", help="raw recordings (EEGR) to DE feature segments (SEGB)")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int, help="class count K (default: max label + 1)")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="cross-trial training; writes checkpoints, logs and a report")
    p.add_argument("--data", required=True, help="SEGB features, or EEGR raw data preprocessed on the fly")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config")
    p.add_argument("--curriculum", choices=["on", "off"])
    p.add_argument("--layers", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--folds", type=int)
    p.add_argument("--attention-window", dest="attention_window", type=int)
    p.add_argument("--spatial-dim", dest="spatial_dim", type=int)
    p.add_argument("--temporal-dim", dest="temporal_dim", type=int)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--window-seconds", dest="window_seconds", type=float)
    p.add_argument("--segment-seconds", dest="segment_seconds", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on SEGB features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", help="comma-separated trial ids to keep")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-data", help="training run directories to one tidy CSV")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("inspect", help="print binary file headers")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EEGSTTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
