"""Command-line entry point: synth, preprocess, build-dataset, train, personalize, evaluate, report.

Every flag can also come from a JSON file given with ``--config``; flags on
the command line win over the file, and ``PPGBP_SEED`` supplies the seed
when neither sets one. The resolved configuration is written next to each
command's output so the run can be repeated with ``--config`` alone.

Exit codes: 1 configuration, 2 data format/structure, 3 numerical
divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data, dsp, evaluate, synth, train
from .errors import ConfigurationError, DivergenceError, FormatError, PPGBPError
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger("ppgbp")

PERSONALIZATION_COLUMNS = ("scheme", "architecture", "task", "subject_id", "n_finetune",
                           "pre_accuracy", "post_accuracy", "best_epoch", "original_test_accuracy")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------


def _range(text, what):
    try:
        lo, hi = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise ConfigurationError(f"{what} must look like LOW:HIGH, got {text!r}") from None
    if not lo < hi:
        raise ConfigurationError(f"{what} lower bound must be below upper bound: {text!r}")
    return lo, hi


def _fractions(text):
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(":")
    try:
        values = tuple(float(v) for v in parts)
    except ValueError:
        raise ConfigurationError(f"split must be colon-separated numbers, got {text!r}") from None
    if len(values) != 3:
        raise ConfigurationError(
            f"split needs three fractions train:val:test, got {len(values)} ({text!r})"
        )
    return values


def _seed(value):
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"seed must be an integer, got {value!r}") from None
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    return seed


# Per command: flag name -> (default, type converter, help). ``None`` defaults
# are required unless noted; "seed" falls back to PPGBP_SEED, then 0.
COMMANDS = {
    "synth": {
        "seed": (None, int, "corpus seed"),
        "subjects": (20, int, "number of subjects (>= 5)"),
        "scheme": ("even10", str, "scheme whose bins the SBP trajectory cycles through"),
        "windows_per_bin": (50, int, "target valid windows per bin, sets the default duration"),
        "duration": (0.0, float, "record length in seconds (0: derived from --windows-per-bin)"),
        "noise": (0.05, float, "white noise std relative to the unit pulse"),
        "first_id": (1, int, "first subject id"),
        "jobs": (1, int, "worker processes"),
        "out": (None, str, "output directory for subject_*.ppgr files"),
    },
    "preprocess": {
        "in": (None, str, "directory of .ppgr ingest files"),
        "out": (None, str, "sample store to write"),
        "fs": (125.0, float, "expected sampling rate in Hz"),
        "snr_min": (-7.0, float, "minimum window SNR in dB"),
        "sbp_range": ("80:180", str, "accepted SBP range in mmHg"),
        "hr_range": ("50:140", str, "accepted heart-rate range in bpm"),
        "window": (5.0, float, "window length in seconds"),
        "overlap": (2.5, float, "window overlap in seconds"),
        "jobs": (1, int, "worker processes"),
    },
    "build-dataset": {
        "in": (None, str, "sample store from preprocess"),
        "scheme": ("hph", str, "segmentation scheme: hph, even4, dgk or even10"),
        "quota": (1000, int, "windows drawn per subject and bin"),
        "min_windows": (0, int, "minimum valid windows per subject"),
        "split": ("0.70:0.225:0.075", str, "train:val:test subject fractions"),
        "seed": (None, int, "balancing and split seed"),
        "out": (None, str, "dataset store to write (manifest goes to OUT.json)"),
    },
    "train": {
        "dataset": (None, str, "dataset store from build-dataset"),
        "arch": ("resnet18", str, "alexnet, resnet18, resnet34 or resnet50"),
        "task": ("classification", str, "classification or regression"),
        "profile": ("desk", str, "full or desk (widths / 4)"),
        "lr": (0.001, float, "Adam learning rate"),
        "batch_size": (128, int, "mini-batch size"),
        "patience": (10, int, "early-stopping patience in epochs"),
        "max_epochs": (200, int, "epoch cap"),
        "seed": (None, int, "initialization and shuffling seed"),
        "out": (None, str, "run directory"),
    },
    "personalize": {
        "checkpoint": (None, str, "pretrained checkpoint"),
        "dataset": (None, str, "dataset store the checkpoint was trained on"),
        "subjects": (10, int, "number of test-split subjects to personalize"),
        "take_every": (10, int, "every k-th SBP-sorted window fine-tunes"),
        "epochs": (100, int, "fine-tuning epochs (no early stopping)"),
        "lr": (0.001, float, "fine-tuning learning rate"),
        "batch_size": (128, int, "mini-batch size"),
        "seed": (None, int, "subject selection and shuffling seed"),
        "out": (None, str, "output directory"),
    },
    "evaluate": {
        "checkpoint": (None, str, "checkpoint to evaluate"),
        "dataset": (None, str, "dataset store"),
        "split": ("test", str, "train, val or test"),
        "run_id": ("", str, "run label (default: checkpoint directory name)"),
        "report": (None, str, "CSV file to write"),
    },
    "report": {
        "runs": (None, str, "directory searched for evaluation and personalization CSVs"),
        "out": (None, str, "summary CSV to write"),
    },
}


SUMMARIES = {
    "synth": "generate a seeded synthetic PPG/ABP corpus",
    "preprocess": "filter, window and quality-gate records into a window store",
    "build-dataset": "balance bins per subject and split subjects",
    "train": "pretrain a model with early stopping",
    "personalize": "fine-tune a checkpoint on individual test subjects",
    "evaluate": "score a checkpoint and write accuracy and confusion CSVs",
    "report": "aggregate evaluation and personalization CSVs",
}


def build_parser():
    parser = _Parser(prog="ppgbp", description="PPG-based blood-pressure bin estimation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in COMMANDS.items():
        p = sub.add_parser(name, help=SUMMARIES[name])
        p.add_argument("--config", help="JSON file with flag values")
        for key, (_, _, helptext) in flags.items():
            # defaults stay None so explicit flags can be told apart from the config file
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=helptext)
    return parser


def resolve(command, cli_values, config_path=None, environ=None):
    """Merge defaults, config file, environment and flags into one typed dict."""
    environ = os.environ if environ is None else environ
    spec = COMMANDS[command]
    file_values = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {config_path}: {exc.strerror}") from None
        try:
            file_values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigurationError(f"{config_path}: expected a JSON object")
        declared = file_values.pop("command", command)
        if declared != command:
            raise ConfigurationError(f"{config_path} is a {declared!r} config, not {command!r}")
        unknown = sorted(set(file_values) - set(spec))
        if unknown:
            raise ConfigurationError(f"{config_path}: unknown keys {', '.join(unknown)}")
    out = {}
    for key, (default, conv, _) in spec.items():
        if cli_values.get(key) is not None:
            raw = cli_values[key]
        elif key in file_values:
            raw = file_values[key]
        elif key == "seed" and environ.get("PPGBP_SEED") not in (None, ""):
            raw = environ["PPGBP_SEED"]
        elif key == "seed":
            raw = 0
        else:
            raw = default
        if raw is None:
            raise ConfigurationError(f"{command}: --{key.replace('_', '-')} is required")
        if key == "seed":
            out[key] = _seed(raw)
            continue
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError):
            raise ConfigurationError(
                f"{command}: --{key.replace('_', '-')} expects {conv.__name__}, got {raw!r}"
            ) from None
    return out


def echo_config(command, cfg, path):
    Path(path).write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _sidecar(path, suffix=".config.json"):
    p = Path(path)
    return p.with_name(p.name + suffix)


def _ensure_dir(path):
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _synth_one(args):
    seed, sid, duration, scheme, noise, out = args
    rec = synth.generate_subject(seed, sid, duration, scheme, noise_level=noise)
    path = Path(out) / f"subject_{sid:05d}.ppgr"
    data.write_record(rec, path)
    return str(path)


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_synth(cfg):
    if cfg["subjects"] < 5:
        raise ConfigurationError("synth needs at least 5 subjects")
    if cfg["noise"] < 0:
        raise ConfigurationError("noise must be non-negative")
    scheme = data.make_scheme(cfg["scheme"])
    duration = cfg["duration"] or synth.duration_for(scheme, cfg["windows_per_bin"])
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    out = _ensure_dir(cfg["out"])
    ids = range(cfg["first_id"], cfg["first_id"] + cfg["subjects"])
    items = [(cfg["seed"], sid, duration, scheme.name, cfg["noise"], str(out)) for sid in ids]
    paths = _pool_map(_synth_one, items, cfg["jobs"])
    echo_config("synth", cfg, out / "config.json")
    log.info("wrote %d subjects of %.1f s to %s", len(paths), duration, out)


def _preprocess_one(args):
    path, config = args
    rec = data.read_record(path)
    samples, reasons = data.preprocess_record(rec, config)
    return rec.subject_id, rec.fs, samples, reasons


def cmd_preprocess(cfg):
    files = sorted(Path(cfg["in"]).glob("*.ppgr"))
    if not Path(cfg["in"]).is_dir():
        raise OSError(f"input directory {cfg['in']} does not exist")
    if not files:
        raise ConfigurationError(f"no .ppgr files in {cfg['in']}")
    sbp_lo, sbp_hi = _range(cfg["sbp_range"], "--sbp-range")
    hr_lo, hr_hi = _range(cfg["hr_range"], "--hr-range")
    if not 0 <= cfg["overlap"] < cfg["window"]:
        raise ConfigurationError("overlap must be non-negative and shorter than the window")
    thresholds = dsp.QualityThresholds(cfg["snr_min"], sbp_lo, sbp_hi, hr_lo, hr_hi)
    config = data.PreprocessConfig(dsp.FilterSpec(fs=cfg["fs"]), thresholds, cfg["window"],
                                   cfg["overlap"])
    results = _pool_map(_preprocess_one, [(str(f), config) for f in files], cfg["jobs"])
    results.sort(key=lambda r: r[0])
    ids = [r[0] for r in results]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate subject ids across ingest files")
    for sid, fs, _, _ in results:
        if fs != cfg["fs"]:
            raise ConfigurationError(f"subject {sid} sampled at {fs} Hz, expected {cfg['fs']} Hz")
    n_samp = int(round(cfg["window"] * cfg["fs"]))
    samples = data.SampleSet.concatenate([r[2] for r in results], n_samp)
    data.write_store(samples, cfg["out"], n_samp)
    totals = {}
    per_subject = {}
    for sid, _, _, reasons in results:
        per_subject[str(sid)] = reasons
        for k, v in reasons.items():
            totals[k] = totals.get(k, 0) + v
    stats = {"subjects": len(results), "windows": sum(totals.values()), "accepted": len(samples),
             "reasons": totals, "per_subject": per_subject}
    _sidecar(cfg["out"], ".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True)
                                                   + "\n")
    echo_config("preprocess", cfg, _sidecar(cfg["out"]))
    log.info("accepted %d of %d windows (%s)", len(samples), stats["windows"], totals)


def cmd_build_dataset(cfg):
    fractions = _fractions(cfg["split"])
    scheme = data.make_scheme(cfg["scheme"])
    if cfg["quota"] < 1:
        raise ConfigurationError("quota must be >= 1")
    samples = data.read_store(cfg["in"])
    ds = data.build_dataset(samples, scheme, cfg["quota"], cfg["min_windows"], fractions,
                            cfg["seed"])
    data.save_dataset(ds, cfg["out"])
    echo_config("build-dataset", cfg, _sidecar(cfg["out"]))
    log.info("dataset: %d subjects x %d bins x %d = %d windows", len(ds.split_assignment),
             scheme.n_bins, cfg["quota"], len(ds.samples))


def cmd_train(cfg):
    ds = data.load_dataset(cfg["dataset"])
    config = train.TrainConfig(cfg["task"], ds.scheme.name, cfg["arch"], cfg["profile"], cfg["lr"],
                               cfg["batch_size"], cfg["patience"], cfg["max_epochs"], cfg["seed"])
    out = _ensure_dir(cfg["out"])
    ckpt, history = train.pretrain(
        ds, config,
        on_epoch=lambda r: log.info("epoch %d val_loss=%.4f val_acc=%.4f (%.1fs)", r.epoch,
                                    r.val_loss, r.val_acc, r.seconds),
    )
    save_checkpoint(ckpt, out / "model.ppgm")
    (out / "train_log.txt").write_text(history.to_lines())
    echo_config("train", cfg, out / "config.json")


def cmd_personalize(cfg):
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = data.load_dataset(cfg["dataset"])
    out = _ensure_dir(cfg["out"])
    test = ds.split("test")
    ids = train.select_personalization_subjects(ds.subjects_in("test"), cfg["subjects"],
                                                cfg["seed"])
    rows = []
    for sid in ids:
        res = train.personalize(ckpt, test.for_subjects([sid]), ds.scheme, cfg["take_every"],
                                cfg["epochs"], cfg["lr"], cfg["batch_size"], cfg["seed"])
        retained = evaluate.evaluate_model(res.checkpoint, test, ds.scheme).accuracy
        save_checkpoint(res.checkpoint, out / f"subject_{sid:05d}.ppgm")
        (out / f"subject_{sid:05d}_log.txt").write_text(res.log.to_lines())
        rows.append((ds.scheme.name, ckpt.config.name, ckpt.task, sid, len(res.split.finetune),
                     f"{res.pre_accuracy:.6f}", f"{res.post_accuracy:.6f}", res.log.best_epoch,
                     f"{retained:.6f}"))
        log.info("subject %d: %.3f -> %.3f (original test set %.3f)", sid, res.pre_accuracy,
                 res.post_accuracy, retained)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PERSONALIZATION_COLUMNS)
    w.writerows(rows)
    (out / "personalization.csv").write_text(buf.getvalue())
    echo_config("personalize", cfg, out / "config.json")


def cmd_evaluate(cfg):
    if cfg["split"] not in data.SPLITS:
        raise ConfigurationError(f"split must be one of {data.SPLITS}")
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = data.load_dataset(cfg["dataset"])
    samples = ds.split(cfg["split"])
    if len(samples) == 0:
        raise ConfigurationError(f"dataset has no {cfg['split']} samples")
    run_id = cfg["run_id"] or Path(cfg["checkpoint"]).resolve().parent.name
    report = evaluate.evaluate_model(ckpt, samples, ds.scheme, cfg["split"], run_id)
    Path(cfg["report"]).write_text(evaluate.grid_csv([report]))
    _sidecar(cfg["report"], ".confusion.csv").write_text(
        evaluate.confusion_csv(report, normalized=True)
        + evaluate.confusion_csv(report, normalized=False)
    )
    echo_config("evaluate", cfg, _sidecar(cfg["report"]))
    log.info("%s %s %s accuracy %.4f", report.scheme, report.architecture, report.task,
             report.accuracy)


def _read_csv_rows(path):
    text = Path(path).read_text()
    header = text.split("\n", 1)[0].strip().split(",")
    return header, text


def cmd_report(cfg):
    root = Path(cfg["runs"])
    if not root.is_dir():
        raise OSError(f"runs directory {root} does not exist")
    out_path = Path(cfg["out"]).resolve()
    reports, pairs = [], []
    for path in sorted(root.rglob("*.csv")):
        if path.resolve() == out_path or path.name.endswith(".confusion.csv"):
            continue
        header, text = _read_csv_rows(path)
        if tuple(header) == evaluate.GRID_COLUMNS:
            reports.extend(evaluate.read_grid_csv(text, _bin_counts_by_name(text)))
        elif tuple(header) == PERSONALIZATION_COLUMNS:
            for row in csv.DictReader(io.StringIO(text)):
                pairs.append((row["scheme"], row["architecture"], row["task"],
                              float(row["pre_accuracy"]), float(row["post_accuracy"])))
    if not reports:
        raise ConfigurationError(f"no evaluation reports found under {root}")
    summary = evaluate.aggregate_report(reports, pairs)
    Path(cfg["out"]).write_text(evaluate.summary_csv(summary))
    _sidecar(cfg["out"], ".plot.json").write_text(
        json.dumps(evaluate.plot_spec(summary), indent=2, sort_keys=True) + "\n")
    _sidecar(cfg["out"], ".txt").write_text(_summary_text(summary))
    echo_config("report", cfg, _sidecar(cfg["out"]))


def _bin_counts_by_name(text):
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["scheme"] in data.SCHEME_EDGES:
            out[row["scheme"]] = data.make_scheme(row["scheme"]).n_bins
    return out


def _summary_text(summary):
    lines = ["# test accuracy by scheme, architecture and task"]
    for (scheme, arch, task), acc in summary["grid"].items():
        ref = evaluate.REFERENCE_ACCURACY.get(task, {}).get(scheme, {}).get(arch)
        note = f"  (reference on clinical data: {ref:.2f})" if ref is not None else ""
        lines.append(f"grid scheme={scheme} architecture={arch} task={task} "
                     f"accuracy={acc:.4f}{note}")
    for (scheme, arch, task), s in summary["personalization"].items():
        lines.append(f"personalization scheme={scheme} architecture={arch} task={task} n={s['n']} "
                     f"pre={s['pre_mean']:.4f}+-{s['pre_std']:.4f} "
                     f"post={s['post_mean']:.4f}+-{s['post_std']:.4f}")
    for (scheme, task), s in summary["by_scheme"].items():
        lines.append(f"scheme_mean scheme={scheme} task={task} accuracy={s['mean']:.4f}"
                     f"+-{s['std']:.4f}")
    lines.append("# reference values come from a clinical database and are not expected to "
                 "match synthetic runs")
    return "\n".join(lines) + "\n"


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "personalize": cmd_personalize,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _category(exc):
    if isinstance(exc, PPGBPError):
        return {1: "configuration", 2: "data", 3: "divergence"}.get(exc.exit_code, "error"), \
            exc.exit_code
    if isinstance(exc, OSError):
        return "io", 4
    if isinstance(exc, (RuntimeError, ValueError)):
        return "data", 2
    raise exc


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s",
                            stream=sys.stderr)
        values = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg = resolve(args.command, values, args.config)
        np.seterr(over="ignore", under="ignore")
        HANDLERS[args.command](cfg)
    except (PPGBPError, OSError, RuntimeError, ValueError) as exc:
        category, code = _category(exc)
        if isinstance(exc, DivergenceError):
            msg = f"{exc} (try a lower learning rate or check the input data)"
        else:
            msg = str(exc)
        print(f"ppgbp: error [{category}]: {msg}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
