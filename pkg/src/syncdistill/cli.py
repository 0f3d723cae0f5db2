"""Command-line entry point for reproducible generation/training/eval runs.

Configuration comes from optional files of ``dotted.key = value`` lines
(``#`` starts a comment); command-line flags override file values.  Every
run writes a JSON manifest next to its main artifact recording input
digests, the effective seed, and the artifact list.  Diagnostics go to
stderr; stdout stays clean except for ``--print-defaults``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import data as dt
from . import evaluate as ev
from . import losses as ls
from . import model as md
from . import trainer as tr
from .errors import (
    ConfigError, DataFormatError, NumericalAbort, SyncDistillError, UsageError,
)

RUN_DIR_ENV = "SYNCDISTILL_RUN_DIR"

# every known configuration key with its desk-scale default
DEFAULTS: dict[str, object] = {
    "corpus.n_train": 40,
    "corpus.n_val": 12,
    "corpus.n_test": 16,
    "corpus.frames_per_utterance": 64,
    "corpus.latent_dim": 8,
    "corpus.d_visual_in": 32,
    "corpus.d_audio_in": 20,
    "corpus.audio_rate": 4,
    "corpus.noise_sigma": 0.1,
    "corpus.seed": 0,
    "corpus.exclude_near_offsets": False,
    "teacher.d_model": 64,
    "teacher.n_heads": 4,
    "teacher.layers_per_block": 4,
    "teacher.ffn_mult": 2,
    "teacher.seed": 1,
    "student.d_model": 24,
    "student.n_heads": 4,
    "student.layers_per_block": 4,
    "student.ffn_mult": 2,
    "student.seed": 2,
    # desk-scale schedule: shorter and hotter than the full-scale profile
    "train.epochs": 40,
    "train.warmup_epochs": 5,
    "train.lr0": 1e-3,
    "train.decay_mult": 0.8,
    "train.decay_every": 10,
    "train.batch_size": 32,
    "train.batches_per_epoch": 50,
    "train.val_batches": 8,
    "train.warmup_form": "linear",
    "train.seed": 0,
    "distill.method": "mtd",
    "distill.layers": "fusion3,av4,va1",
    "distill.tau": 25.0,
    "distill.include_cad": True,
    "distill.include_vr": True,
    "distill.reverse_kl": False,
    "eval.lengths": "5,7,9,11,13,15",
    "eval.half_window": 15,
    "eval.tolerance": 1,
    "eval.stride": 1,
    "eval.n_queries": 200,
    "eval.seed": 0,
}


def _convert(key: str, raw: str, line_no: int):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {line_no}: value {raw!r} for {key} is not a "
            f"{type(default).__name__}"
        ) from None


def parse_config(path) -> dict[str, object]:
    """Read a dotted-key config file over the defaults."""
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {line_no}: expected 'dotted.key = value', got {line!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        cfg[key] = _convert(key, value, line_no)
    return cfg


def print_defaults() -> None:
    for key in sorted(DEFAULTS):
        value = DEFAULTS[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        print(f"{key} = {value}")


# ---------------------------------------------------------------------------
# typed config builders
# ---------------------------------------------------------------------------

def build_corpus_config(cfg) -> dt.CorpusConfig:
    return dt.CorpusConfig(
        n_train=cfg["corpus.n_train"], n_val=cfg["corpus.n_val"],
        n_test=cfg["corpus.n_test"],
        frames_per_utterance=cfg["corpus.frames_per_utterance"],
        latent_dim=cfg["corpus.latent_dim"],
        d_visual_in=cfg["corpus.d_visual_in"], d_audio_in=cfg["corpus.d_audio_in"],
        audio_rate=cfg["corpus.audio_rate"], noise_sigma=cfg["corpus.noise_sigma"],
        seed=cfg["corpus.seed"],
        exclude_near_offsets=cfg["corpus.exclude_near_offsets"],
    )


def build_model_config(cfg, role: str) -> md.ModelConfig:
    return md.ModelConfig(
        d_model=cfg[f"{role}.d_model"], n_heads=cfg[f"{role}.n_heads"],
        layers_per_block=cfg[f"{role}.layers_per_block"],
        ffn_mult=cfg[f"{role}.ffn_mult"],
        d_visual_in=cfg["corpus.d_visual_in"], d_audio_in=cfg["corpus.d_audio_in"],
        audio_rate=cfg["corpus.audio_rate"], seed=cfg[f"{role}.seed"],
    )


def build_distill_config(cfg) -> ls.DistillConfig:
    dcfg = ls.DistillConfig(
        method=cfg["distill.method"],
        layer_set=ls.parse_layer_set(cfg["distill.layers"]),
        tau=cfg["distill.tau"],
        include_cad=cfg["distill.include_cad"],
        include_vr=cfg["distill.include_vr"],
        reverse_kl=cfg["distill.reverse_kl"],
    )
    dcfg.validate()
    return dcfg


def build_train_config(cfg) -> tr.TrainConfig:
    tcfg = tr.TrainConfig(
        epochs=cfg["train.epochs"], warmup_epochs=cfg["train.warmup_epochs"],
        lr0=cfg["train.lr0"], decay_mult=cfg["train.decay_mult"],
        decay_every=cfg["train.decay_every"], batch_size=cfg["train.batch_size"],
        batches_per_epoch=cfg["train.batches_per_epoch"],
        val_batches=cfg["train.val_batches"], warmup_form=cfg["train.warmup_form"],
        distill=build_distill_config(cfg), seed=cfg["train.seed"],
    )
    tcfg.validate()
    return tcfg


def build_eval_config(cfg) -> ev.EvalConfig:
    lengths = tuple(int(v) for v in str(cfg["eval.lengths"]).split(","))
    ecfg = ev.EvalConfig(
        frame_lengths=lengths, half_window=cfg["eval.half_window"],
        tolerance=cfg["eval.tolerance"], stride=cfg["eval.stride"],
        n_queries=cfg["eval.n_queries"], seed=cfg["eval.seed"],
    )
    ecfg.validate()
    return ecfg


def _apply_flag_overrides(cfg: dict, args: argparse.Namespace) -> None:
    mapping = {
        "seed": "train.seed",
        "tau": "distill.tau",
        "method": "distill.method",
        "layers": "distill.layers",
        "lengths": "eval.lengths",
        "epochs": "train.epochs",
        "n_queries": "eval.n_queries",
    }
    for flag, key in mapping.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            default = DEFAULTS[key]
            if isinstance(default, bool):
                cfg[key] = value in (True, "true")
            elif isinstance(default, int):
                cfg[key] = int(value)
            elif isinstance(default, float):
                cfg[key] = float(value)
            else:
                cfg[key] = str(value)


# ---------------------------------------------------------------------------
# artifacts, digests, manifest
# ---------------------------------------------------------------------------

def _run_dir() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "."))


def _resolve(path_text: str) -> Path:
    p = Path(path_text)
    out = p if p.is_absolute() else _run_dir() / p
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_input(path_text: str) -> Path:
    p = Path(path_text)
    if p.is_absolute() or p.exists():
        return p
    candidate = _run_dir() / p
    return candidate if candidate.exists() else p


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(cfg: dict) -> str:
    text = "\n".join(f"{k} = {cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(command: str, cfg: dict, artifacts: list[Path],
                   inputs: dict[str, str], started: float, main_artifact: Path) -> Path:
    manifest = {
        "command": command,
        "config_digest": config_digest(cfg),
        "input_digests": inputs,
        "seed": cfg.get("train.seed"),
        "artifacts": {
            str(p): file_digest(p) for p in artifacts
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = main_artifact.with_suffix(main_artifact.suffix + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def emit_eval_csv(report: ev.EvalReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_length", "accuracy", "queries"])
        for n, acc, count in report.as_rows():
            writer.writerow([n, f"{acc:.4f}", count])


def emit_ablation_csv(rows, lengths, path: Path) -> None:
    """Long form: one row per (axis value, seed, frame length)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "seed", "frame_length", "val_f1", "accuracy"])
        for row in rows:
            seed = "mean" if row.seed == -1 else row.seed
            for n in lengths:
                writer.writerow([row.axis_value, seed, n, f"{row.val_f1:.4f}",
                                 f"{row.accuracies[n]:.4f}"])


def emit_history_csv(history, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "bce", "cad", "vr", "aux", "total",
                         "val_f1", "wall_time_s"])
        for r in history:
            writer.writerow([
                r.epoch, f"{r.lr:.6e}", f"{r.bce:.4f}", f"{r.cad:.4f}",
                f"{r.vr:.4f}", f"{r.aux:.4f}", f"{r.total:.4f}",
                f"{r.val_f1:.4f}", f"{r.wall_time:.3f}",
            ])


def emit_tracking_csv(records, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mtd", "last_fitnets", "sel_fitnets"])
        for rec in records:
            writer.writerow([rec["epoch"], f"{rec['mtd']:.4f}",
                             f"{rec['last_fitnets']:.4f}",
                             f"{rec['sel_fitnets']:.4f}"])


def emit_report(results, format: str, path) -> int:
    """Write a result collection as CSV or a plain-text summary.

    Dispatches on the result type (evaluation report, ablation rows,
    training history, or loss-tracking records); numbers carry four
    decimal places.  An empty collection yields a header-only CSV.
    """
    path = Path(path)
    if format not in ("csv", "summary"):
        raise ConfigError(f"unknown report format {format!r}")
    if isinstance(results, ev.EvalReport):
        if format == "csv":
            emit_eval_csv(results, path)
        else:
            lines = [f"accuracy at length {n}: {a:.4f}"
                     for n, a, _ in results.as_rows()]
            lines += [f"{k}: {v}" for k, v in sorted(results.metadata.items())]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return 0
    rows = list(results)
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["axis_value", "seed", "frame_length",
                                     "val_f1", "accuracy"])
        return 0
    first = rows[0]
    if isinstance(first, ev.AblationRow):
        lengths = tuple(sorted(first.accuracies))
        if format == "csv":
            emit_ablation_csv(rows, lengths, path)
        else:
            lines = [
                f"{r.axis_value} seed {'mean' if r.seed == -1 else r.seed}: "
                + ", ".join(f"len{n} {r.accuracies[n]:.4f}" for n in lengths)
                for r in rows
            ]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif isinstance(first, tr.EpochRecord):
        emit_history_csv(rows, path)
    elif isinstance(first, dict) and "mtd" in first:
        emit_tracking_csv(rows, path)
    else:
        raise ConfigError(f"cannot emit results of type {type(first).__name__}")
    return 0


def size_summary_lines(cfg: dict) -> list[str]:
    teacher = build_model_config(cfg, "teacher")
    student = build_model_config(cfg, "student")
    t_desk = md.count_params_for_config(teacher, "backend_only")
    s_desk = md.count_params_for_config(student, "backend_only")
    t_full = md.count_params_for_config(md.full_scale_profile("teacher"), "backend_only")
    s_full = md.count_params_for_config(md.full_scale_profile("student"), "backend_only")
    return [
        f"teacher params (desk, backend): {md.count_params_for_config(teacher, 'all')}"
        f" ({t_desk} backend)",
        f"student params (desk, backend): {md.count_params_for_config(student, 'all')}"
        f" ({s_desk} backend)",
        f"desk backend ratio: {s_desk / t_desk:.4f}"
        f" (reduction {100.0 * (1 - s_desk / t_desk):.2f}%)",
        f"full-scale backend ratio (512 vs 200): {s_full / t_full:.4f}"
        f" (reduction {100.0 * (1 - s_full / t_full):.2f}%)",
    ]


def emit_summary(lines: list[str], cfg: dict, inputs: dict, path: Path) -> None:
    body = ["# run summary", ""]
    body += lines
    body += ["", "# model sizes"] + size_summary_lines(cfg)
    body += ["", "# inputs"]
    body += [f"{k}: {v}" for k, v in sorted(inputs.items())]
    body += ["", "# effective config"]
    body += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    path.write_text("\n".join(body) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["corpus.seed"] = int(args.seed)
    out = _resolve(args.out)
    corpus = dt.generate_corpus(build_corpus_config(cfg))
    dt.save_corpus(corpus, out)
    write_manifest("gen-data", cfg, [out], {}, started, out)
    print(f"wrote corpus to {out}", file=sys.stderr)
    return 0


def cmd_train_teacher(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    _apply_flag_overrides(cfg, args)
    corpus_path = _resolve_input(args.corpus)
    corpus = dt.load_corpus(corpus_path)
    out = _resolve(args.out)
    tcfg = build_train_config(cfg)
    model, history = tr.train_teacher(corpus, build_model_config(cfg, "teacher"),
                                      tcfg, checkpoint_path=out)
    if not out.exists():  # zero-epoch run still produces an artifact
        tr.save_checkpoint(model, {"epoch": -1, "val_f1": 0.0}, out)
    hist_path = out.with_suffix(out.suffix + ".history.csv")
    emit_history_csv(history, hist_path)
    write_manifest("train-teacher", cfg, [out, hist_path],
                   {"corpus": file_digest(corpus_path)}, started, out)
    best = max((r.val_f1 for r in history), default=0.0)
    print(f"teacher best val F1 {best:.4f}; checkpoint at {out}", file=sys.stderr)
    return 0


def cmd_distill(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    _apply_flag_overrides(cfg, args)
    corpus_path = _resolve_input(args.corpus)
    teacher_path = _resolve_input(args.teacher)
    corpus = dt.load_corpus(corpus_path)
    teacher = tr.load_checkpoint(teacher_path)
    out = _resolve(args.out)
    tcfg = build_train_config(cfg)
    student, history = tr.distill_student(teacher, corpus,
                                          build_model_config(cfg, "student"),
                                          tcfg, checkpoint_path=out)
    if not out.exists():
        tr.save_checkpoint(student, {"epoch": -1, "val_f1": 0.0}, out)
    hist_path = out.with_suffix(out.suffix + ".history.csv")
    emit_history_csv(history, hist_path)
    write_manifest("distill", cfg, [out, hist_path],
                   {"corpus": file_digest(corpus_path),
                    "teacher": file_digest(teacher_path)}, started, out)
    best = max((r.val_f1 for r in history), default=0.0)
    print(f"student ({cfg['distill.method']}) best val F1 {best:.4f}; "
          f"checkpoint at {out}", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    _apply_flag_overrides(cfg, args)
    corpus_path = _resolve_input(args.corpus)
    ckpt_path = _resolve_input(args.ckpt)
    corpus = dt.load_corpus(corpus_path)
    model = tr.load_checkpoint(ckpt_path)
    out = _resolve(args.out)
    ecfg = build_eval_config(cfg)
    inputs = {"corpus": file_digest(corpus_path), "checkpoint": file_digest(ckpt_path)}
    report = ev.multi_length_eval(model, corpus.split("test"), ecfg,
                                  metadata={"corpus_digest": inputs["corpus"]})
    emit_eval_csv(report, out)
    summary_path = out.with_suffix(out.suffix + ".summary.txt")
    lines = [f"accuracy at length {n}: {report.accuracies[n]:.4f}"
             for n in sorted(report.accuracies)]
    lines.append(f"queries per length: {report.query_count}")
    lines.append(f"skipped utterances: {report.skipped_utterances}")
    emit_summary(lines, cfg, inputs, summary_path)
    write_manifest("evaluate", cfg, [out, summary_path], inputs, started, out)
    print(f"evaluation written to {out}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    _apply_flag_overrides(cfg, args)
    corpus_path = _resolve_input(args.corpus)
    teacher_path = _resolve_input(args.teacher)
    corpus = dt.load_corpus(corpus_path)
    teacher = tr.load_checkpoint(teacher_path)
    out = _resolve(args.out)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    spec = ev.AblationSpec(args.axis, seeds=seeds)
    ecfg = build_eval_config(cfg)
    rows = ev.run_ablation(spec, teacher, corpus, build_model_config(cfg, "student"),
                           build_train_config(cfg), ecfg)
    emit_ablation_csv(rows, ecfg.frame_lengths, out)
    inputs = {"corpus": file_digest(corpus_path), "teacher": file_digest(teacher_path)}
    summary_path = out.with_suffix(out.suffix + ".summary.txt")
    mean_lines = [
        f"{row.axis_value}: val_f1 {row.val_f1:.4f}, "
        + ", ".join(f"len{n} {row.accuracies[n]:.4f}" for n in ecfg.frame_lengths)
        for row in rows if row.seed == -1
    ]
    emit_summary([f"ablation axis: {args.axis}", f"seeds: {args.seeds}", ""]
                 + mean_lines, cfg, inputs, summary_path)
    write_manifest("ablate", cfg, [out, summary_path], inputs, started, out)
    print(f"ablation ({args.axis}) written to {out}", file=sys.stderr)
    return 0


def cmd_loss_track(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    _apply_flag_overrides(cfg, args)
    corpus_path = _resolve_input(args.corpus)
    teacher_path = _resolve_input(args.teacher)
    corpus = dt.load_corpus(corpus_path)
    teacher = tr.load_checkpoint(teacher_path)
    out = _resolve(args.out)
    records = ev.loss_tracking_run(args.optimize, teacher, corpus,
                                   build_model_config(cfg, "student"),
                                   build_train_config(cfg))
    emit_tracking_csv(records, out)
    inputs = {"corpus": file_digest(corpus_path), "teacher": file_digest(teacher_path)}
    write_manifest("loss-track", cfg, [out], inputs, started, out)
    print(f"loss traces ({args.optimize}) written to {out}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    started = time.perf_counter()
    cfg = parse_config(args.config)
    src = _resolve_input(args.results)
    out = _resolve(args.out)
    with open(src, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if args.format == "csv":
        with open(out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
    else:
        header, body = (rows[0], rows[1:]) if rows else ([], [])
        lines = [f"rows: {len(body)}", f"columns: {', '.join(header)}", ""]
        lines += ["  ".join(r) for r in body]
        emit_summary(lines, cfg, {"results": file_digest(src)}, out)
    write_manifest("report", cfg, [out], {"results": file_digest(src)}, started, out)
    print(f"report written to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="syncdistill",
                     description="audio-visual sync distillation workbench")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print every config key with its default and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p, corpus=True, teacher=False, ckpt=False):
        p.add_argument("--config", default=None, help="dotted-key config file")
        p.add_argument("--out", required=True, help="main output artifact")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus file from gen-data")
        if teacher:
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="model checkpoint")
        p.add_argument("--seed", default=None, help="override the run seed")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the wide model on task loss")
    common(p)
    p.add_argument("--epochs", default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    common(p, teacher=True)
    p.add_argument("--method", default=None, choices=ls.METHODS)
    p.add_argument("--layers", default=None, help="e.g. fusion3,av4,va1")
    p.add_argument("--tau", default=None)
    p.add_argument("--epochs", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="retrieval evaluation of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--lengths", default=None, help="e.g. 5,7,9")
    p.add_argument("--n-queries", dest="n_queries", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one axis across seeds")
    common(p, teacher=True)
    p.add_argument("--axis", required=True, choices=ev.ABLATION_KINDS)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--lengths", default=None)
    p.add_argument("--epochs", default=None)
    p.add_argument("--tau", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("loss-track", help="train one objective, log all three")
    common(p, teacher=True)
    p.add_argument("--optimize", required=True, choices=ev.TRACKABLE)
    p.add_argument("--epochs", default=None)
    p.set_defaults(func=cmd_loss_track)

    p = sub.add_parser("report", help="re-emit a results CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--results", required=True)
    p.add_argument("--format", default="summary", choices=("csv", "summary"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse --help/--version path
            return int(exc.code or 0)
        if getattr(args, "print_defaults", False):
            print_defaults()
            return 0
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except SyncDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
