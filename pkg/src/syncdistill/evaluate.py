"""Retrieval evaluation and the ablation / loss-tracking harnesses.

The core protocol ranks 31 candidate audio windows (offsets within
+/-15 visual frames of the true position) against a visual segment.
For an N-frame segment, each candidate's score is the mean model logit
over the N-4 constituent 5-frame windows at 1-frame stride; the argmax
offset is the prediction and a hit is any prediction within the
configured frame tolerance.  Ties resolve toward the smaller absolute
offset, then toward the negative one, so reports are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from . import losses as ls
from . import trainer as tr
from .data import WINDOW_FRAMES, Corpus, Utterance, batch_arrays, sample_batch
from .errors import ConfigError, UsageError
from .losses import DistillConfig, LAYER_SETS
from .model import ModelConfig, SyncModel, model_forward
from .trainer import TrainConfig

QUERY_STRIDE = 7  # anchor positions per utterance are this many frames apart

#: a scorer is a SyncModel or a callable (visual_window, audio_window, offset) -> float
Scorer = Union[SyncModel, Callable]


@dataclass(frozen=True)
class EvalConfig:
    frame_lengths: tuple[int, ...] = (5, 7, 9, 11, 13, 15)
    half_window: int = 15
    tolerance: int = 1
    stride: int = 1
    n_queries: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not self.frame_lengths:
            raise ConfigError("frame_lengths must be non-empty")
        if any(n < WINDOW_FRAMES for n in self.frame_lengths):
            raise ConfigError(
                f"frame lengths must be >= {WINDOW_FRAMES}, got {self.frame_lengths}"
            )
        if self.half_window < 1:
            raise ConfigError(f"half_window must be >= 1, got {self.half_window}")
        if not 0 <= self.tolerance < self.half_window:
            raise ConfigError(
                f"tolerance must lie in [0, half_window), got {self.tolerance}"
            )
        if self.stride != 1:
            raise ConfigError("only a 1-frame window stride is supported")
        if self.n_queries < 1:
            raise ConfigError(f"n_queries must be >= 1, got {self.n_queries}")


@dataclass
class EvalReport:
    accuracies: dict[int, float]   # frame_length -> accuracy
    query_count: int
    skipped_utterances: int
    metadata: dict

    def as_rows(self) -> list[tuple[int, float, int]]:
        return [(n, self.accuracies[n], self.query_count)
                for n in sorted(self.accuracies)]


def enumerate_queries(
    utterances: Sequence[Utterance], config: EvalConfig, max_len: Optional[int] = None
) -> tuple[list[tuple[int, int]], int]:
    """All (utterance index, anchor) pairs valid for every configured length.

    Anchors step by QUERY_STRIDE within each utterance; utterances too
    short for the longest configured segment are skipped and counted.
    """
    max_len = max(config.frame_lengths) if max_len is None else max_len
    queries: list[tuple[int, int]] = []
    skipped = 0
    for ui, utt in enumerate(utterances):
        t_frames = utt.visual.shape[0]
        lo = config.half_window
        hi = t_frames - max_len - config.half_window
        if hi < lo:
            skipped += 1
            continue
        queries.extend((ui, q0) for q0 in range(lo, hi + 1, QUERY_STRIDE))
    return queries, skipped


def select_queries(
    utterances: Sequence[Utterance], config: EvalConfig
) -> tuple[list[tuple[int, int]], int]:
    """Shuffle deterministically, then cap at n_queries."""
    queries, skipped = enumerate_queries(utterances, config)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(queries))
    queries = [queries[i] for i in order[: config.n_queries]]
    return queries, skipped


def _candidate_scores_model(
    model: SyncModel, utt: Utterance, q0: int, frame_length: int, config: EvalConfig
) -> np.ndarray:
    rate = model.config.audio_rate
    offsets = range(-config.half_window, config.half_window + 1)
    n_windows = frame_length - WINDOW_FRAMES + 1
    visual = []
    audio = []
    for off in offsets:
        for j in range(n_windows):
            v0 = q0 + j
            a0 = v0 + off
            visual.append(utt.visual[v0:v0 + WINDOW_FRAMES])
            audio.append(utt.audio[rate * a0: rate * (a0 + WINDOW_FRAMES)])
    visual = np.stack(visual).astype(np.float64)
    audio = np.stack(audio).astype(np.float64)
    with ag.no_grad():
        logits = model_forward(model, visual, audio, want_traces=False).logit.data
    return logits.reshape(len(list(offsets)), n_windows).mean(axis=1)


def _candidate_scores_callable(
    score_fn, utt: Utterance, q0: int, frame_length: int, config: EvalConfig, rate: int
) -> np.ndarray:
    n_windows = frame_length - WINDOW_FRAMES + 1
    scores = []
    for off in range(-config.half_window, config.half_window + 1):
        acc = 0.0
        for j in range(n_windows):
            v0 = q0 + j
            a0 = v0 + off
            acc += float(score_fn(
                utt.visual[v0:v0 + WINDOW_FRAMES],
                utt.audio[rate * a0: rate * (a0 + WINDOW_FRAMES)],
                off,
            ))
        scores.append(acc / n_windows)
    return np.asarray(scores)


def predict_offset(scores: np.ndarray, half_window: int) -> int:
    """Argmax with deterministic ties: smaller |offset| first, then negative."""
    offsets = np.arange(-half_window, half_window + 1)
    order = sorted(range(len(offsets)),
                   key=lambda i: (-scores[i], abs(offsets[i]), offsets[i]))
    return int(offsets[order[0]])


def retrieval_accuracy(
    model: Scorer,
    utterances: Sequence[Utterance],
    frame_length: int,
    config: EvalConfig,
    queries: Optional[list[tuple[int, int]]] = None,
    audio_rate: int = 4,
) -> float:
    """Fraction of queries whose predicted offset lands within tolerance."""
    config.validate()
    if frame_length < WINDOW_FRAMES:
        raise UsageError(f"frame_length must be >= {WINDOW_FRAMES}, got {frame_length}")
    if queries is None:
        queries, _ = select_queries(
            utterances, replace(config, frame_lengths=(frame_length,))
        )
    if not queries:
        raise UsageError("no valid retrieval queries; utterances too short")
    correct = 0
    for ui, q0 in queries:
        utt = utterances[ui]
        if isinstance(model, SyncModel):
            scores = _candidate_scores_model(model, utt, q0, frame_length, config)
        else:
            scores = _candidate_scores_callable(
                model, utt, q0, frame_length, config, audio_rate
            )
        if abs(predict_offset(scores, config.half_window)) <= config.tolerance:
            correct += 1
    return correct / len(queries)


def multi_length_eval(
    model: Scorer,
    utterances: Sequence[Utterance],
    config: EvalConfig,
    metadata: Optional[dict] = None,
    audio_rate: int = 4,
) -> EvalReport:
    """Retrieval accuracy at each configured length over one shared query set."""
    config.validate()
    queries, skipped = select_queries(utterances, config)
    if not queries:
        raise UsageError("no valid retrieval queries; utterances too short")
    accuracies = {}
    for n in config.frame_lengths:
        accuracies[n] = retrieval_accuracy(
            model, utterances, n, config, queries=queries, audio_rate=audio_rate
        )
    meta = {
        "eval_config": str(config),
        "n_queries": len(queries),
        "skipped_utterances": skipped,
    }
    if isinstance(model, SyncModel):
        meta["checkpoint_id"] = model.param_digest()[:16]
    if metadata:
        meta.update(metadata)
    return EvalReport(accuracies=accuracies, query_count=len(queries),
                      skipped_utterances=skipped, metadata=meta)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_KINDS = (
    "mtd_terms", "layer_sweep", "layer_sets", "temperature", "methods",
)

_SINGLE_LAYERS = tuple(
    f"{block.lower()}{layer}" for block in ("AV", "VA", "Fusion")
    for layer in range(1, 5)
)


def default_axis(kind: str) -> tuple:
    if kind == "mtd_terms":
        return ("bce", "mtd_wo_vr", "mtd_wo_cad", "mtd")
    if kind == "layer_sweep":
        return _SINGLE_LAYERS
    if kind == "layer_sets":
        return tuple(sorted(LAYER_SETS))
    if kind == "temperature":
        return (1.0, 5.0, 15.0, 25.0, 35.0)
    if kind == "methods":
        return ls.METHODS
    raise ConfigError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


@dataclass
class AblationSpec:
    kind: str
    axis: tuple = ()
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.axis:
            self.axis = default_axis(self.kind)
        if self.kind not in ABLATION_KINDS:
            raise ConfigError(f"unknown ablation kind {self.kind!r}")
        if not self.axis or not self.seeds:
            raise ConfigError("ablation needs a non-empty axis and seed list")


def distill_config_for(kind: str, value, base: DistillConfig) -> DistillConfig:
    """Realize one ablation cell as a distillation config."""
    if kind == "mtd_terms":
        flags = {
            "bce": None,
            "mtd_wo_vr": (True, False),
            "mtd_wo_cad": (False, True),
            "mtd": (True, True),
        }[value]
        if flags is None:
            return replace(base, method="bce_only")
        return replace(base, method="mtd", include_cad=flags[0], include_vr=flags[1])
    if kind == "layer_sweep":
        return replace(base, method="mtd", layer_set=ls.parse_layer_set(value))
    if kind == "layer_sets":
        return replace(base, method="mtd", layer_set=LAYER_SETS[value])
    if kind == "temperature":
        return replace(base, method="mtd", tau=float(value))
    if kind == "methods":
        return replace(base, method=value)
    raise ConfigError(f"unknown ablation kind {kind!r}")


@dataclass
class AblationRow:
    axis_value: str
    seed: int
    val_f1: float
    accuracies: dict[int, float]


def run_ablation(
    spec: AblationSpec,
    teacher: SyncModel,
    corpus: Corpus,
    student_config: ModelConfig,
    train_config: TrainConfig,
    eval_config: EvalConfig,
) -> list[AblationRow]:
    """One distillation + evaluation per (axis value, seed), plus axis means."""
    if teacher is None:
        raise UsageError("ablation needs a trained teacher")
    rows: list[AblationRow] = []
    for value in spec.axis:
        cell_rows = []
        for seed in spec.seeds:
            dcfg = distill_config_for(spec.kind, value, train_config.distill)
            tcfg = replace(train_config, seed=seed, distill=dcfg)
            student, history = tr.distill_student(teacher, corpus, student_config, tcfg)
            report = multi_length_eval(student, corpus.split("test"), eval_config)
            row = AblationRow(
                axis_value=str(value), seed=seed,
                val_f1=max((r.val_f1 for r in history), default=0.0),
                accuracies=report.accuracies,
            )
            cell_rows.append(row)
            rows.append(row)
        rows.append(AblationRow(
            axis_value=str(value), seed=-1,  # -1 marks the per-axis mean
            val_f1=float(np.mean([r.val_f1 for r in cell_rows])),
            accuracies={
                n: float(np.mean([r.accuracies[n] for r in cell_rows]))
                for n in eval_config.frame_lengths
            },
        ))
    return rows


# ---------------------------------------------------------------------------
# loss-tracking harness
# ---------------------------------------------------------------------------

TRACKABLE = ("last_fitnets", "sel_fitnets", "mtd")


def loss_tracking_run(
    optimize: str,
    teacher: SyncModel,
    corpus: Corpus,
    student_config: ModelConfig,
    train_config: TrainConfig,
    monitor_batches: int = 2,
    monitor_seed: int = 914,
) -> list[dict]:
    """Train under one objective while logging all three each epoch.

    The optimized objective trains normally (its regressors, if any,
    update); the other two are evaluated on a fixed validation sample
    without gradients.  Monitored regression bridges stay frozen at
    their seed initialization, so their trace reflects representation
    drift rather than bridge adaptation.
    """
    if optimize not in TRACKABLE:
        raise ConfigError(f"optimize must be one of {TRACKABLE}, got {optimize!r}")
    base = train_config.distill
    dcfg = replace(base, method=optimize)
    tcfg = replace(train_config, distill=dcfg)
    depth = student_config.layers_per_block
    mtd_tau = base.tau
    mtd_set = base.layer_set

    rng = np.random.default_rng(monitor_seed)
    batches = []
    for _ in range(monitor_batches):
        pairs = sample_batch(corpus.split("val"), train_config.batch_size, rng,
                             corpus.config)
        batches.append(batch_arrays(pairs))

    frozen = {
        mode: ls.make_regressors(
            ls.fitnets_layers(mode, depth), student_config.d_model,
            teacher.config.d_model, seed=monitor_seed,
        )
        for mode in ("last", "sel")
    }
    teacher_outs = []
    for visual, audio, _ in batches:
        with ag.no_grad():
            teacher_outs.append(
                model_forward(teacher, visual, audio, tau_trace=mtd_tau)
            )

    records: list[dict] = []

    def hook(epoch: int, student: SyncModel, live_regressors) -> None:
        sums = {"mtd": 0.0, "last_fitnets": 0.0, "sel_fitnets": 0.0}
        for (visual, audio, labels), t_out in zip(batches, teacher_outs):
            with ag.no_grad():
                s_out = model_forward(student, visual, audio, tau_trace=mtd_tau)
            mtd_term = ag.add(
                ls.cad_loss(s_out, t_out, mtd_set, mtd_tau),
                ls.vr_loss(s_out, t_out, mtd_set, mtd_tau),
            )
            sums["mtd"] += float(mtd_term.data)
            for mode, key in (("last", "last_fitnets"), ("sel", "sel_fitnets")):
                regs = frozen[mode]
                if live_regressors is not None and optimize == key:
                    regs = live_regressors
                fit = ls.fitnets_loss(s_out, t_out, mode, regs, labels)
                sums[key] += float(fit.aux.data)
        records.append(
            {"epoch": epoch} | {k: v / len(batches) for k, v in sums.items()}
        )

    tr.distill_student(teacher, corpus, student_config, tcfg, epoch_hook=hook)
    return records
