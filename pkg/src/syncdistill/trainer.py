"""Training loops: teacher supervision, student distillation, checkpoints.

One engine drives both entry points.  Teacher training is the
degenerate case with no teacher model and the plain task loss; student
distillation adds a gradient-free teacher forward per batch and the
configured objective.  The learning rate warms up linearly, then steps
down by a fixed multiplier on a fixed epoch period, and the parameters
kept are those of the best validation-F1 epoch.
"""

from __future__ import annotations

import hashlib
import io
import struct
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from . import losses as ls
from .autograd import Tensor
from .data import Corpus, CorpusConfig, batch_arrays, sample_batch
from .errors import ConfigError, DataFormatError, NumericalAbort, UsageError
from .losses import DistillConfig
from .model import ModelConfig, SyncModel, init_model, model_forward

CKPT_MAGIC = b"MTDCKPT1"
CKPT_VERSION = 1

_BATCH_SALT = 101
_VAL_SALT = 202


@dataclass
class TrainConfig:
    epochs: int = 80
    warmup_epochs: int = 10
    lr0: float = 5e-5
    decay_mult: float = 0.8
    decay_every: int = 20
    batch_size: int = 32
    batches_per_epoch: int = 50
    val_batches: int = 8
    warmup_form: str = "linear"  # "constant" holds lr0 through the warmup phase
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs > 0 and not 0 < self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"need 0 < warmup_epochs < epochs, got {self.warmup_epochs} vs {self.epochs}"
            )
        if not 0 < self.decay_mult <= 1:
            raise ConfigError(f"decay_mult must lie in (0, 1], got {self.decay_mult}")
        if self.decay_every <= 0:
            raise ConfigError(f"decay_every must be positive, got {self.decay_every}")
        if self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even, got {self.batch_size}")
        if self.warmup_form not in ("linear", "constant"):
            raise ConfigError(f"unknown warmup_form {self.warmup_form!r}")
        self.distill.validate()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    bce: float
    cad: float
    vr: float
    aux: float
    total: float
    val_f1: float
    wall_time: float


TrainHistory = list  # of EpochRecord


def history_summary(history: TrainHistory) -> list[tuple]:
    """History rows minus wall time, for determinism comparisons."""
    return [
        (r.epoch, r.lr, r.bce, r.cad, r.vr, r.aux, r.total, r.val_f1)
        for r in history
    ]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to lr0, then stepwise decay every decay_every epochs."""
    if not 0 <= epoch < config.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        if config.warmup_form == "constant":
            return config.lr0
        return config.lr0 * (epoch + 1) / config.warmup_epochs
    steps = (epoch - config.warmup_epochs) // config.decay_every
    return config.lr0 * config.decay_mult ** steps


class Adam:
    """Adaptive moment optimizer (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def validate_f1(
    model,
    utterances,
    corpus_config: CorpusConfig,
    n_batches: int,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> float:
    """Binary F1 over equally-sampled pairs; positive iff sigmoid(logit) > 0.5.

    ``model`` may be a SyncModel or a callable mapping a list of AVPairs
    to a logit array (used by scoring oracles in tests).
    """
    tp = fp = fn = 0
    for _ in range(n_batches):
        pairs = sample_batch(utterances, batch_size, rng, corpus_config)
        logits = _score_pairs(model, pairs)
        labels = np.array([p.label for p in pairs])
        preds = logits > 0.0
        tp += int(np.sum(preds & (labels == 1)))
        fp += int(np.sum(preds & (labels == 0)))
        fn += int(np.sum(~preds & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def _score_pairs(model, pairs) -> np.ndarray:
    if isinstance(model, SyncModel):
        visual, audio, _ = batch_arrays(pairs)
        with ag.no_grad():
            out = model_forward(model, visual, audio, want_traces=False)
        return np.atleast_1d(out.logit.data)
    return np.asarray(model(pairs), dtype=np.float64)


def train_teacher(
    corpus: Corpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path=None,
) -> tuple[SyncModel, TrainHistory]:
    """Supervised training with the plain task loss."""
    cfg = replace(train_config, distill=DistillConfig(method="bce_only"))
    return _run_training(model_config, corpus, cfg, teacher=None,
                         checkpoint_path=checkpoint_path)


def distill_student(
    teacher: SyncModel,
    corpus: Corpus,
    student_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path=None,
    epoch_hook: Optional[Callable] = None,
) -> tuple[SyncModel, TrainHistory]:
    """Train a student against a frozen teacher under the configured method."""
    method = train_config.distill.method
    t_cfg, s_cfg = teacher.config, student_config
    for name in ("d_visual_in", "d_audio_in", "audio_rate"):
        if getattr(t_cfg, name) != getattr(s_cfg, name):
            raise ConfigError(
                f"teacher/student {name} mismatch: "
                f"{getattr(t_cfg, name)} vs {getattr(s_cfg, name)}"
            )
    if ls.method_needs_traces(method):
        if t_cfg.n_heads != s_cfg.n_heads:
            raise ConfigError(
                f"trace matching needs equal head counts, got "
                f"{t_cfg.n_heads} vs {s_cfg.n_heads}"
            )
        if t_cfg.layers_per_block != s_cfg.layers_per_block:
            raise ConfigError(
                f"trace matching needs equal depths, got "
                f"{t_cfg.layers_per_block} vs {s_cfg.layers_per_block}"
            )
    before = teacher.param_digest()
    result = _run_training(student_config, corpus, train_config, teacher=teacher,
                           checkpoint_path=checkpoint_path, epoch_hook=epoch_hook)
    if teacher.param_digest() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return result


def _run_training(
    model_config: ModelConfig,
    corpus: Corpus,
    train_config: TrainConfig,
    teacher: Optional[SyncModel],
    checkpoint_path=None,
    epoch_hook: Optional[Callable] = None,
) -> tuple[SyncModel, TrainHistory]:
    train_config.validate()
    dcfg = train_config.distill
    method = dcfg.method
    model = init_model(model_config)

    trainable = dict(model.trainable())
    regressors = None
    if method in ("last_fitnets", "sel_fitnets"):
        if teacher is None:
            raise UsageError(f"method {method!r} needs a teacher")
        mode = "last" if method == "last_fitnets" else "sel"
        specs = ls.fitnets_layers(mode, model_config.layers_per_block)
        regressors = ls.make_regressors(
            specs, model_config.d_model, teacher.config.d_model,
            seed=train_config.seed,
        )
        for spec, reg in regressors.items():
            trainable[f"_regressor.{spec}.w"] = reg.w
            trainable[f"_regressor.{spec}.b"] = reg.b

    adam = Adam(trainable)
    batch_rng = np.random.default_rng(
        np.random.SeedSequence([train_config.seed, _BATCH_SALT])
    )
    tau = ls.trace_tau_for(dcfg)
    want_traces = ls.method_needs_traces(method)
    needs_teacher = ls.method_needs_teacher(method) and teacher is not None

    history: TrainHistory = []
    best_f1 = -1.0
    best_values: Optional[dict[str, np.ndarray]] = None

    for epoch in range(train_config.epochs):
        t_start = time.perf_counter()
        lr = lr_schedule(epoch, train_config)
        sums = dict.fromkeys(("bce", "cad", "vr", "aux", "total"), 0.0)
        for batch_idx in range(train_config.batches_per_epoch):
            pairs = sample_batch(corpus.split("train"), train_config.batch_size,
                                 batch_rng, corpus.config)
            visual, audio, labels = batch_arrays(pairs)
            s_out = model_forward(model, visual, audio, tau_trace=tau,
                                  want_traces=want_traces)
            t_out = None
            if needs_teacher:
                with ag.no_grad():
                    t_out = model_forward(teacher, visual, audio, tau_trace=tau,
                                          want_traces=want_traces)
            breakdown = ls.method_loss(dcfg, s_out, t_out, labels, regressors)
            total = float(breakdown.total.data)
            if not np.isfinite(total):
                raise NumericalAbort(
                    f"non-finite loss {total} at epoch {epoch}, batch {batch_idx}"
                )
            breakdown.total.backward()
            adam.step(lr)
            adam.zero_grad()
            for key, value in breakdown.values().items():
                sums[key] += value

        val_rng = np.random.default_rng(
            np.random.SeedSequence([train_config.seed, _VAL_SALT])
        )
        f1 = validate_f1(model, corpus.split("val"), corpus.config,
                         train_config.val_batches, val_rng,
                         train_config.batch_size)
        n = train_config.batches_per_epoch
        record = EpochRecord(
            epoch=epoch, lr=lr,
            bce=sums["bce"] / n, cad=sums["cad"] / n, vr=sums["vr"] / n,
            aux=sums["aux"] / n, total=sums["total"] / n,
            val_f1=f1, wall_time=time.perf_counter() - t_start,
        )
        history.append(record)
        if f1 > best_f1:
            best_f1 = f1
            best_values = {k: v.data.copy() for k, v in model.params.items()}
            if checkpoint_path is not None:
                save_checkpoint(model, {
                    "epoch": epoch,
                    "val_f1": f1,
                    "rng_digest": _rng_digest(batch_rng),
                }, checkpoint_path)
        if epoch_hook is not None:
            epoch_hook(epoch, model, regressors)

    if best_values is not None:
        model.load_values(best_values)
    return model, history


def _rng_digest(rng: np.random.Generator) -> str:
    state = repr(rng.bit_generator.state).encode()
    return hashlib.sha256(state).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(model: SyncModel, meta: dict, path) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    lines = [f"model.{f.name} = {getattr(model.config, f.name)}"
             for f in fields(ModelConfig)]
    lines += [f"{k} = {v}" for k, v in sorted(meta.items())]
    text = "\n".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name in sorted(model.params):
        arr = model.params[name].data
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    at = 0

    def take(n):
        nonlocal at
        if at + n > len(blob):
            raise DataFormatError(
                f"truncated checkpoint: needed {n} bytes at byte {at}"
            )
        out = blob[at:at + n]
        at += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    magic = take(8)
    if magic != CKPT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}; not a checkpoint file")
    version = u32()
    if version != CKPT_VERSION:
        raise DataFormatError(
            f"unsupported checkpoint version {version}; this build reads {CKPT_VERSION}"
        )
    meta: dict[str, str] = {}
    for line in take(u32()).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    arrays: dict[str, np.ndarray] = {}
    while at < len(blob):
        name = take(u32()).decode("utf-8")
        ndim = u32()
        if ndim > 8:
            raise DataFormatError(f"implausible tensor rank {ndim} at byte {at - 4}")
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = take(count * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return meta, arrays


def read_checkpoint_meta(path) -> dict[str, str]:
    meta, _ = _read_checkpoint(path)
    return meta


def load_checkpoint(path) -> SyncModel:
    """Rebuild a model from a checkpoint (32-bit storage, 64-bit in memory)."""
    meta, arrays = _read_checkpoint(path)
    kwargs = {}
    for f in fields(ModelConfig):
        raw = meta.get(f"model.{f.name}")
        if raw is None:
            raise DataFormatError(f"checkpoint metadata is missing model.{f.name}")
        kwargs[f.name] = int(raw)
    config = ModelConfig(**kwargs)
    model = init_model(config)
    if set(arrays) != set(model.params):
        missing = set(model.params) ^ set(arrays)
        raise DataFormatError(f"checkpoint tensor names do not match config: {sorted(missing)[:4]}")
    for name, arr in arrays.items():
        expected = model.params[name].shape
        if arr.shape != expected:
            raise DataFormatError(
                f"checkpoint tensor {name}: shape {arr.shape}, config wants {expected}"
            )
        model.params[name].data = arr.astype(np.float64)
    return model
