"""Cross-modal transformer synchronizer with attention-behavior tracing.

Three cross-attention blocks connect the two modalities: the AV block
queries with audio against visual keys/values, the VA block reverses the
roles, and the Fusion block queries the AV output against the VA output.
The Fusion output is max-pooled over time, squashed with tanh, and fed
to an affine head that emits a single sync logit.

Every attention layer also records, per head, two row-stochastic
matrices recomputed at a caller-chosen softening temperature: the
cross-attention distribution (query-key softmax) and the value-relation
matrix (value-value softmax).  Distillation losses consume these traces.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

BLOCKS = ("AV", "VA", "Fusion")
POS_ENC_MAX_LEN = 256


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int = 4
    layers_per_block: int = 4
    ffn_mult: int = 2
    d_visual_in: int = 32
    d_audio_in: int = 20
    audio_rate: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "layers_per_block", "ffn_mult",
                     "d_visual_in", "d_audio_in", "audio_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


def teacher_profile(**overrides) -> ModelConfig:
    """Desk-scale teacher width (mirrors the 512-wide full-scale profile)."""
    return replace(ModelConfig(d_model=64, seed=1), **overrides)


def student_profile(**overrides) -> ModelConfig:
    """Desk-scale student width (mirrors the 200-wide full-scale profile)."""
    return replace(ModelConfig(d_model=24, seed=2), **overrides)


def full_scale_profile(role: str) -> ModelConfig:
    """The literal 512/200-wide profiles; used for parameter counting only."""
    if role == "teacher":
        return ModelConfig(d_model=512)
    if role == "student":
        return ModelConfig(d_model=200)
    raise ConfigError(f"unknown profile role {role!r}")


@dataclass
class AttentionTrace:
    block: str
    layer: int          # 1-based
    head: int           # 1-based
    cad: Tensor         # (..., Tq, Tk), rows sum to 1
    vr: Tensor          # (..., Tk, Tk), rows sum to 1
    tau_used: float


@dataclass
class ForwardOutput:
    logit: Tensor                                  # scalar, or (B,) when batched
    traces: list[AttentionTrace]
    block_outputs: dict[tuple[str, int], Tensor]   # (block, layer) -> representation
    pooled: Tensor                                 # (..., d_model), post pool + tanh


@dataclass
class SyncModel:
    config: ModelConfig
    params: dict[str, Tensor]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "SyncModel":
        cloned = {}
        for name, t in self.params.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            cloned[name] = c
        return SyncModel(config=self.config, params=cloned)

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self.params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def param_digest(self) -> str:
        """SHA-256 over all parameter bytes, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def param_spec(config: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """Ordered (name, kind, shape) triples for every parameter of a config.

    Kinds: "weight" (scaled-uniform draw), "bias" (zeros), "gain" (ones),
    "pos" (fixed sinusoidal table, not trainable).
    """
    d = config.d_model
    spec: list[tuple[str, str, tuple[int, ...]]] = []

    def norm(prefix: str) -> None:
        spec.append((f"{prefix}.g", "gain", (d,)))
        spec.append((f"{prefix}.b", "bias", (d,)))

    for stem, d_in in (("vis_fe", config.d_visual_in), ("aud_fe", config.d_audio_in)):
        spec.append((f"{stem}.l1.w", "weight", (d_in, d)))
        spec.append((f"{stem}.l1.b", "bias", (d,)))
        spec.append((f"{stem}.l2.w", "weight", (d, d)))
        spec.append((f"{stem}.l2.b", "bias", (d,)))
        spec.append((f"{stem}.pos", "pos", (POS_ENC_MAX_LEN, d)))

    for block in BLOCKS:
        stem = block.lower()
        for layer in range(1, config.layers_per_block + 1):
            lp = f"{stem}.{layer}"
            norm(f"{lp}.ln_q")
            norm(f"{lp}.ln_kv")
            for proj in ("q", "k", "v", "o"):
                spec.append((f"{lp}.attn.w{proj}", "weight", (d, d)))
                spec.append((f"{lp}.attn.b{proj}", "bias", (d,)))
            norm(f"{lp}.ln_f")
            spec.append((f"{lp}.ffn.w1", "weight", (d, config.ffn_mult * d)))
            spec.append((f"{lp}.ffn.b1", "bias", (config.ffn_mult * d,)))
            spec.append((f"{lp}.ffn.w2", "weight", (config.ffn_mult * d, d)))
            spec.append((f"{lp}.ffn.b2", "bias", (d,)))
        norm(f"{stem}.ln_out")

    spec.append(("head.w", "weight", (d, 1)))
    spec.append(("head.b", "bias", (1,)))
    return spec


def init_model(config: ModelConfig) -> SyncModel:
    """Build a model with scaled-uniform weights (bound 1/sqrt(fan_in)).

    Biases start at zero and layer-norm gains at one; the positional
    tables are fixed sinusoids and never receive gradients.  Parameter
    creation order is fixed, so one seed reproduces bit-identical maps.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, kind, shape in param_spec(config):
        if kind == "weight":
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        elif kind == "bias":
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif kind == "gain":
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        else:
            params[name] = Tensor(sinusoidal_encoding(shape[0], shape[1]))
    return SyncModel(config=config, params=params)


def count_params_for_config(config: ModelConfig, scope: str = "all") -> int:
    """Element count from shapes alone; nothing is allocated."""
    if scope not in ("all", "backend_only"):
        raise ConfigError(f"unknown scope {scope!r}")
    total = 0
    for name, _, shape in param_spec(config):
        if scope == "backend_only" and name.startswith(("vis_fe.", "aud_fe.")):
            continue
        total += int(np.prod(shape))
    return total


def cross_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    layer_params: dict[str, Tensor],
    tau_trace: float,
    n_heads: int,
    block: str = "",
    layer: int = 0,
    want_traces: bool = True,
) -> tuple[Tensor, list[AttentionTrace]]:
    """Multi-head cross-attention plus per-head behavior traces.

    The forward signal always uses softening 1; ``tau_trace`` only
    affects the recorded trace matrices.  Residuals and normalization
    are the caller's job.
    """
    d = query_seq.shape[-1]
    if kv_seq.shape[-1] != d:
        raise ShapeError(
            f"query width {query_seq.shape} does not match key/value width {kv_seq.shape}"
        )
    if d % n_heads != 0:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    scale = math.sqrt(d_head)

    q = ag.affine(query_seq, layer_params["wq"], layer_params["bq"])
    k = ag.affine(kv_seq, layer_params["wk"], layer_params["bk"])
    v = ag.affine(kv_seq, layer_params["wv"], layer_params["bv"])

    def split_heads(t: Tensor) -> Tensor:
        # (..., T, d) -> (..., H, T, d_head); head h owns columns [h*d_head, (h+1)*d_head)
        parts = t.shape[:-1] + (n_heads, d_head)
        return ag.swap_axes(ag.reshape(t, parts), -3, -2)

    qh = split_heads(q)
    kh = split_heads(k)
    vh = split_heads(v)
    scores = ag.matmul(qh, ag.transpose(kh))          # (..., H, Tq, Tk)
    attn = ag.softmax_rows(scores, tau=1.0, scl=scale)
    ctx = ag.matmul(attn, vh)                         # (..., H, Tq, d_head)
    merged = ag.reshape(ag.swap_axes(ctx, -3, -2), q.shape)
    out = ag.affine(merged, layer_params["wo"], layer_params["bo"])

    traces: list[AttentionTrace] = []
    if want_traces:
        cad_stack = ag.softmax_rows(scores, tau=tau_trace, scl=scale)
        vr_stack = ag.softmax_rows(ag.matmul(vh, ag.transpose(vh)), tau=tau_trace, scl=scale)
        for h in range(n_heads):
            traces.append(
                AttentionTrace(
                    block=block, layer=layer, head=h + 1,
                    cad=ag.take_axis(cad_stack, h, -3),
                    vr=ag.take_axis(vr_stack, h, -3),
                    tau_used=float(tau_trace),
                )
            )
    return out, traces


def _layer_params(params: dict[str, Tensor], block: str, layer: int) -> dict[str, Tensor]:
    lp = f"{block.lower()}.{layer}"
    return {
        "wq": params[f"{lp}.attn.wq"], "bq": params[f"{lp}.attn.bq"],
        "wk": params[f"{lp}.attn.wk"], "bk": params[f"{lp}.attn.bk"],
        "wv": params[f"{lp}.attn.wv"], "bv": params[f"{lp}.attn.bv"],
        "wo": params[f"{lp}.attn.wo"], "bo": params[f"{lp}.attn.bo"],
    }


def _block_forward(
    model: SyncModel,
    block: str,
    x: Tensor,
    mem: Tensor,
    tau_trace: float,
    traces: list[AttentionTrace],
    block_outputs: dict[tuple[str, int], Tensor],
    want_traces: bool,
) -> Tensor:
    p = model.params
    stem = block.lower()
    for layer in range(1, model.config.layers_per_block + 1):
        lp = f"{stem}.{layer}"
        qn = ag.layer_norm(x, p[f"{lp}.ln_q.g"], p[f"{lp}.ln_q.b"])
        mn = ag.layer_norm(mem, p[f"{lp}.ln_kv.g"], p[f"{lp}.ln_kv.b"])
        att, layer_traces = cross_attention(
            qn, mn, _layer_params(p, block, layer), tau_trace,
            model.config.n_heads, block=block, layer=layer, want_traces=want_traces,
        )
        x = ag.add(x, att)
        fn = ag.layer_norm(x, p[f"{lp}.ln_f.g"], p[f"{lp}.ln_f.b"])
        h = ag.affine(fn, p[f"{lp}.ffn.w1"], p[f"{lp}.ffn.b1"])
        h = ag.affine(ag.relu(h), p[f"{lp}.ffn.w2"], p[f"{lp}.ffn.b2"])
        x = ag.add(x, h)
        traces.extend(layer_traces)
        block_outputs[(block, layer)] = x
    return ag.layer_norm(x, p[f"{stem}.ln_out.g"], p[f"{stem}.ln_out.b"])


def _frontend(model: SyncModel, x: Tensor, stem: str) -> Tensor:
    p = model.params
    t = x.shape[-2]
    if t > POS_ENC_MAX_LEN:
        raise ShapeError(
            f"sequence length {t} exceeds positional table length {POS_ENC_MAX_LEN}"
        )
    h = ag.affine(x, p[f"{stem}.l1.w"], p[f"{stem}.l1.b"])
    h = ag.affine(ag.relu(h), p[f"{stem}.l2.w"], p[f"{stem}.l2.b"])
    pos = Tensor(p[f"{stem}.pos"].data[:t])
    return ag.add(h, pos)


def model_forward(
    model: SyncModel,
    visual,
    audio,
    tau_trace: float = 1.0,
    want_traces: bool = True,
) -> ForwardOutput:
    """Run the synchronizer on one (or a batch of) audio-visual pairs.

    ``visual`` is (..., Tv, d_visual_in) and ``audio`` must be
    (..., audio_rate * Tv, d_audio_in) with matching leading axes.
    """
    cfg = model.config
    visual = visual if isinstance(visual, Tensor) else Tensor(visual)
    audio = audio if isinstance(audio, Tensor) else Tensor(audio)
    if visual.shape[-1] != cfg.d_visual_in:
        raise ShapeError(
            f"visual feature width: expected {cfg.d_visual_in}, got {visual.shape}"
        )
    if audio.shape[-1] != cfg.d_audio_in:
        raise ShapeError(
            f"audio feature width: expected {cfg.d_audio_in}, got {audio.shape}"
        )
    tv, ta = visual.shape[-2], audio.shape[-2]
    if ta != cfg.audio_rate * tv:
        raise ShapeError(
            f"audio length: expected {cfg.audio_rate * tv} (= {cfg.audio_rate} x {tv}), got {ta}"
        )

    vis = _frontend(model, visual, "vis_fe")
    aud = _frontend(model, audio, "aud_fe")

    traces: list[AttentionTrace] = []
    block_outputs: dict[tuple[str, int], Tensor] = {}
    av_out = _block_forward(model, "AV", aud, vis, tau_trace, traces, block_outputs, want_traces)
    va_out = _block_forward(model, "VA", vis, aud, tau_trace, traces, block_outputs, want_traces)
    fu_out = _block_forward(model, "Fusion", av_out, va_out, tau_trace, traces, block_outputs, want_traces)

    pooled = ag.tanh(ag.max_pool_time(fu_out))
    raw_logit = ag.affine(pooled, model.params["head.w"], model.params["head.b"])
    logit = ag.reshape(raw_logit, raw_logit.shape[:-1])
    return ForwardOutput(logit=logit, traces=traces, block_outputs=block_outputs, pooled=pooled)


def param_count(model: SyncModel, scope: str = "all") -> int:
    """Total element count of the parameter map, optionally back-end only."""
    return count_params(model.params, scope)


def count_params(params: dict[str, Tensor], scope: str = "all") -> int:
    if scope not in ("all", "backend_only"):
        raise ConfigError(f"unknown scope {scope!r}")
    total = 0
    for name, t in params.items():
        if scope == "backend_only" and name.startswith(("vis_fe.", "aud_fe.")):
            continue
        total += t.size
    return total
