"""Distillation objectives over teacher/student forward outputs.

The main objective sums the sync task's binary cross entropy with two
temperature-scaled KL terms that pull the student's per-layer attention
behavior (cross-attention distributions and value relations) toward the
teacher's.  Five baseline objectives are implemented alongside it:
plain task loss, soft-target matching on the output logit, relational
matching of pooled embeddings, and representation regression at either
the last layer of each block or a selected layer set.

All functions return graph-attached scalars; teacher quantities are
always detached, so gradients only ever reach student (and regressor)
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, UsageError
from .model import BLOCKS, AttentionTrace, ForwardOutput

METHODS = (
    "bce_only", "kd", "rkd", "minilm_star", "last_fitnets", "sel_fitnets", "mtd",
)


@dataclass(frozen=True)
class LayerSpec:
    block: str
    layer: int

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ConfigError(f"unknown block {self.block!r}; expected one of {BLOCKS}")
        if not 1 <= self.layer <= 4:
            raise ConfigError(f"layer must lie in 1..4, got {self.layer}")

    def __str__(self) -> str:
        return f"{self.block.lower()}{self.layer}"


LAYER_SETS: dict[str, tuple[LayerSpec, ...]] = {
    "S1": (LayerSpec("Fusion", 3),),
    "S2": (LayerSpec("AV", 4),),
    "S3": (LayerSpec("VA", 1),),
    "S4": (LayerSpec("Fusion", 3), LayerSpec("AV", 4)),
    "S5": (LayerSpec("Fusion", 3), LayerSpec("VA", 1)),
    "S6": (LayerSpec("AV", 4), LayerSpec("VA", 1)),
    "S7": (LayerSpec("Fusion", 3), LayerSpec("Fusion", 4), LayerSpec("AV", 4)),
    "S8": (LayerSpec("Fusion", 3), LayerSpec("AV", 4), LayerSpec("VA", 1)),
}
DEFAULT_LAYER_SET = LAYER_SETS["S8"]


def parse_layer_set(text: str) -> tuple[LayerSpec, ...]:
    """Parse "fusion3,av4,va1" into layer specs."""
    names = {"av": "AV", "va": "VA", "fusion": "Fusion"}
    specs = []
    for token in text.split(","):
        token = token.strip().lower()
        stem = token.rstrip("0123456789")
        digits = token[len(stem):]
        if stem not in names or not digits:
            raise ConfigError(f"cannot parse layer spec {token!r} (want e.g. fusion3)")
        specs.append(LayerSpec(names[stem], int(digits)))
    return tuple(specs)


@dataclass
class DistillConfig:
    method: str = "mtd"
    layer_set: tuple[LayerSpec, ...] = DEFAULT_LAYER_SET
    tau: float = 25.0
    include_cad: bool = True
    include_vr: bool = True
    reverse_kl: bool = False  # swap KL argument order (default: student first)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.method in ("mtd", "sel_fitnets") and not self.layer_set:
            raise ConfigError(f"method {self.method!r} needs a non-empty layer set")


@dataclass
class LossBreakdown:
    bce: Tensor
    cad: Tensor
    vr: Tensor
    aux: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data)
                for k in ("bce", "cad", "vr", "aux", "total")}


def _zero() -> Tensor:
    return Tensor(0.0)


def _assemble(bce: Tensor, cad: Tensor, vr: Tensor, aux: Tensor) -> LossBreakdown:
    total = ag.add(ag.add(ag.add(bce, cad), vr), aux)
    return LossBreakdown(bce=bce, cad=cad, vr=vr, aux=aux, total=total)


# ---------------------------------------------------------------------------
# task loss
# ---------------------------------------------------------------------------

def bce_loss(logit, label) -> Tensor:
    """Mean binary cross entropy on sigmoid(logit), in softplus form.

    ``softplus(x) - y*x`` avoids exp overflow, so logits up to ~1e3 in
    magnitude stay finite.  Accepts a scalar or a batch of logits with
    matching labels.
    """
    logit = logit if isinstance(logit, Tensor) else Tensor(logit)
    y = Tensor(np.asarray(label, dtype=np.float64))
    per = ag.sub(ag.softplus(logit), ag.mul(logit, y))
    return ag.tensor_mean(per)


# ---------------------------------------------------------------------------
# attention-behavior KL terms
# ---------------------------------------------------------------------------

def _trace_index(out: ForwardOutput) -> dict[tuple[str, int], list[AttentionTrace]]:
    idx: dict[tuple[str, int], list[AttentionTrace]] = {}
    for tr in out.traces:
        idx.setdefault((tr.block, tr.layer), []).append(tr)
    for heads in idx.values():
        heads.sort(key=lambda t: t.head)
    return idx


def _behavior_kl(
    student: ForwardOutput,
    teacher: ForwardOutput,
    layer_set: Sequence[LayerSpec],
    tau: float,
    attr: str,
    reverse: bool = False,
) -> Tensor:
    s_idx = _trace_index(student)
    t_idx = _trace_index(teacher)
    total = _zero()
    for spec in layer_set:
        key = (spec.block, spec.layer)
        if key not in s_idx or key not in t_idx:
            raise ConfigError(f"no trace recorded for layer {spec}")
        s_heads, t_heads = s_idx[key], t_idx[key]
        if len(s_heads) != len(t_heads):
            raise ConfigError(
                f"head count mismatch at {spec}: student {len(s_heads)}, teacher {len(t_heads)}"
            )
        head_sum = _zero()
        for st, tt in zip(s_heads, t_heads):
            if st.tau_used != tau or tt.tau_used != tau:
                raise ConfigError(
                    f"trace at {spec} was captured at tau "
                    f"{st.tau_used}/{tt.tau_used}, loss wants {tau}"
                )
            p = getattr(st, attr)
            q = getattr(tt, attr)
            q = q.detach() if q.requires_grad else q
            term = ag.kl_div_rows(q, p) if reverse else ag.kl_div_rows(p, q)
            head_sum = ag.add(head_sum, term)
        layer_term = ag.scale(head_sum, (tau * tau) / len(s_heads))
        total = ag.add(total, layer_term)
    return total


def cad_loss(student, teacher, layer_set=DEFAULT_LAYER_SET, tau: float = 25.0,
             reverse: bool = False) -> Tensor:
    """Layer-summed tau^2-scaled KL between cross-attention distributions.

    Per layer the KL is averaged over heads and query rows (student
    distribution first unless ``reverse``); layers add up.
    """
    return _behavior_kl(student, teacher, layer_set, tau, "cad", reverse)


def vr_loss(student, teacher, layer_set=DEFAULT_LAYER_SET, tau: float = 25.0,
            reverse: bool = False) -> Tensor:
    """As cad_loss but over the value-relation matrices."""
    return _behavior_kl(student, teacher, layer_set, tau, "vr", reverse)


def mtd_loss(student, teacher, label, config: DistillConfig) -> LossBreakdown:
    """Task loss plus the enabled attention-behavior terms."""
    if config.method != "mtd":
        raise ConfigError(f"mtd_loss called with method {config.method!r}")
    config.validate()
    bce = bce_loss(student.logit, label)
    cad = (
        cad_loss(student, teacher, config.layer_set, config.tau, config.reverse_kl)
        if config.include_cad else _zero()
    )
    vr = (
        vr_loss(student, teacher, config.layer_set, config.tau, config.reverse_kl)
        if config.include_vr else _zero()
    )
    return _assemble(bce, cad, vr, _zero())


# ---------------------------------------------------------------------------
# baseline: soft-target matching on the output logit
# ---------------------------------------------------------------------------

def kd_loss(student_logit, teacher_logit, label, tau: float = 1.0) -> LossBreakdown:
    """Temperature-softened Bernoulli KL(teacher || student) plus task loss.

    Both logits are divided by tau before the sigmoid and the KL is
    scaled by tau^2.  The teacher side is a constant; the computation
    uses softplus identities, so saturated logits stay finite.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    student_logit = (
        student_logit if isinstance(student_logit, Tensor) else Tensor(student_logit)
    )
    t_raw = teacher_logit.data if isinstance(teacher_logit, Tensor) else teacher_logit
    x_t = np.asarray(t_raw, dtype=np.float64) / tau
    t_prob = _sigmoid(x_t)
    # entropy of the teacher's soft target: -t ln t - (1-t) ln(1-t),
    # with ln t = -softplus(-x) and ln(1-t) = -softplus(x)
    entropy = t_prob * _softplus(-x_t) + (1.0 - t_prob) * _softplus(x_t)

    s_scaled = ag.scale(student_logit, 1.0 / tau)
    cross = ag.add(
        ag.mul(Tensor(t_prob), ag.softplus(ag.neg(s_scaled))),
        ag.mul(Tensor(1.0 - t_prob), ag.softplus(s_scaled)),
    )
    aux = ag.scale(ag.tensor_mean(ag.sub(cross, Tensor(entropy))), tau * tau)
    bce = bce_loss(student_logit, label)
    return _assemble(bce, _zero(), _zero(), aux)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return ag._sigmoid_np(np.asarray(x, dtype=np.float64))


def _softplus(x: np.ndarray) -> np.ndarray:
    return ag._softplus_np(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# baseline: relational matching of pooled embeddings
# ---------------------------------------------------------------------------

RKD_ANGLE_WEIGHT = 2.0  # distance:angle weighting 1:2
RKD_EPS = 1e-12


def relational_aux(student_emb: Tensor, teacher_emb: np.ndarray) -> Tensor:
    """Distance-wise plus angle-wise Huber terms over a batch of embeddings.

    ``student_emb`` is (B, d_s) and stays in the graph; ``teacher_emb``
    is a constant (B, d_t) array.  Distances are normalized by their
    batch mean, so the term only compares relative geometry; widths may
    differ between the two sides.
    """
    b = student_emb.shape[0]
    if b < 3:
        raise UsageError(f"relational loss needs at least 3 samples, got {b}")

    off_diag = 1.0 - np.eye(b)
    n_pairs = b * (b - 1)

    def np_side(e: np.ndarray):
        diffs = e[:, None, :] - e[None, :, :]
        dist = np.sqrt((diffs * diffs).sum(axis=-1) + RKD_EPS)
        mu = (dist * off_diag).sum() / n_pairs
        psi = dist / mu
        unit = diffs / dist[:, :, None]
        cos = np.einsum("ijd,kjd->ijk", unit, unit)
        return psi, cos

    psi_t, cos_t = np_side(np.asarray(teacher_emb, dtype=np.float64))

    diffs = ag.sub(
        ag.reshape(student_emb, (b, 1, -1)), ag.reshape(student_emb, (1, b, -1))
    )
    sq = ag.tensor_sum(ag.mul(diffs, diffs), axis=-1)
    dist = ag.sqrt(ag.add(sq, Tensor(RKD_EPS)))
    mask = Tensor(off_diag)
    mu = ag.scale(ag.tensor_sum(ag.mul(dist, mask)), 1.0 / n_pairs)
    psi = ag.div(dist, mu)
    dist_term = ag.scale(
        ag.tensor_sum(ag.mul(ag.huber(ag.sub(psi, Tensor(psi_t))), mask)),
        1.0 / n_pairs,
    )

    unit = ag.div(diffs, ag.reshape(dist, (b, b, 1)))
    by_vertex = ag.swap_axes(unit, 0, 1)                    # (j, i, d)
    cos_jik = ag.matmul(by_vertex, ag.transpose(by_vertex))  # (j, i, k)
    cos = ag.swap_axes(cos_jik, 0, 1)                        # (i, j, k)

    idx = np.arange(b)
    tri = (
        (idx[:, None, None] != idx[None, :, None])
        & (idx[None, :, None] != idx[None, None, :])
        & (idx[:, None, None] != idx[None, None, :])
    ).astype(np.float64)
    n_tri = tri.sum()
    angle_term = ag.scale(
        ag.tensor_sum(ag.mul(ag.huber(ag.sub(cos, Tensor(cos_t))), Tensor(tri))),
        1.0 / n_tri,
    )
    return ag.add(dist_term, ag.scale(angle_term, RKD_ANGLE_WEIGHT))


def rkd_loss(student, teacher, batch_mates, label) -> LossBreakdown:
    """Relational baseline over the pooled embeddings of a sample batch.

    ``batch_mates`` holds further (student, teacher) forward-output
    pairs from the same batch; together with the lead pair there must
    be at least 3 samples.  Task loss is taken on the lead sample.
    """
    s_outs = [student] + [p[0] for p in batch_mates]
    t_outs = [teacher] + [p[1] for p in batch_mates]
    if len(s_outs) < 3:
        raise UsageError(f"relational loss needs at least 3 samples, got {len(s_outs)}")
    s_emb = ag.concat_rows([ag.reshape(o.pooled, (1, -1)) for o in s_outs])
    t_emb = np.stack([o.pooled.data for o in t_outs])
    aux = relational_aux(s_emb, t_emb)
    bce = bce_loss(student.logit, label)
    return _assemble(bce, _zero(), _zero(), aux)


# ---------------------------------------------------------------------------
# baseline: representation regression (hint distillation)
# ---------------------------------------------------------------------------

@dataclass
class Regressor:
    """Affine bridge from student width to teacher width for one layer."""
    w: Tensor
    b: Tensor


def make_regressors(
    layer_specs: Sequence[LayerSpec], d_student: int, d_teacher: int, seed: int = 0
) -> dict[LayerSpec, Regressor]:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d_student)
    out = {}
    for spec in layer_specs:
        out[spec] = Regressor(
            w=Tensor(rng.uniform(-bound, bound, size=(d_student, d_teacher)),
                     requires_grad=True),
            b=Tensor(np.zeros(d_teacher), requires_grad=True),
        )
    return out


def fitnets_layers(mode: str, depth: int) -> tuple[LayerSpec, ...]:
    """Distilled layers: the last layer of each block, or the selected set."""
    if mode == "last":
        return tuple(LayerSpec(b, depth) for b in BLOCKS)
    if mode == "sel":
        return DEFAULT_LAYER_SET
    raise ConfigError(f"unknown fitnets mode {mode!r}; expected 'last' or 'sel'")


def fitnets_loss(student, teacher, mode: str, regressors, label) -> LossBreakdown:
    """Mean squared error between bridged student and teacher representations.

    ``regressors`` maps each distilled layer to a Regressor (or None for
    equal widths, meaning identity).  The error is averaged over layers.
    """
    depth = max(layer for _, layer in student.block_outputs)
    specs = fitnets_layers(mode, depth)
    per_layer = []
    for spec in specs:
        key = (spec.block, spec.layer)
        if key not in student.block_outputs or key not in teacher.block_outputs:
            raise ConfigError(f"no block output recorded for layer {spec}")
        if spec not in regressors:
            raise ConfigError(f"missing regressor for layer {spec}")
        s_rep = student.block_outputs[key]
        t_rep = teacher.block_outputs[key]
        t_rep = t_rep.detach() if t_rep.requires_grad else t_rep
        reg = regressors[spec]
        if reg is None:
            if s_rep.shape[-1] != t_rep.shape[-1]:
                raise ConfigError(
                    f"identity regressor at {spec} needs equal widths, got "
                    f"{s_rep.shape[-1]} vs {t_rep.shape[-1]}"
                )
            proj = s_rep
        else:
            proj = ag.affine(s_rep, reg.w, reg.b)
        diff = ag.sub(proj, t_rep)
        per_layer.append(ag.tensor_mean(ag.mul(diff, diff)))
    aux = _zero()
    for term in per_layer:
        aux = ag.add(aux, term)
    aux = ag.scale(aux, 1.0 / len(per_layer))
    bce = bce_loss(student.logit, label)
    return _assemble(bce, _zero(), _zero(), aux)


# ---------------------------------------------------------------------------
# baseline: last-fusion-layer attention mimicry
# ---------------------------------------------------------------------------

def minilm_star_loss(student, teacher, label) -> LossBreakdown:
    """Attention-behavior KL at the last Fusion layer only, unsoftened."""
    depth = max(layer for block, layer in {
        (t.block, t.layer) for t in student.traces
    } if block == "Fusion")
    layer_set = (LayerSpec("Fusion", depth),)
    aux = ag.add(
        cad_loss(student, teacher, layer_set, tau=1.0),
        vr_loss(student, teacher, layer_set, tau=1.0),
    )
    bce = bce_loss(student.logit, label)
    return _assemble(bce, _zero(), _zero(), aux)


# ---------------------------------------------------------------------------
# batch-level dispatch used by the training loop
# ---------------------------------------------------------------------------

def trace_tau_for(config: DistillConfig) -> float:
    """Softening at which forward traces must be captured for a method."""
    if config.method == "mtd":
        return config.tau
    if config.method == "minilm_star":
        return 1.0
    return 1.0


def method_needs_teacher(method: str) -> bool:
    return method != "bce_only"


def method_needs_traces(method: str) -> bool:
    return method in ("mtd", "minilm_star")


def method_loss(
    config: DistillConfig,
    student: ForwardOutput,
    teacher: Optional[ForwardOutput],
    labels,
    regressors: Optional[dict] = None,
) -> LossBreakdown:
    """Batched loss for one training step under the configured method."""
    m = config.method
    if m == "bce_only":
        return _assemble(bce_loss(student.logit, labels), _zero(), _zero(), _zero())
    if teacher is None:
        raise UsageError(f"method {m!r} needs a teacher forward output")
    if m == "mtd":
        return mtd_loss(student, teacher, labels, config)
    if m == "kd":
        return kd_loss(student.logit, teacher.logit, labels, config.tau)
    if m == "rkd":
        aux = relational_aux(student.pooled, teacher.pooled.data)
        return _assemble(bce_loss(student.logit, labels), _zero(), _zero(), aux)
    if m == "minilm_star":
        return minilm_star_loss(student, teacher, labels)
    if m in ("last_fitnets", "sel_fitnets"):
        mode = "last" if m == "last_fitnets" else "sel"
        if regressors is None:
            raise ConfigError(f"method {m!r} needs regressors")
        return fitnets_loss(student, teacher, mode, regressors, labels)
    raise ConfigError(f"unknown method {m!r}")
