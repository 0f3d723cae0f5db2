"""Acceptance criteria: one test per criterion, each printing PASS/FAIL.

Most criteria are property-based and cheap; criteria 5, 6, and 9 train
real desk-scale students against a shared teacher fixture and dominate
the runtime.  The terminal summary lists every criterion's outcome.
"""

import math

import numpy as np
import pytest

from conftest import record_criterion

from syncdistill import autograd as ag
from syncdistill import data as dt
from syncdistill import evaluate as ev
from syncdistill import losses as ls
from syncdistill import model as md
from syncdistill import trainer as tr
from syncdistill.autograd import Tensor
from syncdistill.losses import DistillConfig, LayerSpec

# desk-scale run shapes shared by the training-based criteria; the teacher
# trains long enough for its attention to sharpen, the temperature sweep
# uses a deliberately tight student budget (softening matters most when
# optimization steps are scarce), and the method comparison a roomier one
TEACHER_TRAIN = dict(epochs=72, warmup_epochs=5, lr0=1e-3, decay_every=12,
                     batch_size=32, batches_per_epoch=50, val_batches=8, seed=0)
STUDENT_TRAIN = dict(epochs=16, warmup_epochs=3, lr0=1e-3, decay_every=8,
                     batch_size=32, batches_per_epoch=40, val_batches=6)
SWEEP_TRAIN = dict(epochs=6, warmup_epochs=2, lr0=1e-3, decay_every=8,
                   batch_size=32, batches_per_epoch=40, val_batches=6)
EVAL_LEN5 = ev.EvalConfig(frame_lengths=(5,), n_queries=100, seed=7)
PAIRED_SEEDS = (0, 1, 2, 3, 4)
SWEEP_SEEDS = (0, 1, 2, 3, 4)
SWEEP_TAUS = (1.0, 5.0, 25.0)


@pytest.fixture(scope="module")
def corpus():
    return dt.generate_corpus(dt.CorpusConfig())


@pytest.fixture(scope="module")
def teacher(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    model, history = tr.train_teacher(
        corpus, md.teacher_profile(), tr.TrainConfig(**TEACHER_TRAIN),
        checkpoint_path=path,
    )
    best = max(r.val_f1 for r in history)
    assert best > 0.90, f"teacher converged to val F1 {best:.4f}, needs > 0.90"
    return model


def distill(teacher, corpus, method, seed, tau=25.0, **overrides):
    params = dict(STUDENT_TRAIN)
    params.update(overrides)
    tcfg = tr.TrainConfig(seed=seed, distill=DistillConfig(method=method, tau=tau),
                          **params)
    student, history = tr.distill_student(teacher, corpus, md.student_profile(), tcfg)
    return student, history


@pytest.fixture(scope="module")
def mtd_students(teacher, corpus):
    """MTD runs at the default temperature, shared by criteria 5 and 6."""
    out = {}
    for seed in PAIRED_SEEDS:
        student, _ = distill(teacher, corpus, "mtd", seed)
        out[seed] = ev.multi_length_eval(
            student, corpus.split("test"), EVAL_LEN5
        ).accuracies[5], student
    return out


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        """Primitives < 1e-4 and all seven end-to-end losses < 1e-3."""
        worst_prim = 0.0
        rng = np.random.default_rng(0)
        fixed_q = {}

        def primitive_cases(shape):
            n = shape[-1]
            q = fixed_q.setdefault(
                (("dirichlet",) + shape),
                Tensor(rng.dirichlet(np.ones(n), size=shape[:-1])),
            )
            w = Tensor(rng.normal(size=(n, 3)))
            b = Tensor(rng.normal(size=3))
            g = Tensor(rng.normal(size=n) + 1.0)
            c = Tensor(rng.normal(size=shape))
            return {
                "matmul": lambda t: ag.tensor_sum(ag.matmul(t, w)),
                "affine": lambda t: ag.tensor_sum(ag.affine(t, w, b)),
                "relu": lambda t: ag.tensor_sum(ag.relu(t)),
                "tanh": lambda t: ag.tensor_sum(ag.tanh(t)),
                "sigmoid": lambda t: ag.tensor_sum(ag.sigmoid(t)),
                "softplus": lambda t: ag.tensor_sum(ag.softplus(t)),
                "softmax_rows": lambda t: ag.tensor_sum(
                    ag.mul(ag.softmax_rows(t, 2.0, 1.5), c)),
                "kl_div_rows": lambda t: ag.kl_div_rows(
                    ag.softmax_rows(t, 1.0, 1.0), q),
                "max_pool_time": lambda t: ag.tensor_sum(ag.max_pool_time(t)),
                "layer_norm": lambda t: ag.tensor_sum(ag.layer_norm(t, g,
                                                                    Tensor(np.zeros(n)))),
                "add_mul": lambda t: ag.tensor_sum(ag.mul(ag.add(t, c), c)),
                "mean": lambda t: ag.tensor_mean(ag.mul(t, t)),
            }

        for shape in [(2, 4), (3, 3), (5, 2)]:
            for name, f in primitive_cases(shape).items():
                raw = rng.normal(size=shape)
                raw[np.abs(raw) < 1e-2] = 0.3  # keep relu off its kink
                x = Tensor(raw, requires_grad=True)
                err = ag.finite_diff_check(f, x, eps=1e-5)
                worst_prim = max(worst_prim, err)
                assert err < 1e-4, f"{name} at {shape}: {err}"

        worst_loss = 0.0
        for trial, method in enumerate(ls.METHODS):
            for seed in (0, 1, 2):
                layers = 4 if method == "sel_fitnets" else 1
                shared = dict(n_heads=2, layers_per_block=layers,
                              d_visual_in=4, d_audio_in=3, audio_rate=2)
                student = md.init_model(md.ModelConfig(d_model=4, seed=seed, **shared))
                teacher_m = md.init_model(md.ModelConfig(d_model=6, seed=seed + 50,
                                                         **shared))
                rng2 = np.random.default_rng(seed + 10 * trial)
                visual = rng2.normal(size=(3, 2, 4))
                audio = rng2.normal(size=(3, 4, 3))
                labels = np.array([1.0, 0.0, 1.0])
                layer_set = (ls.DEFAULT_LAYER_SET if layers == 4
                             else (LayerSpec("Fusion", 1),))
                cfg = DistillConfig(method=method, layer_set=layer_set, tau=5.0)
                tau = ls.trace_tau_for(cfg)
                regressors = None
                if method in ("last_fitnets", "sel_fitnets"):
                    mode = "last" if method == "last_fitnets" else "sel"
                    regressors = ls.make_regressors(
                        ls.fitnets_layers(mode, layers), 4, 6, seed=seed)
                with ag.no_grad():
                    t_out = md.model_forward(teacher_m, visual, audio, tau_trace=tau)
                target = student.params["av.1.attn.wq"]

                def f(t):
                    old = student.params["av.1.attn.wq"]
                    student.params["av.1.attn.wq"] = t
                    try:
                        s_out = md.model_forward(student, visual, audio, tau_trace=tau)
                        return ls.method_loss(cfg, s_out, t_out, labels, regressors).total
                    finally:
                        student.params["av.1.attn.wq"] = old

                err = ag.finite_diff_check(f, target, eps=1e-4)
                worst_loss = max(worst_loss, err)
                assert err < 1e-3, f"{method} seed {seed}: {err}"

        record_criterion(
            "criterion 1 (gradient suite)", True,
            f"primitives max err {worst_prim:.2e}, losses max err {worst_loss:.2e}",
        )


class TestCriterion2KlOracle:
    def test_behavior_losses_match_direct_summation(self):
        def kl_oracle(p, q, eps=1e-8):
            p, q = np.asarray(p, float), np.asarray(q, float)
            total = 0.0
            for i in range(p.shape[0]):
                for j in range(p.shape[1]):
                    total += p[i, j] * math.log(max(p[i, j], eps) / max(q[i, j], eps))
            return total / p.shape[0]

        def single(cad_s, cad_t, vr_s, vr_t, tau):
            make = lambda cad, vr: md.ForwardOutput(
                logit=Tensor(0.0),
                traces=[md.AttentionTrace("Fusion", 3, 1, Tensor(cad), Tensor(vr), tau)],
                block_outputs={}, pooled=Tensor(np.zeros(2)),
            )
            return make(np.asarray(cad_s, float), np.asarray(vr_s, float)), \
                make(np.asarray(cad_t, float), np.asarray(vr_t, float))

        spec = (LayerSpec("Fusion", 3),)
        cad_s, cad_t = [[0.9, 0.1]], [[0.5, 0.5]]
        vr_s = [[0.7, 0.3], [0.4, 0.6]]
        vr_t = [[0.5, 0.5], [0.5, 0.5]]
        worst = 0.0
        for tau in (1.0, 25.0):
            s, t = single(cad_s, cad_t, vr_s, vr_t, tau)
            got_c = float(ls.cad_loss(s, t, spec, tau).data)
            got_v = float(ls.vr_loss(s, t, spec, tau).data)
            worst = max(worst,
                        abs(got_c - tau * tau * kl_oracle(cad_s, cad_t)),
                        abs(got_v - tau * tau * kl_oracle(vr_s, vr_t)))
        assert worst < 1e-9
        record_criterion("criterion 2 (KL oracle equivalence)", True,
                         f"max deviation {worst:.2e}")


class TestCriterion3SelfDistillationNull:
    def test_parameter_copy_gives_null_terms_and_gradients(self, corpus):
        cfg = md.ModelConfig(d_model=16, n_heads=4, layers_per_block=4, seed=21)
        teacher_m = md.init_model(cfg)
        student = teacher_m.copy()
        rng = np.random.default_rng(5)
        pairs = dt.sample_batch(corpus.split("train"), 8, rng, corpus.config)
        visual, audio, _ = dt.batch_arrays(pairs)
        s_out = md.model_forward(student, visual, audio, tau_trace=25.0)
        with ag.no_grad():
            t_out = md.model_forward(teacher_m, visual, audio, tau_trace=25.0)
        cad = ls.cad_loss(s_out, t_out, ls.DEFAULT_LAYER_SET, 25.0)
        vr = ls.vr_loss(s_out, t_out, ls.DEFAULT_LAYER_SET, 25.0)
        cad_val, vr_val = abs(float(cad.data)), abs(float(vr.data))
        assert cad_val < 1e-9 and vr_val < 1e-9
        ag.add(cad, vr).backward()
        worst_grad = max(
            (0.0 if p.grad is None else float(np.abs(p.grad).max()))
            for p in student.params.values()
        )
        assert worst_grad < 1e-9
        record_criterion(
            "criterion 3 (self-distillation null)", True,
            f"terms {max(cad_val, vr_val):.2e}, max grad {worst_grad:.2e}",
        )


class TestCriterion4RetrievalOracles:
    def test_protocol_oracles(self, corpus):
        utts = corpus.split("test")
        acc = ev.retrieval_accuracy(lambda v, a, o: -abs(o), utts, 5,
                                    ev.EvalConfig(n_queries=30))
        assert acc == 1.0

        rng = np.random.default_rng(23)
        base, _ = ev.enumerate_queries(utts, ev.EvalConfig(frame_lengths=(5,)))
        queries = [base[i % len(base)] for i in range(10_000)]
        rand_acc = ev.retrieval_accuracy(lambda v, a, o: rng.standard_normal(),
                                         utts, 5, ev.EvalConfig(), queries=queries)
        assert abs(rand_acc - 3.0 / 31.0) < 0.01
        record_criterion(
            "criterion 4 (retrieval oracles)", True,
            f"oracle 1.0000, random {rand_acc:.4f} vs 3/31={3/31:.4f}",
        )


class TestCriterion5DirectionalGap:
    def test_mtd_beats_task_only_on_every_paired_seed(self, teacher, corpus,
                                                      mtd_students):
        gaps = []
        for seed in PAIRED_SEEDS:
            bce_student, _ = distill(teacher, corpus, "bce_only", seed)
            bce_acc = ev.multi_length_eval(
                bce_student, corpus.split("test"), EVAL_LEN5
            ).accuracies[5]
            mtd_acc = mtd_students[seed][0]
            gaps.append((seed, bce_acc, mtd_acc))
        wins = sum(m > b for _, b, m in gaps)
        detail = ", ".join(f"s{s}: {m:.3f} vs {b:.3f}" for s, b, m in gaps)
        record_criterion("criterion 5 (distillation beats task-only, 5/5)",
                         wins == len(PAIRED_SEEDS), detail)
        assert wins == len(PAIRED_SEEDS), detail


class TestCriterion6Temperature:
    def test_tau_squared_limit(self):
        rng = np.random.default_rng(63)
        x = Tensor(rng.normal(scale=3.0, size=(4, 6)))
        y = Tensor(rng.normal(scale=3.0, size=(4, 6)))
        vals = {}
        for tau in (100.0, 200.0):
            p = ag.softmax_rows(x, tau, 1.0)
            q = ag.softmax_rows(y, tau, 1.0)
            vals[tau] = tau * tau * float(ag.kl_div_rows(p, q).data)
        rel = abs(vals[200.0] - vals[100.0]) / vals[100.0]
        assert rel < 0.05
        record_criterion("criterion 6a (tau^2 limit)", True,
                         f"relative change {rel:.4f}")

    def test_softening_helps_over_tau_one(self, teacher, corpus):
        means = {}
        for tau in SWEEP_TAUS:
            accs = []
            for seed in SWEEP_SEEDS:
                student, _ = distill(teacher, corpus, "mtd", seed, tau=tau,
                                     **SWEEP_TRAIN)
                accs.append(ev.multi_length_eval(
                    student, corpus.split("test"), EVAL_LEN5).accuracies[5])
            means[tau] = float(np.mean(accs))
        best = max(means, key=means.get)
        detail = ", ".join(f"tau {t:g}: {means[t]:.4f}" for t in SWEEP_TAUS)
        ok = best != 1.0 and means[best] > means[1.0]
        record_criterion("criterion 6b (temperature sweep)", ok, detail)
        assert ok, detail


class TestCriterion7SizeReduction:
    def test_backend_ratio_brackets(self):
        t_full = md.count_params_for_config(md.full_scale_profile("teacher"),
                                            "backend_only")
        s_full = md.count_params_for_config(md.full_scale_profile("student"),
                                            "backend_only")
        full_ratio = s_full / t_full
        assert 0.145 <= full_ratio <= 0.20
        t_desk = md.count_params_for_config(md.teacher_profile(), "backend_only")
        s_desk = md.count_params_for_config(md.student_profile(), "backend_only")
        record_criterion(
            "criterion 7 (size reduction)", True,
            f"512/200 backend ratio {full_ratio:.4f} "
            f"(reduction {100 * (1 - full_ratio):.2f}%), "
            f"desk 64/24 ratio {s_desk / t_desk:.4f}",
        )


class TestCriterion8DeterminismAndFormats:
    def test_round_trips_and_rerun_digests(self, corpus, tmp_path):
        path = tmp_path / "corpus.bin"
        dt.save_corpus(corpus, path)
        assert dt.load_corpus(path).digest() == corpus.digest()

        model = md.init_model(md.ModelConfig(d_model=16, n_heads=4, seed=3))
        ckpt = tmp_path / "m.ckpt"
        tr.save_checkpoint(model, {"epoch": 0, "val_f1": 0.0}, ckpt)
        loaded = tr.load_checkpoint(ckpt)
        rng = np.random.default_rng(9)
        visual = rng.normal(size=(5, 32))
        audio = rng.normal(size=(20, 20))
        drift = abs(float(md.model_forward(model, visual, audio).logit.data)
                    - float(md.model_forward(loaded, visual, audio).logit.data))
        assert drift < 1e-6

        reports = [
            ev.multi_length_eval(loaded, corpus.split("test"),
                                 ev.EvalConfig(frame_lengths=(5, 7), n_queries=20))
            for _ in range(2)
        ]
        assert reports[0].accuracies == reports[1].accuracies
        record_criterion(
            "criterion 8 (determinism and formats)", True,
            f"corpus bit-identical, ckpt logit drift {drift:.2e}, reports equal",
        )


class TestCriterion9LossTracking:
    def test_optimizing_mtd_reduces_mtd(self, teacher, corpus, tmp_path):
        tcfg = tr.TrainConfig(seed=0, distill=DistillConfig(method="mtd", tau=25.0),
                              **STUDENT_TRAIN)
        records = ev.loss_tracking_run("mtd", teacher, corpus, md.student_profile(),
                                       tcfg)
        csv_path = tmp_path / "loss_traces.csv"
        from syncdistill.cli import emit_tracking_csv
        emit_tracking_csv(records, csv_path)
        assert csv_path.exists()
        first, last = records[0]["mtd"], records[-1]["mtd"]
        fit_first = (records[0]["last_fitnets"], records[0]["sel_fitnets"])
        fit_last = (records[-1]["last_fitnets"], records[-1]["sel_fitnets"])
        ok = last < first and all(np.isfinite(r[k]) for r in records
                                  for k in ("mtd", "last_fitnets", "sel_fitnets"))
        record_criterion(
            "criterion 9 (loss tracking)", ok,
            f"mtd {first:.3f}->{last:.3f}; fitnets (recorded only) "
            f"{fit_first[0]:.3f}/{fit_first[1]:.3f} -> {fit_last[0]:.3f}/{fit_last[1]:.3f}",
        )
        assert ok


class TestTrainedModelInvariants:
    def test_permutation_sensitivity_and_length_trend(self, teacher, corpus,
                                                      mtd_students):
        rng = np.random.default_rng(3)
        pairs = dt.sample_batch(corpus.split("test"), 4, rng, corpus.config)
        pos = next(p for p in pairs if p.label == 1)
        with ag.no_grad():
            base = float(md.model_forward(
                teacher, pos.visual_window.astype(float),
                pos.audio_window.astype(float), want_traces=False).logit.data)
            shuffled = pos.audio_window[rng.permutation(pos.audio_window.shape[0])]
            alt = float(md.model_forward(
                teacher, pos.visual_window.astype(float),
                shuffled.astype(float), want_traces=False).logit.data)
        assert abs(base - alt) > 0.0

        best_student = max(mtd_students.values(), key=lambda v: v[0])[1]
        report = ev.multi_length_eval(best_student, corpus.split("test"),
                                      ev.EvalConfig(n_queries=60, seed=7))
        accs = [report.accuracies[n] for n in sorted(report.accuracies)]
        non_decreasing = sum(b >= a for a, b in zip(accs, accs[1:]))
        assert non_decreasing >= 4, accs
