import math

import numpy as np
import pytest

from conftest import random_batch, random_weights, tiny_arch
from fedemd.data import Minibatch
from fedemd.distill import (
    DistillConfig,
    Teacher,
    TeacherSet,
    distill_loss,
    distill_loss_graph,
    local_pretrain_step,
    local_update,
)
from fedemd.errors import warning_counters
from fedemd.model import (
    ModelWeights,
    ce_loss,
    cross_entropy,
    forward,
    layer_shapes,
    one_hot,
    sgd_step,
    softmax_temperature,
    value_and_grad,
)
from fedemd.tensor import Tensor, backward
from fedemd.verify import finite_difference_grad, max_rel_err


def scalar_softmax(logits, t):
    exps = [math.exp(l / t) for l in logits]
    z = sum(exps)
    return [e / z for e in exps]


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(beta=1.2)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        DistillConfig(alpha=())


def test_learning_rate_schedule_holds_last_entry():
    cfg = DistillConfig(alpha=(0.1, 0.05, 0.01))
    assert cfg.learning_rate(0) == 0.1
    assert cfg.learning_rate(2) == 0.01
    assert cfg.learning_rate(99) == 0.01
    assert DistillConfig(alpha=0.02).learning_rate(7) == 0.02


def test_teacher_set_validation():
    arch = tiny_arch()
    w = random_weights(arch, 0)
    with pytest.raises(ValueError):
        TeacherSet([Teacher(1, w, 0.5), Teacher(1, w, 0.2)])
    with pytest.raises(ValueError):
        TeacherSet([Teacher(1, w, float("nan"))])
    ts = TeacherSet([Teacher(2, w, 0.5), Teacher(1, w, 0.2)])
    assert [t.neighbor_id for t in ts] == [1, 2]


def test_beta_zero_equals_plain_cross_entropy_exactly():
    rng = np.random.default_rng(0)
    student = rng.normal(size=(3, 4))
    teachers = [rng.normal(size=(3, 4))]
    labels = np.array([0, 2, 3])
    cfg = DistillConfig(beta=0.0, temperature=3.0)
    got = distill_loss(student, teachers, labels, cfg)
    expected = np.mean(
        [cross_entropy(softmax_temperature(student[i], 1.0), labels[i]) for i in range(3)]
    )
    assert got == pytest.approx(expected, abs=1e-15)
    # also bitwise against the batched CE path
    assert got == cross_entropy(softmax_temperature(student, 1.0), labels)


def test_beta_one_identical_teacher_t1_equals_entropy():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1, 5))
    cfg = DistillConfig(beta=1.0, temperature=1.0)
    got = distill_loss(logits, [logits.copy()], np.array([0]), cfg)
    p = softmax_temperature(logits[0], 1.0)
    entropy = -float(np.sum(p * np.log(p)))
    assert abs(got - entropy) < 1e-12


def test_hand_evaluated_two_teacher_case():
    student = np.array([[1.0, 0.5, -0.5]])
    teachers = [np.array([[2.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])]
    label = np.array([2])
    beta, temperature = 0.5, 2.0
    cfg = DistillConfig(beta=beta, temperature=temperature)
    got = distill_loss(student, teachers, label, cfg)

    p_soft = scalar_softmax(student[0], temperature)
    p_hard = scalar_softmax(student[0], 1.0)
    kd = 0.0
    for t_logits in teachers:
        q = scalar_softmax(t_logits[0], temperature)
        kd += -sum(qk * math.log(pk) for qk, pk in zip(q, p_soft))
    expected = beta * temperature**2 * kd + (1 - beta) * (-math.log(p_hard[2]))
    assert got == pytest.approx(expected, abs=1e-12)


def test_empty_teacher_list_with_positive_beta_warns_and_scales():
    rng = np.random.default_rng(2)
    student = rng.normal(size=(2, 3))
    labels = np.array([0, 1])
    cfg = DistillConfig(beta=0.4, temperature=2.0)
    got = distill_loss(student, [], labels, cfg)
    ce = cross_entropy(softmax_temperature(student, 1.0), labels)
    assert got == pytest.approx(0.6 * ce, abs=1e-15)
    assert warning_counters["distill_no_teachers"] == 1


def test_temperature_limit_reaches_log_classes():
    rng = np.random.default_rng(3)
    student = rng.normal(size=(1, 6))
    teacher = rng.normal(size=(1, 6))
    cfg = DistillConfig(beta=1.0, temperature=1e6)
    loss = distill_loss(student, [teacher], np.array([0]), cfg)
    kd_term = loss / cfg.temperature**2
    assert abs(kd_term - math.log(6.0)) < 1e-3


def test_distill_loss_gradient_wrt_student_logits():
    rng = np.random.default_rng(4)
    student = rng.normal(size=(2, 4))
    teachers = [rng.normal(size=(2, 4)) for _ in range(2)]
    labels = np.array([1, 3])
    cfg = DistillConfig(beta=0.5, temperature=2.0)

    leaf = Tensor(student, requires_grad=True, op="student")
    backward(distill_loss_graph(leaf, teachers, labels, cfg, 4))
    fd = finite_difference_grad(
        lambda s: distill_loss(s, teachers, labels, cfg), student.copy(), 1e-4
    )
    assert max_rel_err(fd, leaf.grad) < 1e-5


# -- local update -----------------------------------------------------------------


def make_setup(seed=0, n_teachers=2):
    arch = tiny_arch()
    rng = np.random.default_rng(seed)
    w = random_weights(arch, seed)
    batch = random_batch(rng, arch, batch_size=4)
    teachers = [
        Teacher(j, random_weights(arch, 100 + seed + j), 0.5 + 0.1 * j)
        for j in range(n_teachers)
    ]
    return arch, w, batch, teachers


def test_local_update_zero_weights_leaves_model_unchanged():
    _, w, batch, teachers = make_setup()
    zeroed = TeacherSet([Teacher(t.neighbor_id, t.weights, 0.0) for t in teachers])
    out = local_update(w, zeroed, batch, DistillConfig(), round_k=1)
    assert out.weights.allequal(w)


def test_local_update_zero_alpha_leaves_model_unchanged():
    _, w, batch, teachers = make_setup()
    cfg = DistillConfig(alpha=0.0)
    out = local_update(w, TeacherSet(teachers), batch, cfg, round_k=1)
    assert out.weights.allequal(w)


def test_local_update_single_teacher_beta0_equals_plain_sgd_step():
    arch, w, batch, _ = make_setup(seed=5, n_teachers=0)
    teacher = Teacher(0, random_weights(arch, 50), 1.0)
    cfg = DistillConfig(beta=0.0, alpha=0.05)
    out = local_update(w, TeacherSet([teacher]), batch, cfg, round_k=0)

    loss, grads = value_and_grad(w, lambda p: ce_loss(p, batch, arch))
    expected = sgd_step(w, grads, 0.05)
    assert out.weights.allequal(expected)


def test_local_update_matches_literal_weighted_sum_contract():
    arch, w, batch, teachers = make_setup(seed=6)
    cfg = DistillConfig(beta=0.5, temperature=2.0, alpha=0.1)
    out = local_update(w, TeacherSet(teachers), batch, cfg, round_k=3)

    total = {name: np.zeros_like(arr) for name, arr in w.items()}
    for t in sorted(teachers, key=lambda t: t.neighbor_id):
        t_logits = forward(t.weights, batch)[1]

        def loss_fn(params, tl=t_logits):
            from fedemd.model import logits_graph

            return distill_loss_graph(
                logits_graph(params, batch, arch), [tl], batch.labels, cfg, arch.n_classes
            )

        _, grads = value_and_grad(w, loss_fn)
        for name in total:
            total[name] = total[name] + t.emd_weight * grads[name]
    expected = w.add_scaled(total, -0.1)
    assert out.weights.allequal(expected)


def test_local_update_normalize_weights_flag():
    arch, w, batch, teachers = make_setup(seed=7)
    cfg = DistillConfig(beta=0.5, alpha=0.1, normalize_weights=True)
    out_norm = local_update(w, TeacherSet(teachers), batch, cfg, round_k=0)
    # weights 0.5, 0.6 -> normalized to ~0.4545, 0.5455: different update
    cfg_raw = DistillConfig(beta=0.5, alpha=0.1, normalize_weights=False)
    out_raw = local_update(w, TeacherSet(teachers), batch, cfg_raw, round_k=0)
    assert not out_norm.weights.allequal(out_raw.weights)


def test_local_update_architecture_mismatch():
    arch, w, batch, _ = make_setup()
    other = random_weights(tiny_arch(embed_dim=8), 9)
    with pytest.raises(ValueError):
        local_update(w, TeacherSet([Teacher(0, other, 1.0)]), batch, DistillConfig(), 0)


def test_local_update_reports_losses():
    _, w, batch, teachers = make_setup(seed=8)
    out = local_update(w, TeacherSet(teachers), batch, DistillConfig(), round_k=1)
    assert set(out.teacher_losses) == {0, 1}
    assert np.isfinite(out.loss)


# -- pretrain step ----------------------------------------------------------------


def test_pretrain_step_alpha_zero():
    _, w, batch, _ = make_setup(seed=9)
    out, loss = local_pretrain_step(w, batch, 0.0)
    assert out.allequal(w)
    assert loss > 0


def test_pretrain_step_zero_weights_balanced_labels_is_fixed_point():
    arch = tiny_arch(n_classes=3)
    zeros = ModelWeights(arch, {n: np.zeros(s) for n, s in layer_shapes(arch).items()})
    rng = np.random.default_rng(10)
    batch = Minibatch(
        images=rng.normal(size=(6, arch.image_side, arch.image_side)),
        labels=np.array([0, 0, 1, 1, 2, 2]),
    )
    out, loss = local_pretrain_step(zeros, batch, 0.5)
    assert out.allequal(zeros)
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)


def test_pretrain_step_matches_hand_computed_gradient():
    # single 2x2 patch, 2 channels, 2 classes: full chain by hand in numpy
    arch = tiny_arch(embed_dim=2, n_classes=2, side=2, patch=2)
    rng = np.random.default_rng(11)
    arrays = {n: rng.normal(size=s) for n, s in layer_shapes(arch).items()}
    w = ModelWeights(arch, arrays)
    x = rng.normal(size=(1, 2, 2))
    label = np.array([1])
    batch = Minibatch(images=x, labels=label)
    alpha = 0.3

    xf = x.reshape(1, 4)
    z1 = xf @ arrays["embed.w"] + arrays["embed.b"]
    h1 = np.maximum(z1, 0.0)
    feat = h1 @ arrays["mix.w"] + arrays["mix.b"]
    pooled = feat  # one patch: mean pool is identity
    logits = pooled @ arrays["head.w"] + arrays["head.b"]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    dlogits = p - one_hot(label, 2)
    g = {
        "head.w": pooled.T @ dlogits,
        "head.b": dlogits[0],
        "mix.w": h1.T @ (dlogits @ arrays["head.w"].T),
        "mix.b": (dlogits @ arrays["head.w"].T)[0],
    }
    dfeat = dlogits @ arrays["head.w"].T
    dh1 = (dfeat @ arrays["mix.w"].T) * (z1 > 0)
    g["embed.w"] = xf.T @ dh1
    g["embed.b"] = dh1[0]

    out, loss = local_pretrain_step(w, batch, alpha)
    assert loss == pytest.approx(-math.log(p[0, 1]), abs=1e-12)
    for name in w.names():
        assert np.allclose(out[name], arrays[name] - alpha * g[name], atol=1e-12), name
