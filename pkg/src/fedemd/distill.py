"""Multi-teacher distillation loss and the weighted local update rule.

Each returned model acts as a teacher: its temperature-softened outputs on
the local batch are fixed targets, mixed with the ground-truth loss. The
local update scales every teacher's gradient by that teacher's transport
similarity weight, so dissimilar teachers move the student less.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import warn_count
from .model import (
    ModelWeights,
    cross_entropy_graph,
    forward,
    logits_graph,
    one_hot,
    sgd_step,
    value_and_grad,
)
from .tensor import Tensor, softmax_rows

Array = np.ndarray


@dataclass(frozen=True)
class DistillConfig:
    """Mixing weight, temperature, learning-rate schedule.

    ``alpha`` may be a constant or a per-round sequence (the last entry is
    held for later rounds). ``normalize_weights`` rescales teacher weights
    to sum to one before the update; off by default.
    """

    beta: float = 0.5
    temperature: float = 2.0
    alpha: float | tuple = 0.01
    normalize_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        rates = self.alpha if isinstance(self.alpha, (tuple, list)) else (self.alpha,)
        if len(rates) == 0 or any(a < 0.0 for a in rates):
            raise ValueError(f"learning rates must be >= 0, got {self.alpha}")

    def learning_rate(self, round_k: int) -> float:
        if isinstance(self.alpha, (tuple, list)):
            idx = min(round_k, len(self.alpha) - 1)
            return float(self.alpha[idx])
        return float(self.alpha)


@dataclass(frozen=True)
class Teacher:
    neighbor_id: int
    weights: ModelWeights
    emd_weight: float


class TeacherSet:
    """Returned teacher models with their similarity weights, id-ordered."""

    def __init__(self, teachers: Sequence[Teacher]):
        ids = [t.neighbor_id for t in teachers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate neighbor ids in teacher set: {ids}")
        for t in teachers:
            if not np.isfinite(t.emd_weight):
                raise ValueError(f"non-finite emd weight for neighbor {t.neighbor_id}")
        self._teachers = tuple(sorted(teachers, key=lambda t: t.neighbor_id))

    def __iter__(self) -> Iterator[Teacher]:
        return iter(self._teachers)

    def __len__(self) -> int:
        return len(self._teachers)


def _soft_targets(logits: Array, temperature: float) -> Array:
    z = logits / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _kd_term(student_logits: Tensor, teacher_probs: Array, temperature: float) -> Tensor:
    """Cross-entropy of the softened student against fixed teacher targets."""
    student_soft = softmax_rows(student_logits, temperature)
    return cross_entropy_graph(student_soft, teacher_probs)


def _gt_term(student_logits: Tensor, labels: Array, n_classes: int) -> Tensor:
    probs = softmax_rows(student_logits, 1.0)
    return cross_entropy_graph(probs, one_hot(labels, n_classes))


def distill_loss_graph(
    student_logits: Tensor,
    teacher_logits: Sequence[Array],
    labels: Array,
    cfg: DistillConfig,
    n_classes: int,
) -> Tensor:
    """Combined loss: beta*T^2 * sum_j KD_j + (1 - beta) * CE(student, y).

    The pure endpoints short-circuit so beta = 0 is exactly the plain
    cross-entropy and beta = 1 is exactly the scaled distillation sum.
    """
    t = cfg.temperature
    if len(teacher_logits) == 0:
        gt = _gt_term(student_logits, labels, n_classes)
        if cfg.beta > 0.0:
            warn_count("distill_no_teachers")
            return gt * (1.0 - cfg.beta)
        return gt
    if cfg.beta == 0.0:
        return _gt_term(student_logits, labels, n_classes)
    kd = _kd_term(student_logits, _soft_targets(teacher_logits[0], t), t)
    for tl in teacher_logits[1:]:
        kd = kd + _kd_term(student_logits, _soft_targets(tl, t), t)
    if cfg.beta == 1.0:
        return kd * (t * t)
    return kd * (cfg.beta * t * t) + _gt_term(student_logits, labels, n_classes) * (
        1.0 - cfg.beta
    )


def distill_loss(
    student_logits: Array,
    teacher_logits: Sequence[Array],
    labels: Array,
    cfg: DistillConfig,
) -> float:
    """Numeric distillation loss for given logits (batch rows averaged)."""
    student = Tensor(np.atleast_2d(student_logits), op="student_logits")
    teachers = [np.atleast_2d(tl) for tl in teacher_logits]
    labels = np.atleast_1d(labels)
    return float(
        distill_loss_graph(student, teachers, labels, cfg, student.shape[-1]).data
    )


@dataclass
class LocalUpdateResult:
    weights: ModelWeights
    teacher_losses: dict = field(default_factory=dict)  # neighbor id -> loss value
    loss: float = 0.0  # combined distillation loss for logging


def local_update(
    weights: ModelWeights,
    teachers: TeacherSet,
    batch,
    cfg: DistillConfig,
    round_k: int,
) -> LocalUpdateResult:
    """One weighted distillation step.

    new = w - alpha_k * sum_j weight_j * grad(loss_j), where loss_j mixes
    teacher j's softened targets with the ground-truth term. Each gradient is
    taken at the incoming weights, so teacher order cannot change the result
    beyond the fixed id-ordered summation.
    """
    arch = weights.arch
    alpha = cfg.learning_rate(round_k)
    teacher_list = list(teachers)
    for t in teacher_list:
        if t.weights.arch != arch:
            raise ValueError(
                f"teacher {t.neighbor_id} architecture {t.weights.arch} != {arch}"
            )
    weight_values = [t.emd_weight for t in teacher_list]
    if cfg.normalize_weights:
        total = sum(weight_values)
        if total > 0.0:
            weight_values = [w / total for w in weight_values]

    teacher_logits = [forward(t.weights, batch)[1] for t in teacher_list]

    total_grads = {name: np.zeros_like(arr) for name, arr in weights.items()}
    teacher_losses: dict = {}
    any_step = False
    for t, w_j, t_logits in zip(teacher_list, weight_values, teacher_logits):
        def loss_fn(params: Mapping[str, Tensor], b=batch, tl=t_logits):
            student_logits = logits_graph(params, b, arch)
            return distill_loss_graph(
                student_logits, [tl], b.labels, cfg, arch.n_classes
            )

        if w_j == 0.0:
            teacher_losses[t.neighbor_id] = None
            continue
        loss_j, grads_j = value_and_grad(weights, loss_fn)
        teacher_losses[t.neighbor_id] = loss_j
        for name in total_grads:
            total_grads[name] = total_grads[name] + w_j * grads_j[name]
        any_step = True

    new_weights = sgd_step(weights, total_grads, alpha) if any_step else weights
    _, logits = forward(weights, batch)
    combined = distill_loss(logits, teacher_logits, batch.labels, cfg)
    return LocalUpdateResult(
        weights=new_weights, teacher_losses=teacher_losses, loss=combined
    )


def local_pretrain_step(
    weights: ModelWeights, batch, alpha: float
) -> tuple[ModelWeights, float]:
    """One cross-entropy SGD step on the silo's own batch."""
    from .model import ce_loss

    def loss_fn(params, b=batch):
        return ce_loss(params, b, weights.arch)

    loss, grads = value_and_grad(weights, loss_fn)
    return sgd_step(weights, grads, alpha), loss
