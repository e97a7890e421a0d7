"""Downstream transfer check: does an aggregated backbone beat random init?

Both arms train only the classifier head, with identical head init, batch
order and budget; they differ solely in the frozen backbone (loaded vs
freshly initialized). Reported as a pair of accuracies on held-out data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, EpochSampler
from .errors import ConfigError
from .model import (
    HEAD_LAYERS,
    ModelWeights,
    ce_loss,
    evaluate,
    layer_shapes,
    sgd_step,
    value_and_grad,
)
from .seeding import derive_seed, make_rng


@dataclass
class FinetuneReport:
    finetuned_accuracy: float
    scratch_accuracy: float

    @property
    def delta(self) -> float:
        return self.finetuned_accuracy - self.scratch_accuracy


def _with_fresh_head(backbone: ModelWeights, head_seed: int) -> ModelWeights:
    rng = make_rng("head-init", head_seed)
    shapes = layer_shapes(backbone.arch)
    arrays = {name: backbone[name] for name in backbone.names()}
    arrays["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(shapes["head.w"][0]), shapes["head.w"])
    arrays["head.b"] = np.zeros(shapes["head.b"])
    return ModelWeights(backbone.arch, arrays)


def train_head(
    weights: ModelWeights,
    train: Dataset,
    steps: int,
    alpha: float,
    batch_size: int,
    sampler_seed: int,
) -> ModelWeights:
    """SGD on the head only; the backbone stays frozen."""
    sampler = EpochSampler(train, sampler_seed)
    current = weights
    for _ in range(steps):
        batch = sampler.next_batch(min(batch_size, len(train)))

        def loss_fn(params, b=batch):
            return ce_loss(params, b, current.arch)

        _, grads = value_and_grad(current, loss_fn)
        masked = {
            name: (grads[name] if name in HEAD_LAYERS else np.zeros_like(grads[name]))
            for name in grads
        }
        current = sgd_step(current, masked, alpha)
    return current


def finetune_compare(
    theta: ModelWeights,
    train: Dataset,
    test: Dataset,
    steps: int = 150,
    alpha: float = 0.1,
    batch_size: int = 16,
    seed: int = 0,
) -> FinetuneReport:
    """Linear-probe accuracies: loaded backbone vs random backbone.

    Paired seeds: head init and batch order are identical in both arms.
    """
    if theta.arch.n_classes != train.n_classes:
        raise ConfigError(
            f"checkpoint has {theta.arch.n_classes} classes, "
            f"downstream data has {train.n_classes}"
        )
    head_seed = derive_seed("finetune-head", seed)
    sampler_seed = derive_seed("finetune-sampler", seed)
    arm_loaded = _with_fresh_head(theta, head_seed)
    scratch_backbone = ModelWeights.initialize(theta.arch, derive_seed("scratch", seed))
    arm_scratch = _with_fresh_head(scratch_backbone, head_seed)

    trained_loaded = train_head(arm_loaded, train, steps, alpha, batch_size, sampler_seed)
    trained_scratch = train_head(arm_scratch, train, steps, alpha, batch_size, sampler_seed)
    return FinetuneReport(
        finetuned_accuracy=evaluate(trained_loaded, test.images, test.labels),
        scratch_accuracy=evaluate(trained_scratch, test.images, test.labels),
    )
