"""Patch-embedding classifier: parameter container, forward pass, losses.

The network is deliberately small: patchify -> per-patch linear embed ->
relu -> per-patch linear mix -> mean pool -> linear head. The mix output is
the spatial feature grid (one row per patch) consumed by the transport
similarity score; the head output is the logits vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, NumericError, warn_count
from .seeding import make_rng
from .tensor import Tensor, backward, first_nonfinite_op, softmax_rows

Array = np.ndarray

# Keyed gradient structure, shape-congruent with the ModelWeights it came from.
Gradients = dict

CE_CLAMP = 1e-12

LAYER_ORDER = ("embed.w", "embed.b", "mix.w", "mix.b", "head.w", "head.b")
BACKBONE_LAYERS = ("embed.w", "embed.b", "mix.w", "mix.b")
HEAD_LAYERS = ("head.w", "head.b")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; equal descriptors imply congruent weights."""

    image_side: int
    patch_size: int
    embed_dim: int
    n_classes: int

    def __post_init__(self):
        if self.image_side < 1 or self.patch_size < 1:
            raise ConfigError(f"image_side/patch_size must be >= 1, got {self}")
        if self.image_side % self.patch_size != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim < 1 or self.n_classes < 2:
            raise ConfigError(f"need embed_dim >= 1 and n_classes >= 2, got {self}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


def layer_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    pp = arch.patch_size * arch.patch_size
    c = arch.embed_dim
    return {
        "embed.w": (pp, c),
        "embed.b": (c,),
        "mix.w": (c, c),
        "mix.b": (c,),
        "head.w": (c, arch.n_classes),
        "head.b": (arch.n_classes,),
    }


@dataclass(frozen=True)
class FeatureMap:
    """Spatial feature grid: row p is the embedding of spatial cell p."""

    height: int
    width: int
    values: Array  # [height*width, channels]

    def __post_init__(self):
        n, c = self.values.shape
        if self.height * self.width != n or n < 1 or c < 1:
            raise ValueError(
                f"feature map shape {self.values.shape} inconsistent with "
                f"{self.height}x{self.width} grid"
            )

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def channels(self) -> int:
        return self.values.shape[1]


class ModelWeights:
    """Ordered, immutable named parameter arrays plus their descriptor."""

    __slots__ = ("arch", "_arrays")

    def __init__(self, arch: ArchSpec, arrays: Mapping[str, Array]):
        expected = layer_shapes(arch)
        missing = [n for n in LAYER_ORDER if n not in arrays]
        extra = [n for n in arrays if n not in expected]
        if missing or extra:
            raise ConfigError(f"bad layer set: missing={missing} extra={extra}")
        store: dict[str, Array] = {}
        for name in LAYER_ORDER:
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != expected[name]:
                raise ConfigError(
                    f"layer '{name}' has shape {arr.shape}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in layer '{name}'", layer=name)
            arr.setflags(write=False)
            store[name] = arr
        self.arch = arch
        self._arrays = store

    @classmethod
    def initialize(cls, arch: ArchSpec, seed: int) -> "ModelWeights":
        rng = make_rng("model-init", seed)
        arrays = {}
        for name, shape in layer_shapes(arch).items():
            if name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        return cls(arch, arrays)

    def names(self) -> tuple[str, ...]:
        return LAYER_ORDER

    def items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._arrays.items())

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def add_scaled(self, grads: Mapping[str, Array], scale: float) -> "ModelWeights":
        """New weights ``w + scale * g``; caller's arrays are untouched."""
        check_congruent(self, grads)
        return ModelWeights(
            self.arch,
            {name: arr + scale * grads[name] for name, arr in self._arrays.items()},
        )

    def allequal(self, other: "ModelWeights") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(self._arrays[n], other._arrays[n]) for n in LAYER_ORDER
        )


def check_congruent(weights: ModelWeights, grads: Mapping[str, Array]) -> None:
    for name in weights.names():
        if name not in grads:
            raise ValueError(f"gradients missing layer '{name}'")
        if np.shape(grads[name]) != weights[name].shape:
            raise ValueError(
                f"gradient for '{name}' has shape {np.shape(grads[name])}, "
                f"expected {weights[name].shape}"
            )


def patchify(images: Array, patch_size: int) -> Array:
    """[B, side, side] -> [B, n_patches, patch_size^2], row-major patch order."""
    b, side, side2 = images.shape
    if side != side2 or side % patch_size != 0:
        raise ConfigError(
            f"images of side {side}x{side2} incompatible with layer 'embed.w' "
            f"(patch_size {patch_size})"
        )
    g = side // patch_size
    blocks = images.reshape(b, g, patch_size, g, patch_size)
    blocks = blocks.transpose(0, 1, 3, 2, 4)
    return blocks.reshape(b, g * g, patch_size * patch_size)


def _forward_graph(
    params: Mapping[str, Tensor], images: Array, arch: ArchSpec
) -> tuple[Tensor, Tensor]:
    """Shared forward pass; returns (features [B, P, C], logits [B, L])."""
    b = images.shape[0]
    patches = patchify(np.asarray(images, dtype=np.float64), arch.patch_size)
    p = arch.n_patches
    x = Tensor(patches.reshape(b * p, -1), op="input")
    h = (x @ params["embed.w"] + params["embed.b"]).relu()
    feat = h @ params["mix.w"] + params["mix.b"]  # [B*P, C]
    pooled = feat.reshape(b, p, arch.embed_dim).sum(axis=1) * (1.0 / p)
    logits = pooled @ params["head.w"] + params["head.b"]
    return feat.reshape(b, p, arch.embed_dim), logits


def _const_params(weights: ModelWeights) -> dict[str, Tensor]:
    return {name: Tensor(arr, op=name) for name, arr in weights.items()}


def forward(weights: ModelWeights, batch) -> tuple[list[FeatureMap], Array]:
    """Evaluate the classifier; returns per-sample feature maps and logits.

    Pure function: identical inputs give bitwise-identical outputs.
    """
    images = batch.images if hasattr(batch, "images") else np.asarray(batch)
    if images.ndim == 2:
        images = images[None, :, :]
    if images.shape[1] != weights.arch.image_side:
        raise ConfigError(
            f"batch image side {images.shape[1]} incompatible with layer 'embed.w' "
            f"of arch {weights.arch}"
        )
    feat, logits = _forward_graph(_const_params(weights), images, weights.arch)
    g = weights.arch.grid
    maps = [FeatureMap(g, g, feat.data[i]) for i in range(images.shape[0])]
    return maps, logits.data


def logits_graph(params: Mapping[str, Tensor], batch, arch: ArchSpec) -> Tensor:
    _, logits = _forward_graph(params, batch.images, arch)
    return logits


def value_and_grad(
    weights: ModelWeights,
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    batch=None,
) -> tuple[float, Gradients]:
    """Loss value and d(loss)/d(weights) via one reverse sweep.

    ``loss_fn(params)`` (or ``loss_fn(params, batch)`` when a batch is given)
    must build its result from the supported tensor primitives.
    """
    params = {
        name: Tensor(arr, requires_grad=True, op=name) for name, arr in weights.items()
    }
    loss = loss_fn(params) if batch is None else loss_fn(params, batch)
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data):
        raise NumericError(
            f"non-finite loss (first offending op: {first_nonfinite_op(loss)})",
            layer=first_nonfinite_op(loss),
        )
    backward(loss)
    grads: Gradients = {
        name: (params[name].grad if params[name].grad is not None else np.zeros_like(weights[name]))
        for name in weights.names()
    }
    return float(loss.data), grads


def sgd_step(weights: ModelWeights, grads: Gradients, alpha: float) -> ModelWeights:
    """One descent step ``w - alpha * g``; the input weights are unchanged."""
    if alpha < 0.0:
        raise ValueError(f"learning rate must be >= 0, got {alpha}")
    return weights.add_scaled(grads, -alpha)


# -- probability utilities ---------------------------------------------------


def softmax_temperature(logits, temperature: float = 1.0) -> Array:
    """Temperature softmax of a logits row (or batch of rows)."""
    t = logits if isinstance(logits, Tensor) else Tensor(logits, op="logits")
    return softmax_rows(t, temperature).data


def one_hot(labels: Array, n_classes: int) -> Array:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels.ravel()] = 1.0
    return out.reshape(*labels.shape, n_classes)


def cross_entropy_graph(predicted: Tensor, target: Array) -> Tensor:
    """-sum(target * log(predicted)); batch rows are averaged.

    Probabilities below CE_CLAMP at supported target entries are clamped and
    counted under the 'cross_entropy_clamp' warning counter.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != predicted.shape:
        raise ValueError(
            f"target shape {target.shape} != predicted shape {predicted.shape}"
        )
    if np.any(predicted.data[target > 0.0] < CE_CLAMP):
        warn_count("cross_entropy_clamp")
    per_entry = Tensor(target, op="target") * predicted.clamp_min(CE_CLAMP).log()
    total = -per_entry.sum()
    if predicted.ndim == 2:
        return total * (1.0 / predicted.shape[0])
    return total


def cross_entropy(predicted, target) -> float:
    """Numeric cross-entropy between a predicted distribution and a target.

    ``target`` may be a distribution of the same shape or integer labels
    (converted to one-hot against the last axis of ``predicted``).
    """
    p = predicted if isinstance(predicted, Tensor) else Tensor(predicted, op="predicted")
    target = np.asarray(target)
    if target.shape != p.shape:
        target = one_hot(target.astype(np.int64), p.shape[-1])
    return float(cross_entropy_graph(p, target).data)


def ce_loss(params: Mapping[str, Tensor], batch, arch: ArchSpec) -> Tensor:
    """Mean cross-entropy of the classifier on a labelled minibatch."""
    logits = logits_graph(params, batch, arch)
    probs = softmax_rows(logits, 1.0)
    return cross_entropy_graph(probs, one_hot(batch.labels, arch.n_classes))


def evaluate(weights: ModelWeights, images: Array, labels: Array) -> float:
    """Top-1 accuracy of the classifier on a labelled set."""
    _, logits = forward(weights, np.asarray(images, dtype=np.float64))
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == np.asarray(labels)))
