"""Synthetic image-like datasets, unseen-label partitioning, batch sampling.

Classes are fixed random prototype patterns plus Gaussian pixel noise, so
difficulty is controlled by one knob and everything is reproducible from
seeds. The partitioner splits the label set into a shared pool (spread
evenly over silos) and per-silo private labels, realizing an "unseen
fraction" p: at p = 1 every silo's label set is disjoint from the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .seeding import make_rng

Array = np.ndarray


@dataclass(frozen=True)
class Minibatch:
    images: Array  # [B, side, side]
    labels: Array  # [B]

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] < 1:
            raise ValueError(f"bad batch image shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} != batch size {self.images.shape[0]}"
            )

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class Dataset:
    images: Array  # [N, side, side]
    labels: Array  # [N]
    ids: Array  # [N] global sample ids, stable across partitioning
    n_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.images) != len(self.ids):
            raise ValueError("images/labels/ids length mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def label_set(self) -> set:
        return set(int(x) for x in np.unique(self.labels))

    def subset(self, indices: Array, provenance: str | None = None) -> "Dataset":
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            n_classes=self.n_classes,
            provenance=provenance or self.provenance,
        )


def class_prototype(label: int, side: int) -> Array:
    """The fixed pattern for a class; depends only on the label and side."""
    rng = make_rng("prototype", label)
    return rng.normal(0.0, 1.0, size=(side, side))


def generate_synthetic(
    n_classes: int,
    per_class: int,
    side: int,
    noise_sigma: float,
    seed: int,
    provenance: str = "synthetic",
) -> Dataset:
    """Per-class prototype patterns plus Gaussian noise; pure in the seed."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if per_class < 1 or side < 1:
        raise ValueError("per_class and side must be >= 1")
    rng = make_rng("samples", seed)
    images = np.empty((n_classes * per_class, side, side))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    row = 0
    for label in range(n_classes):
        proto = class_prototype(label, side)
        for _ in range(per_class):
            images[row] = proto + noise_sigma * rng.normal(size=(side, side))
            labels[row] = label
            row += 1
    return Dataset(
        images=images,
        labels=labels,
        ids=np.arange(len(labels), dtype=np.int64),
        n_classes=n_classes,
        provenance=provenance,
    )


@dataclass(frozen=True)
class UnseenSplit:
    silos: tuple  # tuple[Dataset]
    shared_labels: tuple
    private_labels: tuple  # tuple[tuple[int, ...]] per silo
    unseen_fraction: float


def partition_unseen(
    dataset: Dataset, n_silos: int, p: float, seed: int
) -> UnseenSplit:
    """Split a dataset across silos with an unseen-label fraction p.

    round((1-p) * L) labels are shared (samples spread evenly over silos);
    the rest are private, assigned round-robin, and their samples go wholly
    to the owning silo.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"unseen fraction must be in [0, 1], got {p}")
    if n_silos < 1:
        raise ValueError(f"need at least one silo, got {n_silos}")
    total_labels = dataset.n_classes
    shared_count = int(math.floor((1.0 - p) * total_labels + 0.5))
    if shared_count == 0 and total_labels < n_silos:
        raise ValueError(
            f"cannot partition {total_labels} labels over {n_silos} silos at p={p}: "
            "some silo would receive no data"
        )
    rng = make_rng("partition", seed)
    label_order = rng.permutation(total_labels)
    shared = tuple(sorted(int(x) for x in label_order[:shared_count]))
    private_of = [[] for _ in range(n_silos)]
    for idx, label in enumerate(label_order[shared_count:]):
        private_of[idx % n_silos].append(int(label))
    silo_indices: list[list[int]] = [[] for _ in range(n_silos)]
    for label in shared:
        where = np.flatnonzero(dataset.labels == label)
        where = rng.permutation(where)
        for silo in range(n_silos):
            silo_indices[silo].extend(int(i) for i in where[silo::n_silos])
    for silo, labels in enumerate(private_of):
        for label in labels:
            where = np.flatnonzero(dataset.labels == label)
            silo_indices[silo].extend(int(i) for i in where)
    silos = tuple(
        dataset.subset(
            np.array(sorted(idxs), dtype=np.int64),
            provenance=f"{dataset.provenance}/silo{silo}",
        )
        for silo, idxs in enumerate(silo_indices)
    )
    return UnseenSplit(
        silos=silos,
        shared_labels=shared,
        private_labels=tuple(tuple(sorted(lp)) for lp in private_of),
        unseen_fraction=p,
    )


class EpochSampler:
    """Without-replacement minibatch stream, reshuffled once per epoch.

    The sampler owns its RNG stream; two samplers built from the same seed
    (or restored from the same state) yield identical batch sequences.
    """

    def __init__(self, dataset: Dataset, seed: int):
        if len(dataset) == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.dataset = dataset
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(len(dataset))
        self._cursor = 0

    def next_batch(self, batch_size: int) -> Minibatch:
        n = len(self.dataset)
        if batch_size < 1 or batch_size > n:
            raise ValueError(f"batch size {batch_size} not in [1, {n}]")
        if self._cursor >= n:
            self._perm = self._rng.permutation(n)
            self._cursor = 0
        take = self._perm[self._cursor : self._cursor + batch_size]
        self._cursor += len(take)
        return Minibatch(
            images=self.dataset.images[take], labels=self.dataset.labels[take]
        )

    def get_state(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "perm": self._perm.copy(),
            "cursor": self._cursor,
        }

    def set_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._perm = state["perm"].copy()
        self._cursor = state["cursor"]


def sample_minibatch(dataset: Dataset, batch_size: int, sampler: EpochSampler) -> Minibatch:
    if sampler.dataset is not dataset:
        raise ValueError("sampler bound to a different dataset")
    return sampler.next_batch(batch_size)


# -- on-disk format ----------------------------------------------------------
#
# A dataset directory holds one raw little-endian float32 file per sample
# (side*side values, row-major) and `manifest.txt` with one "relpath label"
# line per sample. Image side is recovered from the file size.


def save_manifest(dataset: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        rel = f"sample_{int(dataset.ids[i]):06d}.f32"
        (out / rel).write_bytes(dataset.images[i].astype("<f4").tobytes())
        lines.append(f"{rel} {int(dataset.labels[i])}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_manifest(manifest_path: str | Path, provenance: str = "manifest") -> Dataset:
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    base = manifest.parent
    images, labels = [], []
    for line_no, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rel, label = line.rsplit(" ", 1)
            label = int(label)
        except ValueError as exc:
            raise ConfigError(f"{manifest}:{line_no}: bad manifest line {line!r}") from exc
        raw = (base / rel).read_bytes()
        n_values = len(raw) // 4
        side = math.isqrt(n_values)
        if side * side != n_values or len(raw) % 4 != 0:
            raise ConfigError(f"{base / rel}: not a square f32 image ({len(raw)} bytes)")
        images.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(side, side))
        labels.append(label)
    if not images:
        raise ConfigError(f"{manifest}: empty manifest")
    sides = {im.shape[0] for im in images}
    if len(sides) != 1:
        raise ConfigError(f"{manifest}: mixed image sides {sorted(sides)}")
    labels_arr = np.array(labels, dtype=np.int64)
    return Dataset(
        images=np.stack(images),
        labels=labels_arr,
        ids=np.arange(len(labels), dtype=np.int64),
        n_classes=int(labels_arr.max()) + 1,
        provenance=provenance,
    )


def holdout_split(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """IID train/eval split over all labels (for manifest-backed runs)."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval fraction must be in (0, 1), got {eval_fraction}")
    rng = make_rng("holdout", seed)
    order = rng.permutation(len(dataset))
    n_eval = max(1, int(round(eval_fraction * len(dataset))))
    eval_idx = np.sort(order[:n_eval])
    train_idx = np.sort(order[n_eval:])
    return (
        dataset.subset(train_idx, provenance=f"{dataset.provenance}/train"),
        dataset.subset(eval_idx, provenance=f"{dataset.provenance}/eval"),
    )
