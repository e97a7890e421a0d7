"""Decentralized training protocol: topology, expert exchange, rounds.

Per round, every silo i dispatches its weights to each neighbor j, where a
copy trains on j's local data for a few steps (the visiting expert), comes
back, is scored against the local model by transport similarity on a shared
probe batch, and finally teaches the local model through the weighted
distillation update. All silos read the previous round's snapshot and write
the next one, so a round is one synchronous barrier and per-silo work items
can run on any number of workers without changing a single bit of output.

Only model weights ever cross silo boundaries; the message bus counts every
transfer and any attempt to move raw samples.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, EpochSampler, UnseenSplit, generate_synthetic, holdout_split, load_manifest, partition_unseen
from .distill import Teacher, TeacherSet, local_pretrain_step, local_update
from .errors import ProtocolError
from .metrics import GLOBAL_SILO, MetricsRow
from .model import ModelWeights, evaluate
from .seeding import derive_seed
from .transport import emd_between_models

log = logging.getLogger("fedemd.federation")

SERVER_ID = -1  # virtual hub used only by the client-server baseline


@dataclass(frozen=True)
class SiloGraph:
    """Directed neighbor lists: j in adjacency[i] means silo i learns from j."""

    n_silos: int
    adjacency: tuple  # tuple[tuple[int, ...]] sorted ascending
    topology: str = "custom"

    def __post_init__(self):
        if len(self.adjacency) != self.n_silos:
            raise ValueError("adjacency length != silo count")
        for i, neigh in enumerate(self.adjacency):
            if any(j == i for j in neigh):
                raise ValueError(f"self-loop at silo {i}")
            if any(not 0 <= j < self.n_silos for j in neigh):
                raise ValueError(f"neighbor id out of range at silo {i}: {neigh}")
            if list(neigh) != sorted(set(neigh)):
                raise ValueError(f"adjacency of silo {i} not sorted/deduped: {neigh}")
        if not self._weakly_connected():
            log.warning(
                "silo graph is not weakly connected; isolated silos never receive knowledge"
            )

    def _weakly_connected(self) -> bool:
        if self.n_silos <= 1:
            return True
        seen = {0}
        frontier = [0]
        undirected = [set() for _ in range(self.n_silos)]
        for i, neigh in enumerate(self.adjacency):
            for j in neigh:
                undirected[i].add(j)
                undirected[j].add(i)
        while frontier:
            node = frontier.pop()
            for j in undirected[node]:
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.n_silos

    @property
    def n_edges(self) -> int:
        return sum(len(neigh) for neigh in self.adjacency)

    @classmethod
    def ring(cls, n_silos: int) -> "SiloGraph":
        adj = []
        for i in range(n_silos):
            neigh = {(i - 1) % n_silos, (i + 1) % n_silos} - {i}
            adj.append(tuple(sorted(neigh)))
        return cls(n_silos=n_silos, adjacency=tuple(adj), topology="ring")

    @classmethod
    def star(cls, n_silos: int) -> "SiloGraph":
        adj = [tuple(range(1, n_silos))]
        adj.extend((0,) for _ in range(1, n_silos))
        return cls(n_silos=n_silos, adjacency=tuple(adj), topology="star")

    @classmethod
    def complete(cls, n_silos: int) -> "SiloGraph":
        adj = tuple(
            tuple(j for j in range(n_silos) if j != i) for i in range(n_silos)
        )
        return cls(n_silos=n_silos, adjacency=adj, topology="complete")

    @classmethod
    def from_edges(cls, n_silos: int, edges: Sequence) -> "SiloGraph":
        adj: list[set] = [set() for _ in range(n_silos)]
        for i, j in edges:
            adj[i].add(j)
        return cls(
            n_silos=n_silos,
            adjacency=tuple(tuple(sorted(s)) for s in adj),
            topology="custom",
        )

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SiloGraph":
        if cfg.topology == "ring":
            return cls.ring(cfg.silos)
        if cfg.topology == "star":
            return cls.star(cfg.silos)
        if cfg.topology == "complete":
            return cls.complete(cfg.silos)
        return cls.from_edges(cfg.silos, cfg.edges)


class MessageBus:
    """Audit point for everything that crosses a silo boundary."""

    def __init__(self):
        self._lock = threading.Lock()
        self.weight_transfers = 0
        self.raw_sample_transfers = 0
        self.per_round: dict = {}

    def send_weights(self, round_k: int, src: int, dst: int, payload) -> ModelWeights:
        if not isinstance(payload, ModelWeights):
            with self._lock:
                self.raw_sample_transfers += 1
            raise ProtocolError(
                f"round {round_k}: only model weights may cross silo boundaries "
                f"({src} -> {dst} tried {type(payload).__name__})"
            )
        with self._lock:
            self.weight_transfers += 1
            self.per_round[round_k] = self.per_round.get(round_k, 0) + 1
        return payload


@dataclass(frozen=True)
class AggregationSpec:
    """Per-silo accumulation indicator; at least one silo participates."""

    participants: tuple

    def __post_init__(self):
        if any(p not in (0, 1) for p in self.participants):
            raise ValueError(f"participants must be 0/1, got {self.participants}")
        if sum(self.participants) < 1:
            raise ValueError("at least one silo must participate in aggregation")


def aggregate(weights: Sequence[ModelWeights], spec) -> ModelWeights:
    """Mean of the participating silos' weights (normalized accumulation)."""
    participants = spec.participants if isinstance(spec, AggregationSpec) else tuple(spec)
    spec = AggregationSpec(participants=tuple(participants))
    if len(weights) != len(spec.participants):
        raise ValueError("participants length != weight count")
    chosen = [w for w, p in zip(weights, spec.participants) if p == 1]
    arch = chosen[0].arch
    for w in chosen[1:]:
        if w.arch != arch:
            raise ValueError("cannot aggregate weights with different architectures")
    scale = 1.0 / len(chosen)
    arrays = {
        name: scale * np.sum([w[name] for w in chosen], axis=0)
        for name in chosen[0].names()
    }
    return ModelWeights(arch, arrays)


@dataclass
class RoundState:
    """Synchronized snapshot: everything a round reads or writes."""

    round_k: int
    weights: list  # list[ModelWeights]
    samplers: list  # list[EpochSampler]


@dataclass
class TrainingContext:
    cfg: ExperimentConfig
    graph: SiloGraph
    silo_data: tuple
    eval_data: Dataset
    bus: MessageBus
    workers: int = 1


@dataclass
class RunResult:
    theta: ModelWeights
    metrics: list
    silo_weights: list
    bus: MessageBus
    split: UnseenSplit
    eval_data: Dataset


def overseas_train(
    weights: ModelWeights,
    dataset: Dataset,
    steps: int,
    alpha: float,
    sampler: EpochSampler,
    batch_size: int,
) -> ModelWeights:
    """Train a visiting copy of ``weights`` on another silo's data.

    The caller's weights are untouched; the copy takes ``steps`` plain
    cross-entropy SGD steps on batches drawn from ``sampler``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if len(dataset) == 0:
        raise ProtocolError("cannot train a visiting expert on an empty silo dataset")
    current = weights
    for _ in range(steps):
        batch = sampler.next_batch(min(batch_size, len(dataset)))
        current, _ = local_pretrain_step(current, batch, alpha)
    return current


def _evaluate_if_due(cfg: ExperimentConfig, round_k: int, weights, eval_data):
    due = round_k % cfg.eval_every == 0 or round_k == cfg.rounds - 1
    if not due:
        return None
    return evaluate(weights, eval_data.images, eval_data.labels)


def _silo_exchange_work(state: RoundState, ctx: TrainingContext, silo: int):
    cfg = ctx.cfg
    k = state.round_k
    started = time.perf_counter()
    alpha = cfg.distill.learning_rate(k)
    batch = state.samplers[silo].next_batch(min(cfg.data.batch, len(ctx.silo_data[silo])))
    neighbors = ctx.graph.adjacency[silo]
    if not neighbors:
        new_weights, loss = local_pretrain_step(state.weights[silo], batch, alpha)
        emd_weights = {}
    else:
        teachers = []
        emd_weights = {}
        for j in neighbors:
            ctx.bus.send_weights(k, silo, j, state.weights[silo])
            # one round-k batch stream per host, shared by every visitor,
            # and independent of the host's own sampler so parallel silo
            # work items never touch shared state
            stream = EpochSampler(ctx.silo_data[j], derive_seed("overseas", cfg.seed, k))
            expert = overseas_train(
                state.weights[silo],
                ctx.silo_data[j],
                cfg.federation.overseas_steps,
                alpha,
                stream,
                cfg.data.batch,
            )
            returned = ctx.bus.send_weights(k, j, silo, expert)
            if cfg.federation.no_emd_weighting:
                weight = 1.0
            else:
                weight = emd_between_models(
                    state.weights[silo],
                    returned,
                    batch,
                    scheme=cfg.emd.marginal_scheme,
                    clamp=cfg.emd.clamp,
                    tol=cfg.emd.tol,
                    max_iter=cfg.emd.max_iter,
                )
            emd_weights[str(j)] = weight
            teachers.append(Teacher(neighbor_id=j, weights=returned, emd_weight=weight))
        result = local_update(
            state.weights[silo], TeacherSet(teachers), batch, cfg.distill, k
        )
        new_weights, loss = result.weights, result.loss
    accuracy = _evaluate_if_due(cfg, k, new_weights, ctx.eval_data)
    row = MetricsRow(
        round=k,
        silo=str(silo),
        train_loss=loss,
        eval_accuracy=accuracy,
        emd_weights=emd_weights,
        cycle_time_ms=(time.perf_counter() - started) * 1e3,
    )
    return new_weights, row


def _silo_local_work(state: RoundState, ctx: TrainingContext, silo: int):
    cfg = ctx.cfg
    started = time.perf_counter()
    alpha = cfg.distill.learning_rate(state.round_k)
    batch = state.samplers[silo].next_batch(min(cfg.data.batch, len(ctx.silo_data[silo])))
    new_weights, loss = local_pretrain_step(state.weights[silo], batch, alpha)
    row = MetricsRow(
        round=state.round_k,
        silo=str(silo),
        train_loss=loss,
        eval_accuracy=_evaluate_if_due(cfg, state.round_k, new_weights, ctx.eval_data),
        emd_weights=None,
        cycle_time_ms=(time.perf_counter() - started) * 1e3,
    )
    return new_weights, row


def _map_silos(fn, n_silos: int, workers: int):
    if workers <= 1:
        return [fn(i) for i in range(n_silos)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_silos)))


def _wrap_silo_errors(fn, round_k: int):
    def wrapped(silo: int):
        try:
            return fn(silo)
        except ProtocolError:
            raise
        except Exception as exc:
            raise ProtocolError(f"round {round_k} silo {silo}: {exc}") from exc

    return wrapped


def run_round(state: RoundState, ctx: TrainingContext):
    """One synchronous exchange round; returns (next state, metrics rows).

    Reads only the incoming snapshot, so per-silo work items are independent
    and the output is identical for any worker count.
    """
    cfg = ctx.cfg
    if state.round_k >= cfg.rounds:
        raise ProtocolError(f"round {state.round_k} out of range (K={cfg.rounds})")
    if cfg.federation.cfl_averaging:
        return _run_round_cfl(state, ctx)
    if cfg.federation.no_distillation:
        work = _wrap_silo_errors(lambda i: _silo_local_work(state, ctx, i), state.round_k)
    else:
        work = _wrap_silo_errors(lambda i: _silo_exchange_work(state, ctx, i), state.round_k)
    results = _map_silos(work, cfg.silos, ctx.workers)
    new_weights = [w for w, _ in results]
    rows = [row for _, row in results]
    rows.append(_global_row(cfg, state.round_k, new_weights, ctx.eval_data))
    next_state = RoundState(
        round_k=state.round_k + 1, weights=new_weights, samplers=state.samplers
    )
    return next_state, rows


def _run_round_cfl(state: RoundState, ctx: TrainingContext):
    """Client-server averaging baseline: local step, then global mean."""
    cfg = ctx.cfg
    k = state.round_k
    work = _wrap_silo_errors(lambda i: _silo_local_work(state, ctx, i), k)
    results = _map_silos(work, cfg.silos, ctx.workers)
    locals_ = [w for w, _ in results]
    for i in range(cfg.silos):
        ctx.bus.send_weights(k, i, SERVER_ID, locals_[i])
    mean = aggregate(locals_, [1] * cfg.silos)
    for i in range(cfg.silos):
        ctx.bus.send_weights(k, SERVER_ID, i, mean)
    rows = []
    accuracy = _evaluate_if_due(cfg, k, mean, ctx.eval_data)
    for _, row in results:
        row.eval_accuracy = accuracy  # every silo now holds the averaged model
        rows.append(row)
    rows.append(_global_row(cfg, k, [mean] * cfg.silos, ctx.eval_data))
    next_state = RoundState(
        round_k=k + 1, weights=[mean] * cfg.silos, samplers=state.samplers
    )
    return next_state, rows


def _global_row(cfg: ExperimentConfig, round_k: int, weights, eval_data) -> MetricsRow:
    started = time.perf_counter()
    theta = aggregate(weights, cfg.participants)
    accuracy = _evaluate_if_due(cfg, round_k, theta, eval_data)
    return MetricsRow(
        round=round_k,
        silo=GLOBAL_SILO,
        train_loss=None,
        eval_accuracy=accuracy,
        emd_weights=None,
        cycle_time_ms=(time.perf_counter() - started) * 1e3,
    )


def _pretrain_round(state: RoundState, ctx: TrainingContext):
    """Round 0: every silo trains alone on its own data."""
    cfg = ctx.cfg

    def work(silo: int):
        started = time.perf_counter()
        weights = state.weights[silo]
        if len(ctx.silo_data[silo]) == 0:
            raise ProtocolError(f"silo {silo} has an empty dataset")
        losses = []
        alpha = cfg.distill.learning_rate(0)
        for _ in range(cfg.federation.pretrain_steps):
            batch = state.samplers[silo].next_batch(
                min(cfg.data.batch, len(ctx.silo_data[silo]))
            )
            weights, loss = local_pretrain_step(weights, batch, alpha)
            losses.append(loss)
        row = MetricsRow(
            round=0,
            silo=str(silo),
            train_loss=float(np.mean(losses)),
            eval_accuracy=_evaluate_if_due(cfg, 0, weights, ctx.eval_data),
            emd_weights=None,
            cycle_time_ms=(time.perf_counter() - started) * 1e3,
        )
        return weights, row

    results = _map_silos(_wrap_silo_errors(work, 0), cfg.silos, ctx.workers)
    new_weights = [w for w, _ in results]
    rows = [row for _, row in results]
    rows.append(_global_row(cfg, 0, new_weights, ctx.eval_data))
    return RoundState(round_k=1, weights=new_weights, samplers=state.samplers), rows


def build_datasets(cfg: ExperimentConfig):
    """Silo datasets plus the held-out global evaluation set."""
    if cfg.data.manifest is not None:
        full = load_manifest(cfg.data.manifest)
        train, eval_data = holdout_split(full, cfg.data.eval_fraction, cfg.seed)
    else:
        train = generate_synthetic(
            cfg.data.classes,
            cfg.data.per_class,
            cfg.data.side,
            cfg.data.noise,
            seed=derive_seed("train-data", cfg.seed),
        )
        eval_data = generate_synthetic(
            cfg.data.classes,
            cfg.data.eval_per_class,
            cfg.data.side,
            cfg.data.noise,
            seed=derive_seed("eval-data", cfg.seed),
            provenance="synthetic/eval",
        )
    split = partition_unseen(train, cfg.silos, cfg.data.unseen_fraction, cfg.seed)
    for i, silo in enumerate(split.silos):
        if len(silo) == 0:
            raise ProtocolError(f"silo {i} received no samples from the partition")
    return split, eval_data


def run_training(
    cfg: ExperimentConfig,
    workers: int = 1,
    run_dir: str | Path | None = None,
) -> RunResult:
    """Full protocol: pretraining round, K-1 exchange rounds, aggregation.

    On any round failure the last good per-silo weights are checkpointed
    into ``run_dir`` (when given) before the error propagates.
    """
    split, eval_data = build_datasets(cfg)
    graph = SiloGraph.from_config(cfg)
    bus = MessageBus()
    ctx = TrainingContext(
        cfg=cfg,
        graph=graph,
        silo_data=split.silos,
        eval_data=eval_data,
        bus=bus,
        workers=workers,
    )
    if cfg.federation.shared_init:
        init = [ModelWeights.initialize(cfg.arch(), cfg.seed)] * cfg.silos
    else:
        init = [
            ModelWeights.initialize(cfg.arch(), derive_seed("silo-init", cfg.seed, i))
            for i in range(cfg.silos)
        ]
    samplers = [
        EpochSampler(split.silos[i], derive_seed("sampler", cfg.seed, i))
        for i in range(cfg.silos)
    ]
    state = RoundState(round_k=0, weights=init, samplers=samplers)
    metrics: list = []
    try:
        state, rows = _pretrain_round(state, ctx)
        metrics.extend(rows)
        for _ in range(1, cfg.rounds):
            state, rows = run_round(state, ctx)
            metrics.extend(rows)
    except Exception:
        if run_dir is not None:
            from .checkpoint import Checkpoint

            out = Path(run_dir)
            out.mkdir(parents=True, exist_ok=True)
            for i, w in enumerate(state.weights):
                Checkpoint.from_weights(w, cfg.digest_bytes()).save(
                    out / f"abort_round{state.round_k}_silo{i}.fefm"
                )
        raise
    theta = aggregate(state.weights, cfg.participants)
    return RunResult(
        theta=theta,
        metrics=metrics,
        silo_weights=list(state.weights),
        bus=bus,
        split=split,
        eval_data=eval_data,
    )
