"""Oracle-equivalence, gradient, and protocol verification suites.

Each suite returns a report of named checks with pass counts; the CLI turns
reports into a table and an exit code, the acceptance tests assert on them.
Tolerances are pinned here, not in the callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ExperimentConfig, config_from_dict
from .data import Minibatch
from .distill import DistillConfig, distill_loss_graph
from .errors import reset_warning_counters
from .federation import run_training
from .metrics import canonical_lines
from .model import ArchSpec, ModelWeights, ce_loss, value_and_grad
from .seeding import derive_seed, make_rng
from .tensor import Tensor, backward, softmax_rows
from .transport import (
    MarginalWeights,
    build_lp,
    emd_score_gradient,
    emd_similarity,
    flow_jacobian,
    solve_transport,
)
from .transport_oracle import assignment_enumeration, transportation_simplex

Array = np.ndarray

OBJECTIVE_TOL = 1e-6
FEASIBILITY_TOL = 1e-6
COMPLEMENTARITY_TOL = 1e-6
DUALITY_GAP_TOL = 1e-6
PRIMITIVE_REL_TOL = 1e-5
IMPLICIT_REL_TOL = 1e-4
FD_STEP_PRIMITIVE = 1e-4
FD_STEP_IMPLICIT = 1e-5
NONDEGENERACY_MARGIN = 1e-2


@dataclass
class CheckResult:
    name: str
    passed: int
    total: int
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.total


@dataclass
class SuiteReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, passed: int, total: int, detail: str = "") -> None:
        self.checks.append(CheckResult(name, passed, total, detail))


def max_rel_err(a: Array, b: Array) -> float:
    """Elementwise error relative to scale, floored at absolute below 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_grad(f: Callable[[Array], float], x: Array, h: float) -> Array:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(x.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


# -- transport instance generators --------------------------------------------


def random_transport_instance(rng: np.random.Generator, n: int, scheme: str):
    """Cost matrix and marginals from a random feature-map pair."""
    from .model import FeatureMap
    from .transport import cost_matrix, marginal_weights

    channels = 5
    u = FeatureMap(1, n, rng.normal(size=(n, channels)))
    v = FeatureMap(1, n, rng.normal(size=(n, channels)))
    return cost_matrix(u, v), marginal_weights(u, v, scheme)


def random_nondegenerate_instance(rng: np.random.Generator, n: int):
    """Random costs with non-uniform marginals; caller screens for margins."""
    cost = rng.uniform(0.0, 2.0, size=(n, n))
    s = rng.uniform(0.2, 1.0, size=n)
    s /= s.sum()
    d = rng.uniform(0.2, 1.0, size=n)
    d /= d.sum()
    return cost, MarginalWeights(supplier=s, demander=d, scheme="uniform")


def is_nondegenerate(solution, margin: float = NONDEGENERACY_MARGIN) -> bool:
    """Vertex nondegeneracy: full basis, flows and reduced costs off zero."""
    if not solution.polished:
        return False
    n = solution.n
    flow = solution.flow.ravel()
    basic = flow > margin * 0.1
    if int(basic.sum()) != 2 * n - 1:
        return False
    if flow[basic].min() < margin:
        return False
    return float(solution.lam[~basic].min()) > margin


# -- suites --------------------------------------------------------------------


def run_emd_suite(instances: int = 1000, seed: int = 20240521) -> SuiteReport:
    """Interior point vs transportation simplex on seeded random instances."""
    report = SuiteReport("emd")
    rng = make_rng("verify-emd", seed)
    obj_ok = feas_ok = comp_ok = gap_ok = 0
    perm_ok = perm_total = 0
    worst_gap = 0.0
    for trial in range(instances):
        n = 2 + trial % 7
        scheme = "uniform" if trial % 2 == 0 else "norm_proportional"
        cost, marg = random_transport_instance(rng, n, scheme)
        sol = solve_transport(cost, marg)
        oracle = transportation_simplex(cost, marg.supplier, marg.demander)
        gap = abs(sol.objective - oracle.objective)
        worst_gap = max(worst_gap, gap)
        obj_ok += gap < OBJECTIVE_TOL
        row_err = np.abs(sol.flow.sum(axis=1) - marg.supplier).max()
        col_err = np.abs(sol.flow.sum(axis=0) - marg.demander).max()
        feas_ok += max(row_err, col_err) < FEASIBILITY_TOL
        comp_ok += np.max(np.abs(sol.lam * sol.flow.ravel())) < COMPLEMENTARITY_TOL
        problem = build_lp(cost, marg)
        dual_gap = abs(sol.objective + float(problem.b @ sol.nu))
        gap_ok += dual_gap < DUALITY_GAP_TOL
        if scheme == "uniform" and n <= 6:
            perm_total += 1
            perm_ok += abs(oracle.objective - assignment_enumeration(cost)) < 1e-9
    report.add("objective_vs_simplex_oracle", obj_ok, instances,
               f"worst gap {worst_gap:.2e}")
    report.add("flow_marginal_feasibility", feas_ok, instances)
    report.add("complementary_slackness", comp_ok, instances)
    report.add("duality_gap", gap_ok, instances)
    report.add("simplex_vs_permutation_enumeration", perm_ok, perm_total)
    return report


def _primitive_cases(rng: np.random.Generator):
    """(name, build) pairs; build returns (x0, scalar function of x as Tensor)."""

    def away_from(val, arr, gap=0.05):
        arr = arr.copy()
        arr[np.abs(arr - val) < gap] += 2 * gap
        return arr

    def case_add():
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4,))
        w = rng.uniform(-1, 1, (3, 4))
        return a, lambda t: ((t + Tensor(b)) * Tensor(w)).sum()

    def case_mul():
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (3, 4))
        return a, lambda t: (t * Tensor(b)).sum()

    def case_div():
        a = rng.uniform(-1, 1, (3, 3))
        b = rng.uniform(0.5, 1.5, (3, 3))
        return a, lambda t: (t / Tensor(b)).sum()

    def case_matmul():
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        w = rng.uniform(-1, 1, (3, 2))
        return a, lambda t: ((t @ Tensor(b)) * Tensor(w)).sum()

    def case_relu():
        a = away_from(0.0, rng.uniform(-1, 1, (4, 4)))
        w = rng.uniform(-1, 1, (4, 4))
        return a, lambda t: (t.relu() * Tensor(w)).sum()

    def case_exp():
        a = rng.uniform(-1, 1, (3, 3))
        w = rng.uniform(-1, 1, (3, 3))
        return a, lambda t: (t.exp() * Tensor(w)).sum()

    def case_log():
        a = rng.uniform(0.2, 2.0, (3, 3))
        w = rng.uniform(-1, 1, (3, 3))
        return a, lambda t: (t.log() * Tensor(w)).sum()

    def case_sum_axis():
        a = rng.uniform(-1, 1, (2, 3, 4))
        w = rng.uniform(-1, 1, (2, 4))
        return a, lambda t: (t.sum(axis=1) * Tensor(w)).sum()

    def case_reshape():
        a = rng.uniform(-1, 1, (2, 6))
        w = rng.uniform(-1, 1, (3, 4))
        return a, lambda t: (t.reshape(3, 4) * Tensor(w)).sum()

    def case_clamp_min():
        a = away_from(0.1, rng.uniform(-1, 1, (3, 3)))
        w = rng.uniform(-1, 1, (3, 3))
        return a, lambda t: (t.clamp_min(0.1) * Tensor(w)).sum()

    def case_softmax():
        a = rng.uniform(-1, 1, (2, 5))
        w = rng.uniform(-1, 1, (2, 5))
        temperature = float(rng.uniform(0.5, 3.0))
        return a, lambda t: (softmax_rows(t, temperature) * Tensor(w)).sum()

    def case_emd_layer():
        a = rng.normal(size=(2, 3))
        other = rng.normal(size=(2, 3))
        return a, lambda t: emd_similarity(t, Tensor(other))

    return [
        ("add", case_add), ("mul", case_mul), ("div", case_div),
        ("matmul", case_matmul), ("relu", case_relu), ("exp", case_exp),
        ("log", case_log), ("sum_axis", case_sum_axis), ("reshape", case_reshape),
        ("clamp_min", case_clamp_min), ("softmax", case_softmax),
        ("emd_layer", case_emd_layer),
    ]


def _grad_of_tensor_fn(fn, x0: Array) -> Array:
    leaf = Tensor(x0, requires_grad=True, op="x")
    out = fn(leaf)
    backward(out)
    return leaf.grad if leaf.grad is not None else np.zeros_like(x0)


def _tiny_batch(rng: np.random.Generator, arch: ArchSpec, batch: int = 3) -> Minibatch:
    return Minibatch(
        images=rng.normal(size=(batch, arch.image_side, arch.image_side)),
        labels=rng.integers(0, arch.n_classes, size=batch),
    )


def _network_ce_case(rng: np.random.Generator, kink_margin: float = 2e-3):
    """Tiny net + batch, resampled until no relu pre-activation sits within
    ``kink_margin`` of zero (an FD step of 1e-4 on a weight must not flip
    an activation sign, or the central difference is not a derivative)."""
    from .model import patchify

    arch = ArchSpec(image_side=4, patch_size=2, embed_dim=4, n_classes=3)
    while True:
        weights = ModelWeights.initialize(arch, int(rng.integers(0, 2**31)))
        batch = _tiny_batch(rng, arch)
        patches = patchify(batch.images, arch.patch_size).reshape(-1, arch.patch_size**2)
        pre = patches @ weights["embed.w"] + weights["embed.b"]
        if np.min(np.abs(pre)) > kink_margin:
            return arch, weights, batch


def _check_weight_gradient(weights: ModelWeights, loss_fn, h: float) -> float:
    """Worst FD-vs-reverse-mode error over all weight coordinates."""
    _, grads = value_and_grad(weights, loss_fn)
    worst = 0.0
    for name in weights.names():
        base = weights[name]

        def f(arr, name=name):
            arrays = {n: (arr if n == name else weights[n]) for n in weights.names()}
            perturbed = ModelWeights(weights.arch, arrays)
            loss, _ = value_and_grad(perturbed, loss_fn)
            return loss

        fd = finite_difference_grad(f, base.copy(), h)
        worst = max(worst, max_rel_err(fd, grads[name]))
    return worst


def run_grad_suite(
    primitive_cases: int = 100,
    implicit_instances: int = 200,
    seed: int = 20240521,
) -> SuiteReport:
    """Finite-difference checks: primitives, losses, and implicit transport
    gradients on screened non-degenerate instances."""
    report = SuiteReport("grad")
    rng = make_rng("verify-grad", seed)

    for name, build in _primitive_cases(rng) if primitive_cases > 0 else []:
        passed = 0
        worst = 0.0
        for _ in range(primitive_cases):
            x0, fn = build()
            ad = _grad_of_tensor_fn(fn, x0)
            fd = finite_difference_grad(
                lambda arr: float(fn(Tensor(arr, op="x")).data), x0, FD_STEP_PRIMITIVE
            )
            err = max_rel_err(fd, ad)
            worst = max(worst, err)
            passed += err < PRIMITIVE_REL_TOL
        report.add(f"primitive_{name}", passed, primitive_cases, f"worst {worst:.2e}")

    # composed losses: network cross-entropy and the full distillation loss
    composed = (
        [("network_cross_entropy", None), ("distill_loss", "distill")]
        if primitive_cases > 0
        else []
    )
    for case_name, make_loss in composed:
        passed = 0
        worst = 0.0
        cases = primitive_cases
        for _ in range(cases):
            arch, weights, batch = _network_ce_case(rng)
            if make_loss is None:
                loss_fn = lambda params, a=arch, b=batch: ce_loss(params, b, a)
            else:
                cfg = DistillConfig(beta=0.5, temperature=2.0)
                teachers = [
                    rng.normal(size=(batch.size, arch.n_classes)) for _ in range(2)
                ]

                def loss_fn(params, a=arch, b=batch, t=teachers, c=cfg):
                    from .model import logits_graph

                    return distill_loss_graph(
                        logits_graph(params, b, a), t, b.labels, c, a.n_classes
                    )

            err = _check_weight_gradient(weights, loss_fn, FD_STEP_PRIMITIVE)
            worst = max(worst, err)
            passed += err < PRIMITIVE_REL_TOL
        report.add(case_name, passed, cases, f"worst {worst:.2e}")

    if implicit_instances == 0:
        return report

    # implicit differentiation of the transport score, against FD of the solver
    passed = 0
    attempts = 0
    accepted = 0
    worst = 0.0
    h = FD_STEP_IMPLICIT
    while accepted < implicit_instances and attempts < 50 * implicit_instances:
        attempts += 1
        n = 2 + attempts % 4
        cost, marg = random_nondegenerate_instance(rng, n)
        sol = solve_transport(cost, marg)
        if not is_nondegenerate(sol):
            continue
        accepted += 1
        problem = build_lp(cost, marg)
        grad = emd_score_gradient(problem, sol)
        fd = np.zeros_like(cost)
        for p in range(n):
            for q in range(n):
                up = cost.copy()
                up[p, q] += h
                down = cost.copy()
                down[p, q] -= h
                fd[p, q] = (
                    solve_transport(up, marg).score - solve_transport(down, marg).score
                ) / (2 * h)
        err = max_rel_err(fd, grad)
        worst = max(worst, err)
        passed += err < IMPLICIT_REL_TOL
    report.add(
        "implicit_score_gradient", passed, accepted,
        f"worst {worst:.2e} ({attempts} sampled)",
    )

    # flow Jacobian itself on small instances: entries match solver FD
    passed = 0
    accepted = 0
    attempts = 0
    worst = 0.0
    while accepted < 20 and attempts < 1000:
        attempts += 1
        cost, marg = random_nondegenerate_instance(rng, 2)
        sol = solve_transport(cost, marg)
        if not is_nondegenerate(sol):
            continue
        accepted += 1
        problem = build_lp(cost, marg)
        jac = flow_jacobian(problem, sol)
        fd = np.zeros_like(jac)
        for col in range(4):
            up = cost.copy()
            up.ravel()[col] += h
            down = cost.copy()
            down.ravel()[col] -= h
            fd[:, col] = (
                solve_transport(up, marg).flow.ravel()
                - solve_transport(down, marg).flow.ravel()
            ) / (2 * h)
        err = max_rel_err(fd, jac)
        worst = max(worst, err)
        passed += err < IMPLICIT_REL_TOL
    report.add("flow_jacobian_fd", passed, accepted, f"worst {worst:.2e}")
    return report


def protocol_check_config(seed: int = 11, rounds: int = 10) -> ExperimentConfig:
    """Small 4-silo ring run used by the determinism and privacy checks."""
    return config_from_dict(
        {
            "seed": seed,
            "silos": 4,
            "topology": "ring",
            "rounds": rounds,
            "model": {"patch_size": 4, "embed_dim": 8},
            "data": {
                "classes": 8, "per_class": 12, "eval_per_class": 4,
                "side": 8, "noise": 0.1, "unseen_fraction": 1.0, "batch": 8,
            },
            "distill": {"alpha": 0.05},
            "federation": {"overseas_steps": 2, "pretrain_steps": 10},
        }
    )


def run_protocol_suite(seed: int = 11) -> SuiteReport:
    """Worker-count determinism, rerun determinism, privacy audit."""
    report = SuiteReport("protocol")
    reset_warning_counters()
    cfg = protocol_check_config(seed=seed)
    serial = run_training(cfg, workers=1)
    parallel = run_training(cfg, workers=4)
    repeat = run_training(cfg, workers=1)

    same_theta = int(serial.theta.allequal(parallel.theta))
    same_metrics = int(canonical_lines(serial.metrics) == canonical_lines(parallel.metrics))
    report.add("theta_identical_1_vs_4_workers", same_theta, 1)
    report.add("metrics_identical_1_vs_4_workers", same_metrics, 1)
    report.add("theta_identical_on_rerun", int(serial.theta.allequal(repeat.theta)), 1)
    report.add(
        "metrics_identical_on_rerun",
        int(canonical_lines(serial.metrics) == canonical_lines(repeat.metrics)),
        1,
    )

    graph_edges = 8  # 4-silo ring, two neighbors each
    per_round_ok = sum(
        serial.bus.per_round.get(k, 0) == 2 * graph_edges for k in range(1, cfg.rounds)
    )
    report.add("weight_transfers_per_round", per_round_ok, cfg.rounds - 1)
    report.add("no_round0_transfers", int(serial.bus.per_round.get(0, 0) == 0), 1)
    report.add("no_raw_sample_transfers", int(serial.bus.raw_sample_transfers == 0), 1)

    # with distillation disabled the run is independent per-silo SGD
    from dataclasses import replace

    from .data import EpochSampler
    from .distill import local_pretrain_step
    from .federation import build_datasets

    no_distill_cfg = replace(
        cfg, federation=replace(cfg.federation, no_distillation=True)
    )
    run = run_training(no_distill_cfg, workers=2)
    split, _ = build_datasets(no_distill_cfg)
    matches = 0
    for i in range(no_distill_cfg.silos):
        w = ModelWeights.initialize(
            no_distill_cfg.arch(), derive_seed("silo-init", no_distill_cfg.seed, i)
        )
        sampler = EpochSampler(split.silos[i], derive_seed("sampler", no_distill_cfg.seed, i))
        alpha = no_distill_cfg.distill.learning_rate(0)
        for _ in range(no_distill_cfg.federation.pretrain_steps):
            batch = sampler.next_batch(min(no_distill_cfg.data.batch, len(split.silos[i])))
            w, _loss = local_pretrain_step(w, batch, alpha)
        for k in range(1, no_distill_cfg.rounds):
            alpha = no_distill_cfg.distill.learning_rate(k)
            batch = sampler.next_batch(min(no_distill_cfg.data.batch, len(split.silos[i])))
            w, _loss = local_pretrain_step(w, batch, alpha)
        matches += run.silo_weights[i].allequal(w)
    report.add("no_distill_equals_independent_sgd", matches, no_distill_cfg.silos)
    return report


def format_report(report: SuiteReport) -> str:
    lines = [f"suite: {report.suite}"]
    for c in report.checks:
        status = "PASS" if c.ok else "FAIL"
        detail = f"  [{c.detail}]" if c.detail else ""
        lines.append(f"  {status}  {c.name}: {c.passed}/{c.total}{detail}")
    lines.append(f"  => {'OK' if report.ok else 'FAILED'}")
    return "\n".join(lines)
