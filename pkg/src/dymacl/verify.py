"""Self-check suites: gradients, permutation invariance, loss oracles.

Each suite returns a ``SuiteResult``.  ``inject`` deliberately breaks one
component for the duration of a run so the harness can prove it notices.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import dyan
from . import env as E
from . import learners
from . import reference as R
from . import tensor as T
from . import transfer
from .replay import Transition

SUITES = ("gradient", "permutation", "loss")
FAULTS = SUITES


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    worst: float
    tolerance: float
    seconds: float
    detail: str = ""


# ---------------------------------------------------------------- fixtures

def random_obs(rng, n_mates=None, n_enemies=None, max_neighbors=6):
    if n_mates is None:
        n_mates = int(rng.integers(0, max_neighbors + 1))
    if n_enemies is None:
        n_enemies = int(rng.integers(0, max_neighbors + 1))
    return E.Observation(rng.uniform(0, 1, E.ENV_FEATURE_WIDTH),
                         rng.uniform(-1, 1, E.SELF_FEATURE_WIDTH),
                         rng.uniform(-1, 1, (n_mates, E.NEIGHBOR_FEATURE_WIDTH)),
                         rng.uniform(-1, 1, (n_enemies, E.NEIGHBOR_FEATURE_WIDTH)))


def random_transition(rng, task_id, hidden_units, n_agents=None):
    n = int(rng.integers(1, 4)) if n_agents is None else n_agents
    done = bool(rng.random() < 0.2)
    nxt, agent_done = [], []
    for _ in range(n):
        dead = bool(rng.random() < 0.2)
        nxt.append(None if dead else random_obs(rng, max_neighbors=4))
        agent_done.append(done or dead)
    rewards = tuple(float(v) for v in rng.normal(0, 1, n))
    return Transition(task_id, tuple(random_obs(rng, max_neighbors=4) for _ in range(n)),
                      tuple(int(a) for a in rng.integers(0, E.NUM_ACTIONS, n)), rewards,
                      float(sum(rewards)), tuple(nxt), tuple(agent_done), done,
                      rng.uniform(-0.5, 0.5, (n, hidden_units)),
                      rng.uniform(-0.5, 0.5, (n, hidden_units)))


def _projected(build, arrays, probe):
    tensors = {k: T.Tensor(v) for k, v in arrays.items()}
    return float(np.sum(build(tensors).data * probe))


def op_gradient_error(build, arrays, rng, h=1e-5) -> float:
    """Max relative error of backward() vs central differences of a random projection."""
    out_shape = build({k: T.Tensor(v) for k, v in arrays.items()}).shape
    probe = rng.normal(size=out_shape)
    params = {k: T.parameter(v) for k, v in arrays.items()}
    grads = T.backward(T.total(T.mul(build(params), probe)), params)
    numeric = R.finite_difference(lambda a: _projected(build, a, probe),
                                  {k: v.copy() for k, v in arrays.items()}, h)
    return max(R.relative_error(grads[k], numeric[k]) for k in arrays)


def network_gradient_error(spec, seed, n_mates, n_enemies, h=1e-5) -> float:
    """End-to-end error of d(q . probe)/d(params) against the loop oracle."""
    rng = np.random.default_rng(seed)
    params = dyan.build(spec, seed)
    obs = random_obs(rng, n_mates, n_enemies)
    hidden = rng.uniform(-0.5, 0.5, spec.hidden_units)
    probe = rng.normal(size=spec.num_actions)
    tensors = params.tensors(requires_grad=True)
    out = dyan.forward_batch(tensors, spec, dyan.pack([obs], spec), hidden.reshape(1, -1))
    grads = T.backward(T.total(T.mul(out.q, probe)), tensors)
    numeric = R.finite_difference(lambda a: float(R.forward(a, spec, obs, hidden)[0] @ probe),
                                  {k: v.copy() for k, v in params.arrays.items()}, h)
    return max(R.relative_error(grads[k], numeric[k]) for k in grads)


# ---------------------------------------------------------------- suites

def _gru_arrays(rng, n_in=4, width=5, batch=3):
    arrays = {"x": rng.normal(size=(batch, n_in)), "h": rng.uniform(-1, 1, (batch, width))}
    for gate in "zrh":
        arrays[f"W_{gate}"] = rng.normal(scale=0.5, size=(n_in, width))
        arrays[f"U_{gate}"] = rng.normal(scale=0.5, size=(width, width))
        arrays[f"b_{gate}"] = rng.normal(scale=0.5, size=width)
    return arrays


def gradient_suite(seeds: int = 20, op_tol: float = 1e-4, net_tol: float = 1e-3) -> SuiteResult:
    """Per-op and end-to-end finite-difference checks."""
    start = time.perf_counter()
    worst_op = worst_net = 0.0
    checks = 0
    failures = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        cases = []
        for act in T.ACTIVATIONS:
            arrays = {"x": rng.normal(size=(4, 5)), "W": rng.normal(size=(5, 3)),
                      "b": rng.normal(size=3)}
            cases.append((f"dense/{act}", lambda p, a=act: T.dense(p["x"], p["W"], p["b"], a),
                          arrays))
        cases.append(("gru", lambda p: T.gru_step(p["x"], p["h"],
                                                  {k: p[k] for k in T.GRU_PARAM_NAMES}),
                      _gru_arrays(rng)))
        n_items = int(rng.integers(1, 8))
        seg = np.sort(rng.integers(0, 3, n_items))
        for kind in T.AGGREGATIONS:
            cases.append((f"aggregate/{kind}",
                          lambda p, k=kind, s=seg: T.segment_aggregate(k, p["x"], s, 3),
                          {"x": rng.normal(size=(n_items, 4))}))
        cases.append(("log_softmax", lambda p: T.log_softmax(p["x"]),
                      {"x": rng.normal(size=(3, 6))}))
        for name, build, arrays in cases:
            err = op_gradient_error(build, arrays, rng)
            checks += 1
            worst_op = max(worst_op, err)
            if not err < op_tol:
                failures.append(f"{name} seed {seed}: {err:.2e}")
        for kind in T.AGGREGATIONS:
            spec = dyan.DyanSpec(hidden_units=4, aggregation=kind)
            for counts in ((0, 0), (1, 1), (3, 4)):
                err = network_gradient_error(spec, seed, *counts)
                checks += 1
                worst_net = max(worst_net, err)
                if not err < net_tol:
                    failures.append(f"dyan/{kind}/{counts} seed {seed}: {err:.2e}")
    detail = f"worst op {worst_op:.2e} (< {op_tol:g}), worst network {worst_net:.2e} (< {net_tol:g})"
    if failures:
        detail += "; " + "; ".join(failures[:5])
    return SuiteResult("gradient", not failures, checks, max(worst_op, worst_net), net_tol,
                       time.perf_counter() - start, detail)


def permutation_suite(observations: int = 1000, tol: float = 1e-9, seed: int = 0) -> SuiteResult:
    """Forward outputs must not depend on the order of neighbor lists."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    checks = 0
    for kind in T.AGGREGATIONS:
        spec = dyan.DyanSpec(aggregation=kind)
        params = dyan.build(spec, seed)
        obs = [random_obs(rng, max_neighbors=8) for _ in range(observations)]
        shuffled = [E.Observation(o.env_features, o.self_features,
                                  o.teammate_features[rng.permutation(o.n_teammates)],
                                  o.enemy_features[rng.permutation(o.n_enemies)]) for o in obs]
        hidden = rng.uniform(-1, 1, (observations, spec.hidden_units))
        qa, ha = dyan.q_values(params, spec, obs, hidden)
        qb, hb = dyan.q_values(params, spec, shuffled, hidden)
        worst = max(worst, float(np.max(np.abs(qa - qb))), float(np.max(np.abs(ha - hb))))
        checks += observations
    return SuiteResult("permutation", worst <= tol, checks, worst, tol,
                       time.perf_counter() - start,
                       f"max |delta| {worst:.2e} over {checks} observations (<= {tol:g})")


def _head_only(spec, logits):
    arrays = {n: np.zeros(s) for n, s, _ in dyan.layer_shapes(spec)}
    arrays["head.b"] = np.asarray(logits, dtype=float)
    return dyan.DyanParams(arrays)


def loss_suite(seeds: int = 10, tol: float = 1e-10, draws: int = 10_000) -> SuiteResult:
    """Transfer losses against scalar oracles, plus KL identities."""
    start = time.perf_counter()
    spec = dyan.DyanSpec(hidden_units=6)
    worst = 0.0
    checks = 0
    failures = []

    def compare(name, got, want):
        nonlocal worst, checks
        err = abs(got - want) / max(1.0, abs(want))
        worst = max(worst, err)
        checks += 1
        if not err <= tol:
            failures.append(f"{name}: {got!r} vs {want!r}")

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        online, target = dyan.build(spec, seed), dyan.build(spec, seed + 1000)
        for algorithm in ("IQL", "VDN"):
            batches = [[random_transition(rng, i, spec.hidden_units) for _ in range(4)]
                       for i in range(2)]
            got = float(transfer.buffer_reuse_loss(batches, online, target, spec, 0.98,
                                                   algorithm).data)
            compare(f"reuse/{algorithm}/{seed}", got,
                    R.buffer_reuse_loss(batches, online, target, spec, 0.98, algorithm))
            single = batches[1]
            a = float(transfer.buffer_reuse_loss([single], online, target, spec, 0.98,
                                                 algorithm, "mean").data)
            b = float(learners.td_loss(single, online, target, spec, 0.98, algorithm).data)
            checks += 1
            if a != b:
                failures.append(f"reuse k=1 not bit-identical ({a!r} vs {b!r})")
        teachers = [dyan.build(spec, seed + 2000 + t) for t in range(2)]
        states = [(random_obs(rng), rng.uniform(-0.5, 0.5, spec.hidden_units)) for _ in range(4)]
        for omega in (0.5, 1.0, 2.0):
            got = float(transfer.distillation_loss(teachers, online, spec, states, omega).data)
            compare(f"distill/{omega}/{seed}", got,
                    R.distillation_loss(teachers, online, spec, states, omega))
        same = float(transfer.distillation_loss([online], online, spec, states, 1.0).data)
        checks += 1
        if same != 0.0:
            failures.append(f"distillation with teacher == student is {same!r}, not 0")

    rng = np.random.default_rng(12345)
    small = dyan.DyanSpec(hidden_units=4)
    blank = E.Observation(np.zeros(16), np.zeros(25), np.zeros((0, 3)), np.zeros((0, 3)))
    state = [(blank, np.zeros(4))]
    negatives = 0
    for _ in range(draws):
        scale = 10.0 ** rng.uniform(-3, 1.5)
        t = _head_only(small, rng.normal(scale=scale, size=E.NUM_ACTIONS))
        s = _head_only(small, rng.normal(scale=scale, size=E.NUM_ACTIONS))
        if float(transfer.distillation_loss([t], s, small, state,
                                            float(rng.uniform(0.05, 5.0))).data) < 0.0:
            negatives += 1
    checks += draws
    if negatives:
        failures.append(f"{negatives} negative distillation losses in {draws} draws")
    detail = f"worst relative gap {worst:.2e} (<= {tol:g}); {draws} KL draws, {negatives} negative"
    if failures:
        detail += "; " + "; ".join(failures[:5])
    return SuiteResult("loss", not failures, checks, worst, tol, time.perf_counter() - start, detail)


# ---------------------------------------------------------------- fault injection

@contextlib.contextmanager
def inject(fault: str | None):
    """Temporarily break the component a suite is meant to guard."""
    if fault is None:
        yield
        return
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    saved = []

    def patch(module, name, value):
        saved.append((module, name, getattr(module, name)))
        setattr(module, name, value)

    if fault == "gradient":
        original = T.tanh

        def tanh(a):
            out = original(a)
            backward = out._backward
            if backward is not None:
                out._backward = lambda g: tuple(1.01 * x for x in backward(g))
            return out
        patch(T, "tanh", tanh)
    elif fault == "permutation":
        original = T.segment_aggregate

        def segment_aggregate(kind, items, segments, n_segments):
            items = T.as_tensor(items)
            weights = 1.0 + 1e-6 * np.arange(items.shape[0]).reshape(-1, 1)
            return original(kind, T.mul(items, weights), segments, n_segments)
        patch(T, "segment_aggregate", segment_aggregate)
    else:
        original = transfer.reduce_loss
        patch(transfer, "reduce_loss", lambda per, reduction: T.scale(original(per, reduction),
                                                                       1.0 + 1e-6))
    try:
        yield
    finally:
        for module, name, value in reversed(saved):
            setattr(module, name, value)


def run_suites(names=SUITES, fault: str | None = None, quick: bool = False) -> list[SuiteResult]:
    runners = {
        "gradient": lambda: gradient_suite(seeds=3 if quick else 20),
        "permutation": lambda: permutation_suite(observations=100 if quick else 1000),
        "loss": lambda: loss_suite(seeds=3 if quick else 10, draws=500 if quick else 10_000),
    }
    with inject(fault):
        return [runners[name]() for name in names]


def format_table(results) -> str:
    rows = [("suite", "status", "checks", "worst", "tolerance", "seconds")]
    for r in results:
        rows.append((r.name, "PASS" if r.passed else "FAIL", str(r.checks), f"{r.worst:.2e}",
                     f"{r.tolerance:g}", f"{r.seconds:.1f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    for r in results:
        lines.append(f"{r.name}: {r.detail}")
    return "\n".join(lines)
