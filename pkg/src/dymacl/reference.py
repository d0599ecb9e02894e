"""Slow scalar re-implementations used as oracles.

Nothing here imports the autodiff engine: every formula is re-coded with
explicit loops over observations, neighbors and actions so that it can
check the vectorized path independently.
"""

from __future__ import annotations

import math

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _relu(x):
    return np.maximum(x, 0.0)


def _branch(arrays, key, row, layers):
    out = _relu(row @ arrays[f"{key}.W"] + arrays[f"{key}.b"])
    for layer in range(1, layers):
        out = _relu(out @ arrays[f"{key}.W{layer}"] + arrays[f"{key}.b{layer}"])
    return out


def aggregate(kind, rows, width):
    if len(rows) == 0:
        return np.zeros(width)
    if kind == "SUM":
        acc = np.zeros(width)
        for r in rows:
            acc = acc + r
        return acc
    if kind == "MEAN":
        acc = np.zeros(width)
        for r in rows:
            acc = acc + r
        return acc / len(rows)
    if kind == "MAX":
        acc = np.array(rows[0], dtype=float)
        for r in rows[1:]:
            acc = np.maximum(acc, r)
        return acc
    raise ValueError(kind)


def gru(x, h, a):
    z = _sigmoid(x @ a["gru.W_z"] + h @ a["gru.U_z"] + a["gru.b_z"])
    r = _sigmoid(x @ a["gru.W_r"] + h @ a["gru.U_r"] + a["gru.b_r"])
    cand = np.tanh(x @ a["gru.W_h"] + (r * h) @ a["gru.U_h"] + a["gru.b_h"])
    return (1.0 - z) * h + z * cand


def pad(obs, mate_slots, enemy_slots):
    width = obs.teammate_features.shape[1]
    vec = list(obs.env_features) + list(obs.self_features)
    for i in range(mate_slots):
        vec += list(obs.teammate_features[i]) if i < obs.n_teammates else [0.0] * width
    for i in range(enemy_slots):
        vec += list(obs.enemy_features[i]) if i < obs.n_enemies else [0.0] * width
    return np.array(vec)


def forward(arrays, spec, obs, hidden=None):
    """Single-observation forward: ``(q, hidden_next, mate_emb, enemy_emb)``."""
    h_units = spec.hidden_units
    h = np.zeros(h_units) if hidden is None else np.asarray(hidden, dtype=float)
    if spec.mode == "dyan":
        env_self = np.concatenate([obs.env_features, obs.self_features])
        env_part = _relu(env_self @ arrays["env.W"] + arrays["env.b"])
        mk = "mate" if spec.split_teams else "neighbor"
        ek = "enemy" if spec.split_teams else "neighbor"
        mates = [_branch(arrays, mk, row, spec.branch_layers) for row in obs.teammate_features]
        enemies = [_branch(arrays, ek, row, spec.branch_layers) for row in obs.enemy_features]
        mate_emb = aggregate(spec.aggregation, mates, h_units)
        enemy_emb = aggregate(spec.aggregation, enemies, h_units)
        core_in = np.concatenate([env_part, mate_emb, enemy_emb])
    else:
        flat = pad(obs, spec.teammate_slots, spec.enemy_slots)
        core_in = _relu(flat @ arrays["flat.W"] + arrays["flat.b"])
        mate_emb = enemy_emb = np.zeros(h_units)
    if spec.use_gru:
        h_next = gru(core_in, h, arrays)
    else:
        h_next = _relu(core_in @ arrays["core.W"] + arrays["core.b"])
    q = h_next @ arrays["head.W"] + arrays["head.b"]
    return q, h_next, mate_emb, enemy_emb


def _arrays(params):
    return params.arrays if hasattr(params, "arrays") else params


def _bootstrap(tr, i, target, spec):
    if tr.agent_done[i] or tr.next_observations[i] is None:
        return 0.0
    q, _, _, _ = forward(_arrays(target), spec, tr.next_observations[i], tr.next_hidden[i])
    best = q[0]
    for v in q[1:]:
        best = v if v > best else best
    return float(best)


def iql_sample_loss(tr, online, target, spec, gamma):
    errs = []
    for i, obs in enumerate(tr.observations):
        q, _, _, _ = forward(_arrays(online), spec, obs, tr.hidden[i])
        y = tr.rewards[i] + gamma * _bootstrap(tr, i, target, spec)
        errs.append((y - q[tr.actions[i]]) ** 2)
    return sum(errs) / len(errs)


def vdn_sample_loss(tr, online, target, spec, gamma):
    q_tot = 0.0
    boot = 0.0
    for i, obs in enumerate(tr.observations):
        q, _, _, _ = forward(_arrays(online), spec, obs, tr.hidden[i])
        q_tot += q[tr.actions[i]]
        boot += _bootstrap(tr, i, target, spec)
    y = tr.team_reward + (0.0 if tr.done else gamma * boot)
    return (y - q_tot) ** 2


def td_loss(batch, online, target, spec, gamma, algorithm="IQL", reduction="mean"):
    fn = iql_sample_loss if algorithm == "IQL" else vdn_sample_loss
    values = [fn(tr, online, target, spec, gamma) for tr in batch]
    s = math.fsum(values)
    return s / len(values) if reduction == "mean" else s


def buffer_reuse_loss(per_task_batches, online, target, spec, gamma, algorithm="IQL"):
    """Literal double sum over tasks and samples."""
    fn = iql_sample_loss if algorithm == "IQL" else vdn_sample_loss
    total = 0.0
    for batch in per_task_batches:
        for tr in batch:
            total += fn(tr, online, target, spec, gamma)
    return total


def softmax(logits, temperature=1.0):
    z = [v / temperature for v in logits]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = math.fsum(e)
    return [v / s for v in e]


def kl(p, q):
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def distillation_loss(teachers, student, spec, states, omega=1.0):
    """Sum over teachers and states of KL(softmax(q_t / omega) || softmax(q_s))."""
    total = 0.0
    for teacher in teachers:
        t_arrays = _arrays(getattr(teacher, "params", teacher))
        for obs, h in states:
            qt, _, _, _ = forward(t_arrays, spec, obs, h)
            qs, _, _, _ = forward(_arrays(student), spec, obs, h)
            total += kl(softmax(qt, omega), softmax(qs, 1.0))
    return total


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f(arrays)`` w.r.t. every entry."""
    grads = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(arrays)
            flat[i] = old - h
            down = f(arrays)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
