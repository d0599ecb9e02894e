"""IQL and VDN learners on a shared DyAN, plus the episode/training loop."""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import dyan
from . import env as E
from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .replay import TaskBuffer, Transition


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "IQL"
    gamma: float = 0.98
    batch_size: int = 32
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_anneal_episodes: int = 99
    eps_anneal_steps: int | None = None
    target_update_interval: int = 20
    learning_rate: float = 1e-4
    optimizer: str = "Adam"
    optimizer_eps: float | None = None
    grad_clip: float = 10.0
    buffer_capacity: int = 100_000
    min_fill: int = 5000
    train_every: int = 1

    def __post_init__(self):
        if self.algorithm not in ("IQL", "VDN"):
            raise ConfigError("algorithm must be IQL or VDN")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("batch_size", "eps_anneal_episodes", "target_update_interval",
                     "buffer_capacity", "train_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be > 0")
        if self.eps_anneal_steps is not None and self.eps_anneal_steps <= 0:
            raise ConfigError("eps_anneal_steps must be > 0 when set")
        if self.min_fill < 0:
            raise ConfigError("min_fill must be >= 0")
        if self.optimizer not in ("Adam", "RMSProp"):
            raise ConfigError("optimizer must be Adam or RMSProp")

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown learner keys {sorted(unknown)}")
        return cls(**data)


def epsilon(config: LearnerConfig, episode: int, env_steps: int = 0) -> float:
    """Linear anneal from eps_start to eps_end.

    Counted in episodes by default; in env steps when ``eps_anneal_steps`` is set.
    """
    if config.eps_anneal_steps is not None:
        rate, elapsed = (config.eps_start - config.eps_end) / config.eps_anneal_steps, env_steps
    else:
        rate, elapsed = (config.eps_start - config.eps_end) / config.eps_anneal_episodes, episode
    return max(config.eps_end, config.eps_start - elapsed * rate)


def select_action(q_values, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    q = np.asarray(q_values)
    if q.size == 0:
        raise ContractError("empty q_values")
    if not 0.0 <= eps <= 1.0:
        raise ContractError("epsilon must lie in [0, 1]")
    if rng.random() < eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


# ---------------------------------------------------------------- losses

def _tensors(params):
    return params.tensors() if isinstance(params, dyan.DyanParams) else params


def _gather_rows(batch):
    obs, hidden, actions, sample_of = [], [], [], []
    for j, tr in enumerate(batch):
        obs.extend(tr.observations)
        hidden.append(tr.hidden)
        actions.extend(tr.actions)
        sample_of.extend([j] * tr.n_agents)
    return obs, np.concatenate(hidden), np.asarray(actions, dtype=np.int64), np.asarray(sample_of)


def bootstrap_values(batch, target, spec) -> list[np.ndarray]:
    """Per transition, ``max_a q_target(o', a)`` per agent (0 where done)."""
    rows, hidden, where = [], [], []
    for j, tr in enumerate(batch):
        for i, (nxt, done) in enumerate(zip(tr.next_observations, tr.agent_done)):
            if not done and nxt is not None:
                rows.append(nxt)
                hidden.append(tr.next_hidden[i])
                where.append((j, i))
    values = [np.zeros(tr.n_agents) for tr in batch]
    if rows:
        out = dyan.forward_batch(_tensors(target), spec, dyan.pack(rows, spec), np.stack(hidden))
        best = out.q.data.max(axis=1)
        for (j, i), v in zip(where, best):
            values[j][i] = v
    return values


def per_sample_loss(batch, online, target, spec, gamma, algorithm="IQL",
                    bootstrap=None) -> T.Tensor:
    """Squared TD error per transition, shape (len(batch),).

    IQL: mean over the transition's agents of ``(r_i + gamma * v_i - q_i)^2``.
    VDN: ``(team_r + gamma * sum_i v_i - sum_i q_i)^2``.
    ``bootstrap`` overrides the target-network values (see ``bootstrap_values``).
    """
    if not batch:
        raise ContractError("empty batch")
    obs, hidden, actions, sample_of = _gather_rows(batch)
    out = dyan.forward_batch(_tensors(online), spec, dyan.pack(obs, spec), hidden)
    chosen = T.gather(out.q, actions)
    boot = bootstrap if bootstrap is not None else bootstrap_values(batch, target, spec)
    b = len(batch)
    if algorithm == "IQL":
        targets = np.concatenate([np.asarray(tr.rewards) + gamma * v
                                  for tr, v in zip(batch, boot)])
        sq = T.square(T.sub(targets, chosen))
        loss = T.segment_aggregate("MEAN", T.reshape(sq, (-1, 1)), sample_of, b)
        return T.reshape(loss, (b,))
    if algorithm == "VDN":
        q_tot = T.reshape(T.segment_aggregate("SUM", T.reshape(chosen, (-1, 1)), sample_of, b), (b,))
        targets = np.array([tr.team_reward + (0.0 if tr.done else gamma * float(np.sum(v)))
                            for tr, v in zip(batch, boot)])
        return T.square(T.sub(targets, q_tot))
    raise ContractError(f"unknown algorithm {algorithm!r}")


def reduce_loss(per_sample: T.Tensor, reduction: str) -> T.Tensor:
    if reduction == "sum":
        return T.total(per_sample)
    if reduction == "mean":
        return T.scale(T.total(per_sample), 1.0 / per_sample.data.size)
    raise ContractError(f"unknown reduction {reduction!r}")


def iql_loss(batch, online, target, spec, gamma, reduction="mean") -> T.Tensor:
    loss = reduce_loss(per_sample_loss(batch, online, target, spec, gamma, "IQL"), reduction)
    if not np.isfinite(loss.data):
        raise NumericError("NaN loss")
    return loss


def vdn_loss(batch, online, target, spec, gamma, reduction="mean") -> T.Tensor:
    loss = reduce_loss(per_sample_loss(batch, online, target, spec, gamma, "VDN"), reduction)
    if not np.isfinite(loss.data):
        raise NumericError("NaN loss")
    return loss


def td_loss(batch, online, target, spec, gamma, algorithm, reduction="mean") -> T.Tensor:
    fn = iql_loss if algorithm == "IQL" else vdn_loss
    return fn(batch, online, target, spec, gamma, reduction)


# ---------------------------------------------------------------- learner state

@dataclass
class LearnerState:
    spec: dyan.DyanSpec
    config: LearnerConfig
    online: dyan.DyanParams
    target: dyan.DyanParams
    optimizer: T.OptimizerState
    updates: int = 0
    episode: int = 0
    target_refreshes: int = 0
    env_steps: int = 0

    @property
    def epsilon(self) -> float:
        return epsilon(self.config, self.episode, self.env_steps)


def new_optimizer(config: LearnerConfig) -> T.OptimizerState:
    return T.make_optimizer(config.optimizer, config.learning_rate, config.optimizer_eps)


def init_learner(spec: dyan.DyanSpec, config: LearnerConfig, seed: int | None = None,
                 params: dyan.DyanParams | None = None) -> LearnerState:
    if params is None:
        params = dyan.build(spec, seed)
    return LearnerState(spec, config, params, params, new_optimizer(config))


@dataclass
class LossReport:
    total: float
    base: float
    extra: float
    grad_norm: float


def train_step(state: LearnerState, batch, extra_loss=None, base_loss=None) -> LossReport:
    """One gradient update on ``batch``.

    ``base_loss(params) -> Tensor`` replaces the plain TD loss (used by
    buffer reuse); ``extra_loss(params) -> Tensor`` is added to it.  Both
    receive the online parameters as gradient-tracking Tensors.  Nothing in
    ``state`` changes if a numeric error occurs.
    """
    params = state.online.tensors(requires_grad=True)
    if base_loss is None:
        base = td_loss(batch, params, state.target, state.spec, state.config.gamma,
                       state.config.algorithm)
    else:
        base = base_loss(params)
    loss = base
    extra_value = 0.0
    if extra_loss is not None:
        extra = extra_loss(params)
        extra_value = float(extra.data)
        loss = T.add(base, extra)
    if not np.isfinite(loss.data):
        raise NumericError("NaN loss")
    grads = T.backward(loss, params)
    grads, norm = T.clip_grad_norm(grads, state.config.grad_clip)

    opt_backup = (state.optimizer.step, dict(state.optimizer.first_moment),
                  dict(state.optimizer.second_moment))
    new_arrays = T.optimizer_step(state.optimizer, state.online.arrays, grads)
    if not all(np.all(np.isfinite(a)) for a in new_arrays.values()):
        state.optimizer.step, state.optimizer.first_moment, state.optimizer.second_moment = opt_backup
        raise NumericError("optimizer produced non-finite parameters")
    state.online = dyan.DyanParams(new_arrays)
    state.updates += 1
    if state.updates % state.config.target_update_interval == 0:
        state.target = state.online
        state.target_refreshes += 1
    return LossReport(float(loss.data), float(base.data), extra_value, norm)


def clone_state(state: LearnerState) -> LearnerState:
    return copy.deepcopy(state)


# ---------------------------------------------------------------- rollouts

OPPONENTS = ("scripted", "stationary", "self")


@dataclass
class EpisodeStats:
    steps: int
    team_reward: float
    outcome: str
    survivors: int
    kills: int
    finished: bool = True


def opponent_actions(state: E.WorldState, kind: str, learner: LearnerState | None,
                     hidden: dict, eps: float, rng) -> dict[int, int]:
    ids = state.alive_ids(E.TEAM_B)
    if kind == "scripted":
        return {i: E.scripted_opponent(state, i) for i in ids}
    if kind == "stationary":
        return {i: E.STAY for i in ids}
    if kind == "self":
        obs = [E.observe(state, i) for i in ids]
        h = np.stack([hidden[i] for i in ids])
        q, h_next = dyan.q_values(learner.online, learner.spec, obs, h)
        for k, i in enumerate(ids):
            hidden[i] = h_next[k]
        return {i: select_action(q[k], eps, rng) for k, i in enumerate(ids)}
    raise ConfigError(f"unknown opponent {kind!r}")


def run_episode(learner: LearnerState, world: E.WorldConfig, rng: np.random.Generator,
                eps: float, buffer: TaskBuffer | None = None, task_id: int = 0,
                opponent: str = "scripted", on_step=None, max_steps: int | None = None,
                trace=None) -> EpisodeStats:
    """Play one episode with team A driven by ``learner.online``.

    ``on_step()`` runs after every env step (training hook); it may replace
    ``learner.online``.  ``max_steps`` truncates the episode early.
    """
    spec = learner.spec
    state = E.reset(world)
    h_units = spec.hidden_units
    hidden = {a.id: np.zeros(h_units) for a in state.agents}
    team_reward = 0.0
    kills = 0
    steps = 0
    outcome = "ongoing"
    done = False
    while not done:
        if max_steps is not None and steps >= max_steps:
            break
        a_ids = state.alive_ids(E.TEAM_A)
        obs = [E.observe(state, i) for i in a_ids]
        h_in = np.stack([hidden[i] for i in a_ids])
        q, h_out = dyan.q_values(learner.online, spec, obs, h_in)
        actions = {i: select_action(q[k], eps, rng) for k, i in enumerate(a_ids)}
        actions.update(opponent_actions(state, opponent, learner, hidden, eps, rng))
        new_state, result = E.step(state, actions)
        if trace is not None:
            trace.append(E.trace_record(new_state, actions, result))
        done = result.done
        steps += 1
        team_reward += result.team_reward[E.TEAM_A]
        kills += result.kills_this_step[E.TEAM_A]
        for k, i in enumerate(a_ids):
            hidden[i] = h_out[k]
        if buffer is not None:
            next_obs, agent_done = [], []
            for i in a_ids:
                alive = new_state.agents[i].alive
                next_obs.append(E.observe(new_state, i) if alive else None)
                agent_done.append(done or not alive)
            buffer.push(Transition(
                task_id=task_id,
                observations=tuple(obs),
                actions=tuple(actions[i] for i in a_ids),
                rewards=tuple(result.rewards[i] for i in a_ids),
                team_reward=result.team_reward[E.TEAM_A],
                next_observations=tuple(next_obs),
                agent_done=tuple(agent_done),
                done=done,
                hidden=h_in,
                next_hidden=h_out,
            ))
        state = new_state
        outcome = result.outcome
        if on_step is not None:
            on_step()
    survivors = len(state.alive_ids(E.TEAM_A))
    return EpisodeStats(steps, team_reward, outcome, survivors, kills, finished=done)


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    epsilon: float
    loss: float
    reward: float
    outcome: str
    kills: int
    survivors: int


LOG_FIELDS = [f.name for f in fields(EpisodeLog)]


@dataclass
class TaskRngs:
    """Independent random streams of one training task."""

    episodes: np.random.Generator
    actions: np.random.Generator
    sampling: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TaskRngs":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


@dataclass
class TaskResult:
    steps: int
    episodes: list = field(default_factory=list)
    updates: int = 0


def train_on_task(learner: LearnerState, world: E.WorldConfig, budget_steps: int,
                  buffer: TaskBuffer, rngs: TaskRngs, opponent: str = "scripted",
                  loss_hook=None, log_path=None) -> TaskResult:
    """Train ``learner`` in place for exactly ``budget_steps`` env steps.

    Each episode gets a fresh world seed drawn from ``rngs.episodes``.
    ``loss_hook(learner, rng) -> (batch, base_loss, extra_loss)`` lets a
    transfer mechanism supply the batch and loss terms; by default a plain
    batch is drawn from ``buffer``.
    """
    if budget_steps <= 0:
        raise ContractError("budget must be > 0")
    cfg = learner.config
    result = TaskResult(0)
    losses: list[float] = []
    writer = None
    fh = None
    if log_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()

    def on_step():
        result.steps += 1
        learner.env_steps += 1
        if result.steps % cfg.train_every or not buffer.ready:
            return
        if loss_hook is None:
            batch = buffer.sample(cfg.batch_size, rngs.sampling)
            report = train_step(learner, batch)
        else:
            batch, base_loss, extra_loss = loss_hook(learner, rngs.sampling)
            if batch is None:
                return
            report = train_step(learner, batch, extra_loss=extra_loss, base_loss=base_loss)
        result.updates += 1
        losses.append(report.total)

    try:
        while result.steps < budget_steps:
            eps = learner.epsilon
            world_seed = int(rngs.episodes.integers(0, 2**63 - 1))
            ep_world = E.WorldConfig(**{**world.__dict__, "seed": world_seed})
            losses.clear()
            stats = run_episode(learner, ep_world, rngs.actions, eps, buffer=buffer,
                                task_id=buffer.task_id, opponent=opponent, on_step=on_step,
                                max_steps=budget_steps - result.steps)
            if not stats.finished:
                break
            log = EpisodeLog(learner.episode, stats.steps, eps,
                             float(np.mean(losses)) if losses else float("nan"),
                             stats.team_reward, stats.outcome, stats.kills, stats.survivors)
            result.episodes.append(log)
            if writer is not None:
                writer.writerow(log.__dict__)
            learner.episode += 1
    finally:
        if fh is not None:
            fh.close()
    return result
