"""Two-team gridworld battle simulator in the style of MAgent.

Agents of team A carry ids ``0 .. team_a_size-1`` and team B the ids that
follow.  A step resolves all moves first (ascending id, first come first
served), then all attacks against the post-move positions.  Rewards are
accounted in integer units of 0.005 so that per-step audits are exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ProtocolError

TEAM_A = 0
TEAM_B = 1

# Move offsets: every cell within Euclidean radius 2, stay first.
MOVE_OFFSETS = (
    (0, 0),
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (1, -1), (-1, 1), (-1, -1),
    (2, 0), (-2, 0), (0, 2), (0, -2),
)
ATTACK_OFFSETS = (
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (1, -1), (-1, 1), (-1, -1),
)
NUM_MOVES = len(MOVE_OFFSETS)
NUM_ACTIONS = NUM_MOVES + len(ATTACK_OFFSETS)
STAY = 0

# Reward schedule in units of REWARD_UNIT.
REWARD_UNIT = 0.005
MOVE_UNITS = -1            # -0.005 per move
HIT_UNITS = 40             # +0.2 for attacking an enemy
KILL_UNITS = 1000          # +5 for killing an enemy
EMPTY_ATTACK_UNITS = -20   # -0.1 for attacking an empty grid
VICTIM_UNITS = -20         # -0.1 for being attacked or killed

ENV_FEATURE_WIDTH = 16
ENV_GRID = 4
SELF_FEATURE_WIDTH = 2 + 1 + NUM_ACTIONS + 1
NEIGHBOR_FEATURE_WIDTH = 3


def decode_action(action: int) -> tuple[str, tuple[int, int]]:
    """Return ``("move" | "attack", (dx, dy))`` for an action id."""
    if not 0 <= action < NUM_ACTIONS:
        raise ProtocolError(f"action id {action} outside [0, {NUM_ACTIONS})")
    if action < NUM_MOVES:
        return "move", MOVE_OFFSETS[action]
    return "attack", ATTACK_OFFSETS[action - NUM_MOVES]


def move_action(dx: int, dy: int) -> int:
    return MOVE_OFFSETS.index((dx, dy))


def attack_action(dx: int, dy: int) -> int:
    return NUM_MOVES + ATTACK_OFFSETS.index((dx, dy))


def default_map_side(total_agents: int) -> int:
    return max(10, math.ceil(4 * math.sqrt(total_agents)))


@dataclass(frozen=True)
class WorldConfig:
    team_a_size: int
    team_b_size: int
    map_side: int | None = None
    max_steps: int = 300
    obs_radius: int = 6
    hp_max: float = 10.0
    attack_damage: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.map_side is None:
            side = default_map_side(self.team_a_size + self.team_b_size)
            object.__setattr__(self, "map_side", side)
        self.validate()

    @property
    def total_agents(self) -> int:
        return self.team_a_size + self.team_b_size

    def validate(self) -> None:
        if self.team_a_size < 1 or self.team_b_size < 1:
            raise ConfigError("team sizes must be >= 1")
        if self.obs_radius < 1:
            raise ConfigError("obs_radius must be >= 1")
        if self.hp_max <= 0 or self.attack_damage <= 0:
            raise ConfigError("hp_max and attack_damage must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        side = self.map_side
        if side < 2:
            raise ConfigError("map_side must be >= 2")
        if self.total_agents > side * side:
            raise ConfigError(
                f"{self.total_agents} agents do not fit on a {side}x{side} map"
            )
        half_cells = (side // 2) * side
        if max(self.team_a_size, self.team_b_size) > half_cells:
            raise ConfigError(
                f"a team of {max(self.team_a_size, self.team_b_size)} does not fit "
                f"in one half ({half_cells} cells) of a {side}x{side} map"
            )


@dataclass
class AgentState:
    id: int
    team: int
    position: tuple[int, int]
    hp: float
    alive: bool = True
    last_action: int = STAY
    last_reward: float = 0.0


@dataclass
class WorldState:
    config: WorldConfig
    agents: list[AgentState]
    step_count: int = 0

    def alive_ids(self, team: int | None = None) -> list[int]:
        return [a.id for a in self.agents
                if a.alive and (team is None or a.team == team)]

    def occupancy(self) -> dict[tuple[int, int], int]:
        return {a.position: a.id for a in self.agents if a.alive}

    def team_ids(self, team: int) -> list[int]:
        return [a.id for a in self.agents if a.team == team]

    def copy(self) -> "WorldState":
        return WorldState(self.config,
                          [dataclasses.replace(a) for a in self.agents],
                          self.step_count)


@dataclass(frozen=True)
class Observation:
    """Decomposed local view of one agent.

    Neighbor rows are ``[dx / obs_radius, dy / obs_radius, hp / hp_max]``.
    """

    env_features: np.ndarray
    self_features: np.ndarray
    teammate_features: np.ndarray
    enemy_features: np.ndarray

    @property
    def env_self(self) -> np.ndarray:
        return np.concatenate([self.env_features, self.self_features])

    @property
    def n_teammates(self) -> int:
        return self.teammate_features.shape[0]

    @property
    def n_enemies(self) -> int:
        return self.enemy_features.shape[0]


@dataclass
class StepResult:
    rewards: list[float]
    team_reward: tuple[float, float]
    kills_this_step: tuple[int, int]
    done: bool
    outcome: str
    reward_units: list[int] = field(default_factory=list)
    events: dict[str, int] = field(default_factory=dict)


def reset(config: WorldConfig) -> WorldState:
    """Place both teams in mirrored formations on opposite map halves."""
    config.validate()
    side = config.map_side
    half = side // 2
    n_place = max(config.team_a_size, config.team_b_size)
    # Formation block: the left-half columns closest to the midline.
    ncols = min(half, max(2, math.ceil(2 * n_place / side)))
    while ncols * side < n_place:
        ncols += 1
    cells = [(x, y) for x in range(half - ncols, half) for y in range(side)]
    rng = np.random.default_rng(config.seed)
    chosen = rng.choice(len(cells), size=n_place, replace=False)
    left = [cells[int(i)] for i in chosen]

    agents = []
    for i in range(config.team_a_size):
        agents.append(AgentState(i, TEAM_A, left[i], config.hp_max))
    for j in range(config.team_b_size):
        x, y = left[j]
        agents.append(AgentState(config.team_a_size + j, TEAM_B,
                                 (side - 1 - x, y), config.hp_max))
    return WorldState(config, agents, 0)


def _in_bounds(pos, side):
    return 0 <= pos[0] < side and 0 <= pos[1] < side


def _outcome(state: WorldState) -> tuple[bool, str]:
    a_alive = any(a.alive for a in state.agents if a.team == TEAM_A)
    b_alive = any(a.alive for a in state.agents if a.team == TEAM_B)
    if not a_alive and not b_alive:
        return True, "draw"
    if not b_alive:
        return True, "A_wins"
    if not a_alive:
        return True, "B_wins"
    if state.step_count >= state.config.max_steps:
        return True, "draw"
    return False, "ongoing"


def step(state: WorldState, joint_actions: dict[int, int]) -> tuple[WorldState, StepResult]:
    """Advance the world by one tick.

    ``joint_actions`` must hold exactly one action per alive agent.
    """
    if _outcome(state)[0]:
        raise ProtocolError("episode already finished")
    n = len(state.agents)
    for aid in joint_actions:
        if not 0 <= aid < n:
            raise ProtocolError(f"unknown agent {aid}")
        if not state.agents[aid].alive:
            raise ProtocolError(f"action given for dead agent {aid}")
    alive = state.alive_ids()
    missing = [aid for aid in alive if aid not in joint_actions]
    if missing:
        raise ProtocolError(f"missing actions for agents {missing}")

    cfg = state.config
    side = cfg.map_side
    new = state.copy()
    agents = new.agents
    units = [0] * n
    events = {"moves": 0, "hits": 0, "kills": 0, "empty_attacks": 0, "victims": 0}
    decoded = {aid: decode_action(int(joint_actions[aid])) for aid in alive}

    occupied = new.occupancy()
    for aid in alive:
        kind, (dx, dy) = decoded[aid]
        if kind != "move":
            continue
        units[aid] += MOVE_UNITS
        events["moves"] += 1
        if dx == 0 and dy == 0:
            continue
        pos = agents[aid].position
        target = (pos[0] + dx, pos[1] + dy)
        if _in_bounds(target, side) and target not in occupied:
            del occupied[pos]
            occupied[target] = aid
            agents[aid].position = target

    damage = {}
    killer = {}
    for aid in alive:
        kind, (dx, dy) = decoded[aid]
        if kind != "attack":
            continue
        pos = agents[aid].position
        target = (pos[0] + dx, pos[1] + dy)
        victim = occupied.get(target)
        if victim is None or agents[victim].team == agents[aid].team:
            units[aid] += EMPTY_ATTACK_UNITS
            events["empty_attacks"] += 1
            continue
        units[aid] += HIT_UNITS
        events["hits"] += 1
        before = agents[victim].hp - damage.get(victim, 0.0)
        damage[victim] = damage.get(victim, 0.0) + cfg.attack_damage
        if before > 0 and before - cfg.attack_damage <= 0:
            killer[victim] = aid

    kills = [0, 0]
    for victim in sorted(damage):
        units[victim] += VICTIM_UNITS
        events["victims"] += 1
        agent = agents[victim]
        agent.hp = max(0.0, agent.hp - damage[victim])
        if agent.hp <= 0:
            agent.alive = False
            k = killer[victim]
            units[k] += KILL_UNITS
            events["kills"] += 1
            kills[agents[k].team] += 1

    rewards = [u * REWARD_UNIT for u in units]
    for aid in alive:
        agents[aid].last_action = int(joint_actions[aid])
        agents[aid].last_reward = rewards[aid]
    new.step_count += 1
    done, outcome = _outcome(new)
    team_reward = [0.0, 0.0]
    for a in agents:
        team_reward[a.team] += rewards[a.id]
    return new, StepResult(rewards, (team_reward[0], team_reward[1]),
                           (kills[0], kills[1]), done, outcome, units, events)


@lru_cache(maxsize=65536)
def _boundary_features(x, y, side, radius):
    # Fraction of out-of-bounds cells per block of the (2r+1)^2 window.
    blocks = np.array_split(np.arange(-radius, radius + 1), ENV_GRID)
    feats = np.empty((ENV_GRID, ENV_GRID))
    for r, dys in enumerate(blocks):
        iny = np.count_nonzero((y + dys >= 0) & (y + dys < side))
        for c, dxs in enumerate(blocks):
            inx = np.count_nonzero((x + dxs >= 0) & (x + dxs < side))
            feats[r, c] = 1.0 - (inx * iny) / (len(dxs) * len(dys))
    out = feats.reshape(-1)
    out.setflags(write=False)
    return out


def observe(state: WorldState, agent_id: int) -> Observation:
    if not 0 <= agent_id < len(state.agents):
        raise ProtocolError(f"unknown agent {agent_id}")
    me = state.agents[agent_id]
    if not me.alive:
        raise ProtocolError(f"agent {agent_id} is dead")
    cfg = state.config
    r = cfg.obs_radius
    x, y = me.position
    denom = max(cfg.map_side - 1, 1)
    self_feats = np.zeros(SELF_FEATURE_WIDTH)
    self_feats[0] = x / denom
    self_feats[1] = y / denom
    self_feats[2] = me.hp / cfg.hp_max
    self_feats[3 + me.last_action] = 1.0
    self_feats[-1] = me.last_reward

    mates, enemies = [], []
    for other in state.agents:
        if other.id == agent_id or not other.alive:
            continue
        dx = other.position[0] - x
        dy = other.position[1] - y
        if max(abs(dx), abs(dy)) > r:
            continue
        row = (dx / r, dy / r, other.hp / cfg.hp_max)
        (mates if other.team == me.team else enemies).append(row)
    return Observation(
        _boundary_features(x, y, cfg.map_side, r),
        self_feats,
        np.array(mates, dtype=float).reshape(-1, NEIGHBOR_FEATURE_WIDTH),
        np.array(enemies, dtype=float).reshape(-1, NEIGHBOR_FEATURE_WIDTH),
    )


def scripted_opponent(state: WorldState, agent_id: int) -> int:
    """Greedy rule: hit an adjacent enemy, else step toward the nearest one."""
    me = state.agents[agent_id]
    x, y = me.position
    enemies = [a for a in state.agents if a.alive and a.team != me.team]
    if not enemies:
        return STAY

    def cheb(a, px=x, py=y):
        return max(abs(a.position[0] - px), abs(a.position[1] - py))

    adjacent = [a for a in enemies if cheb(a) == 1]
    if adjacent:
        target = min(adjacent, key=lambda a: (
            (a.position[0] - x) ** 2 + (a.position[1] - y) ** 2, a.id))
        return attack_action(target.position[0] - x, target.position[1] - y)

    nearest = min(enemies, key=lambda a: (cheb(a), a.id))
    tx, ty = nearest.position
    current = cheb(nearest)
    occupied = state.occupancy()
    best = None
    for action in range(1, 9):  # unit steps only
        dx, dy = MOVE_OFFSETS[action]
        dest = (x + dx, y + dy)
        if not _in_bounds(dest, state.config.map_side) or dest in occupied:
            continue
        d = max(abs(tx - dest[0]), abs(ty - dest[1]))
        if d >= current:
            continue
        key = ((tx - dest[0]) ** 2 + (ty - dest[1]) ** 2, action)
        if best is None or key < best[0]:
            best = (key, action)
    return STAY if best is None else best[1]


def trace_record(state: WorldState, actions: dict[int, int], result: StepResult) -> str:
    """One line of the golden trace for the step that produced ``state``."""
    agents = [
        {
            "id": a.id,
            "pos": list(a.position),
            "hp": a.hp,
            "action": int(actions[a.id]) if a.id in actions else None,
            "reward": result.rewards[a.id],
        }
        for a in state.agents
    ]
    record = {"step": state.step_count, "agents": agents,
              "done": result.done, "outcome": result.outcome}
    return json.dumps(record, sort_keys=True, separators=(",", ":"))
