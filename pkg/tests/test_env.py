import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dymacl import env as E
from dymacl.errors import ConfigError, ProtocolError

GOLDEN = Path(__file__).parent / "data" / "golden_trace.jsonl"


def make_state(side, agents, hp_max=10.0, damage=2.0, max_steps=300, radius=6):
    """agents: list of (team, (x, y)) or (team, (x, y), hp)."""
    n_a = sum(1 for a in agents if a[0] == E.TEAM_A)
    n_b = len(agents) - n_a
    cfg = E.WorldConfig(max(n_a, 1), max(n_b, 1), side, max_steps, radius, hp_max, damage)
    states = []
    for i, spec in enumerate(agents):
        team, pos = spec[0], spec[1]
        hp = spec[2] if len(spec) > 2 else hp_max
        states.append(E.AgentState(i, team, pos, hp))
    return E.WorldState(cfg, states, 0)


def random_joint_actions(state, rng):
    return {i: int(rng.integers(E.NUM_ACTIONS)) for i in state.alive_ids()}


# ---------------------------------------------------------------- actions

def test_action_space_layout():
    assert E.NUM_ACTIONS == 21
    assert len(E.MOVE_OFFSETS) == 13
    assert all(dx * dx + dy * dy <= 4 for dx, dy in E.MOVE_OFFSETS)
    assert len(set(E.MOVE_OFFSETS)) == 13
    assert set(E.ATTACK_OFFSETS) == {(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)} - {(0, 0)}
    decoded = {E.decode_action(a) for a in range(E.NUM_ACTIONS)}
    assert len(decoded) == 21
    with pytest.raises(ProtocolError):
        E.decode_action(21)


# ---------------------------------------------------------------- reset

def test_reset_places_teams_without_overlap():
    state = E.reset(E.WorldConfig(3, 3, map_side=12, seed=7))
    assert len(state.alive_ids()) == 6
    assert len(state.alive_ids(E.TEAM_A)) == 3 == len(state.alive_ids(E.TEAM_B))
    assert len({a.position for a in state.agents}) == 6
    assert all(a.hp == state.config.hp_max for a in state.agents)
    assert state.step_count == 0


def test_reset_mirrored_halves():
    state = E.reset(E.WorldConfig(5, 5, seed=3))
    side = state.config.map_side
    a = [x.position for x in state.agents if x.team == E.TEAM_A]
    b = [x.position for x in state.agents if x.team == E.TEAM_B]
    assert all(x < side // 2 for x, _ in a)
    assert b == [(side - 1 - x, y) for x, y in a]


def test_reset_deterministic():
    cfg = E.WorldConfig(1, 1, map_side=4, seed=0)
    assert E.reset(cfg) == E.reset(cfg)


def test_reset_capacity_error():
    with pytest.raises(ConfigError):
        E.WorldConfig(50, 50, map_side=8)


def test_default_map_side():
    assert E.WorldConfig(3, 3).map_side == 10
    assert E.WorldConfig(8, 8).map_side == 16
    assert E.WorldConfig(50, 50).map_side == 40


# ---------------------------------------------------------------- step rewards

def test_move_costs():
    state = make_state(10, [(E.TEAM_A, (2, 2)), (E.TEAM_B, (8, 8))])
    for action in range(E.NUM_MOVES):
        _, res = E.step(state, {0: action, 1: E.STAY})
        assert res.rewards[0] == pytest.approx(-0.005)
        assert res.reward_units[0] == -1


def test_kill_rewards():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_B, (5, 4), 2.0), (E.TEAM_B, (8, 8))])
    new, res = E.step(state, {0: E.attack_action(1, 0), 1: E.STAY, 2: E.STAY})
    assert res.rewards[0] == pytest.approx(0.2 + 5)
    assert res.rewards[1] == pytest.approx(-0.005 - 0.1)
    assert not new.agents[1].alive and new.agents[1].hp == 0
    assert res.kills_this_step == (1, 0)


def test_empty_attack_penalty():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_B, (8, 8))])
    _, res = E.step(state, {0: E.attack_action(0, 1), 1: E.STAY})
    assert res.rewards[0] == pytest.approx(-0.1)


def test_attack_teammate_counts_as_empty():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_A, (5, 4)), (E.TEAM_B, (8, 8))])
    new, res = E.step(state, {0: E.attack_action(1, 0), 1: E.STAY, 2: E.STAY})
    assert res.rewards[0] == pytest.approx(-0.1)
    assert new.agents[1].hp == 10.0


def test_simultaneous_damage_single_kill_credit():
    # Two attackers, victim has 3 hp: the second hit (id order) is the killing blow.
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_A, (6, 4)), (E.TEAM_B, (5, 4), 3.0)])
    new, res = E.step(state, {0: E.attack_action(1, 0), 1: E.attack_action(-1, 0), 2: E.STAY})
    assert res.reward_units[0] == 40
    assert res.reward_units[1] == 40 + 1000
    assert res.reward_units[2] == -1 - 20
    assert not new.agents[2].alive
    assert res.done and res.outcome == "A_wins"


def test_mutual_kill_is_simultaneous():
    state = make_state(10, [(E.TEAM_A, (4, 4), 2.0), (E.TEAM_B, (5, 4), 2.0)])
    new, res = E.step(state, {0: E.attack_action(1, 0), 1: E.attack_action(-1, 0)})
    assert not new.agents[0].alive and not new.agents[1].alive
    assert res.outcome == "draw" and res.done
    assert res.kills_this_step == (1, 1)


def test_blocked_and_out_of_bounds_moves_stay():
    state = make_state(10, [(E.TEAM_A, (0, 0)), (E.TEAM_A, (1, 0)), (E.TEAM_B, (9, 9))])
    new, res = E.step(state, {0: E.move_action(1, 0), 1: E.move_action(0, -1), 2: E.STAY})
    assert new.agents[0].position == (0, 0)
    assert new.agents[1].position == (1, 0)
    assert res.rewards[0] == pytest.approx(-0.005)


def test_conflicting_moves_resolved_by_id():
    state = make_state(10, [(E.TEAM_A, (3, 3)), (E.TEAM_A, (5, 3)), (E.TEAM_B, (9, 9))])
    new, _ = E.step(state, {0: E.move_action(1, 0), 1: E.move_action(-1, 0), 2: E.STAY})
    assert new.agents[0].position == (4, 3)
    assert new.agents[1].position == (5, 3)


def test_step_protocol_errors():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_B, (5, 4), 2.0), (E.TEAM_B, (8, 8))])
    new, _ = E.step(state, {0: E.attack_action(1, 0), 1: E.STAY, 2: E.STAY})
    with pytest.raises(ProtocolError):
        E.step(new, {0: E.STAY, 1: E.STAY, 2: E.STAY})
    with pytest.raises(ProtocolError):
        E.step(new, {0: E.STAY})
    with pytest.raises(ProtocolError):
        E.step(new, {0: E.STAY, 2: E.STAY, 7: E.STAY})


def test_done_at_max_steps():
    state = make_state(10, [(E.TEAM_A, (0, 0)), (E.TEAM_B, (9, 9))], max_steps=3)
    for _ in range(3):
        state, res = E.step(state, {0: E.STAY, 1: E.STAY})
    assert res.done and res.outcome == "draw"


# ---------------------------------------------------------------- observe

def test_observe_lone_survivor():
    state = make_state(10, [(E.TEAM_A, (4, 4))])
    state.agents[1:] = []
    obs = E.observe(state, 0)
    assert obs.teammate_features.shape == (0, 3)
    assert obs.enemy_features.shape == (0, 3)


def test_observe_teammate_encoding():
    state = make_state(20, [(E.TEAM_A, (5, 5)), (E.TEAM_A, (7, 5)), (E.TEAM_B, (19, 19))])
    obs = E.observe(state, 0)
    np.testing.assert_array_equal(obs.teammate_features, [[2 / 6, 0.0, 1.0]])
    assert obs.n_enemies == 0


def test_observe_radius_boundary():
    state = make_state(20, [(E.TEAM_A, (5, 5)), (E.TEAM_B, (11, 5)), (E.TEAM_B, (12, 5))])
    obs = E.observe(state, 0)
    assert obs.n_enemies == 1
    np.testing.assert_allclose(obs.enemy_features, [[1.0, 0.0, 1.0]])


def test_observe_order_and_dead_excluded():
    state = make_state(20, [(E.TEAM_A, (5, 5)), (E.TEAM_B, (6, 5)), (E.TEAM_B, (4, 5), 4.0),
                            (E.TEAM_B, (5, 6))])
    state.agents[3].alive = False
    state.agents[3].hp = 0.0
    obs = E.observe(state, 0)
    np.testing.assert_allclose(obs.enemy_features, [[1 / 6, 0, 1.0], [-1 / 6, 0, 0.4]])
    with pytest.raises(ProtocolError):
        E.observe(state, 3)


def test_observe_feature_widths():
    state = E.reset(E.WorldConfig(3, 3, seed=1))
    obs = E.observe(state, 0)
    assert obs.env_features.shape == (16,)
    assert obs.self_features.shape == (E.SELF_FEATURE_WIDTH,)
    assert obs.self_features[3 + E.STAY] == 1.0


def test_env_features_mark_boundary():
    state = make_state(10, [(E.TEAM_A, (0, 0)), (E.TEAM_B, (9, 9))])
    corner = E.observe(state, 0).env_features.reshape(4, 4)
    # rows are dy, columns dx; negative offsets fall off the map at (0, 0)
    assert corner[0, 0] == 1.0
    assert corner[3, 3] == 0.0
    state = make_state(20, [(E.TEAM_A, (10, 10)), (E.TEAM_B, (19, 19))])
    assert np.all(E.observe(state, 0).env_features == 0.0)


# ---------------------------------------------------------------- scripted opponent

def test_scripted_attacks_adjacent():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_B, (5, 5))])
    assert E.scripted_opponent(state, 1) == E.attack_action(-1, -1)


def test_scripted_prefers_orthogonal_then_lowest_id():
    state = make_state(10, [(E.TEAM_A, (4, 4)), (E.TEAM_A, (5, 3)), (E.TEAM_B, (5, 4))])
    assert E.scripted_opponent(state, 2) == E.attack_action(-1, 0)
    state = make_state(10, [(E.TEAM_A, (6, 4)), (E.TEAM_A, (4, 4)), (E.TEAM_B, (5, 4))])
    assert E.scripted_opponent(state, 2) == E.attack_action(1, 0)


def test_scripted_moves_toward_enemy():
    state = make_state(10, [(E.TEAM_A, (2, 4)), (E.TEAM_B, (5, 4))])
    assert E.scripted_opponent(state, 0) == E.move_action(1, 0)


def test_scripted_stays_without_enemies():
    state = make_state(10, [(E.TEAM_A, (2, 4)), (E.TEAM_B, (5, 4), 0.0)])
    state.agents[1].alive = False
    assert E.scripted_opponent(state, 0) == E.STAY


# ---------------------------------------------------------------- invariants

def audit(result):
    ev = result.events
    expected = (E.MOVE_UNITS * ev["moves"] + E.HIT_UNITS * ev["hits"] + E.KILL_UNITS * ev["kills"]
                + E.EMPTY_ATTACK_UNITS * ev["empty_attacks"] + E.VICTIM_UNITS * ev["victims"])
    return sum(result.reward_units) == expected


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.integers(1, 5))
def test_random_rollout_invariants(seed, size):
    rng = np.random.default_rng(seed)
    state = E.reset(E.WorldConfig(size, size, max_steps=60, seed=seed))
    alive = len(state.alive_ids())
    done = False
    while not done:
        actions = random_joint_actions(state, rng)
        new, res = E.step(state, actions)
        assert audit(res)
        assert sum(res.rewards) == pytest.approx(E.REWARD_UNIT * sum(res.reward_units), abs=1e-9)
        for team in (E.TEAM_A, E.TEAM_B):
            members = new.team_ids(team)
            assert res.team_reward[team] == pytest.approx(sum(res.rewards[i] for i in members))
        now = len(new.alive_ids())
        assert now <= alive
        alive = now
        positions = [a.position for a in new.agents if a.alive]
        assert len(positions) == len(set(positions))
        assert all(a.alive == (a.hp > 0) for a in new.agents)
        empty = not new.alive_ids(E.TEAM_A) or not new.alive_ids(E.TEAM_B)
        assert res.done == (empty or new.step_count == new.config.max_steps)
        state, done = new, res.done


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_determinism_of_trajectories(seed):
    def rollout():
        rng = np.random.default_rng(seed)
        state = E.reset(E.WorldConfig(3, 3, max_steps=40, seed=seed))
        lines = []
        done = False
        while not done:
            actions = random_joint_actions(state, rng)
            state, res = E.step(state, actions)
            lines.append(E.trace_record(state, actions, res))
            done = res.done
        return lines

    assert rollout() == rollout()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_observation_locality(seed):
    rng = np.random.default_rng(seed)
    side = 24
    state = make_state(side, [(E.TEAM_A, (5, 5)), (E.TEAM_A, (8, 7)), (E.TEAM_B, (9, 2)),
                              (E.TEAM_B, (20, 20))])
    before = E.observe(state, 0)
    # mutate the far agent (outside the 13x13 window around (5, 5))
    far = state.agents[3]
    far.position = (int(rng.integers(12, side)), int(rng.integers(12, side)))
    far.hp = float(rng.uniform(0.1, 10))
    far.last_action = int(rng.integers(E.NUM_ACTIONS))
    after = E.observe(state, 0)
    for name in ("env_features", "self_features", "teammate_features", "enemy_features"):
        np.testing.assert_array_equal(getattr(before, name), getattr(after, name))


# ---------------------------------------------------------------- golden trace

def golden_lines():
    rng = np.random.default_rng(2024)
    lines = []
    for episode in range(3):
        state = E.reset(E.WorldConfig(3, 3, max_steps=50, seed=episode))
        done = False
        while not done:
            actions = {}
            for i in state.alive_ids():
                if state.agents[i].team == E.TEAM_B:
                    actions[i] = E.scripted_opponent(state, i)
                else:
                    actions[i] = int(rng.integers(E.NUM_ACTIONS))
            state, res = E.step(state, actions)
            lines.append(E.trace_record(state, actions, res))
            done = res.done
    return "\n".join(lines) + "\n"


def test_golden_trace_byte_stable():
    text = golden_lines()
    assert text == golden_lines()
    assert GOLDEN.read_text() == text, hashlib.sha256(text.encode()).hexdigest()
