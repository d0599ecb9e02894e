import numpy as np
import pytest

from dymacl import dyan
from dymacl import env as E
from dymacl.replay import Transition


def random_obs(rng, n_mates=None, n_enemies=None, max_neighbors=6):
    if n_mates is None:
        n_mates = int(rng.integers(0, max_neighbors + 1))
    if n_enemies is None:
        n_enemies = int(rng.integers(0, max_neighbors + 1))
    return E.Observation(
        rng.uniform(0, 1, E.ENV_FEATURE_WIDTH),
        rng.uniform(-1, 1, E.SELF_FEATURE_WIDTH),
        rng.uniform(-1, 1, (n_mates, E.NEIGHBOR_FEATURE_WIDTH)),
        rng.uniform(-1, 1, (n_enemies, E.NEIGHBOR_FEATURE_WIDTH)),
    )


def random_transition(rng, task_id=0, n_agents=None, hidden_units=16, reward_scale=1.0):
    if n_agents is None:
        n_agents = int(rng.integers(1, 4))
    obs = tuple(random_obs(rng, max_neighbors=4) for _ in range(n_agents))
    nxt, agent_done = [], []
    done = bool(rng.random() < 0.2)
    for _ in range(n_agents):
        dead = bool(rng.random() < 0.2)
        nxt.append(None if dead else random_obs(rng, max_neighbors=4))
        agent_done.append(done or dead)
    rewards = tuple(float(v) for v in rng.normal(0, reward_scale, n_agents))
    return Transition(
        task_id=task_id,
        observations=obs,
        actions=tuple(int(a) for a in rng.integers(0, E.NUM_ACTIONS, n_agents)),
        rewards=rewards,
        team_reward=float(sum(rewards)),
        next_observations=tuple(nxt),
        agent_done=tuple(agent_done),
        done=done,
        hidden=rng.uniform(-0.5, 0.5, (n_agents, hidden_units)),
        next_hidden=rng.uniform(-0.5, 0.5, (n_agents, hidden_units)),
    )


def zero_params(spec):
    return dyan.DyanParams({name: np.zeros(shape) for name, shape, _ in dyan.layer_shapes(spec)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec():
    return dyan.DyanSpec()


# ---------------------------------------------------------------- acceptance log

ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request, capsys):
    """Record one pass/fail line per criterion; echoed now and in the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
