import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
import yaml

from dymacl import curriculum as C
from dymacl import dyan
from dymacl import env as E
from dymacl.errors import ContractError, ParseError
from dymacl.learners import LearnerConfig, TaskRngs, init_learner, train_on_task
from dymacl.replay import TaskBuffer
from dymacl.transfer import TransferMode

TINY = {
    "name": "tiny",
    "seed": 3,
    "eval_episodes": 4,
    "tasks": [{"team_a": 1, "budget": 60}, {"team_a": 2, "budget": 60}],
    "transfer": {"kind": "reload"},
    "learner": {"min_fill": 10, "batch_size": 4, "eps_anneal_episodes": 3},
    "dyan": {"hidden_units": 4},
    "world": {"max_steps": 20},
}


def tiny(**over):
    data = json.loads(json.dumps(TINY))
    data.update(over)
    return C.spec_from_dict(data)


def write(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


# ---------------------------------------------------------------- parsing

def test_magent_schedule_preset():
    spec = C.load_preset("magent")
    assert [t.budget for t in spec.tasks] == [7500, 4500, 1500, 750, 10000]
    assert [t.team_a for t in spec.tasks] == [10, 20, 30, 40, 50]
    assert spec.learner.learning_rate == 1e-4 and spec.learner.target_update_interval == 20


def test_starcraft_preset_overrides():
    spec = C.load_preset("starcraft_tables")
    assert [t.budget_for("IQL") for t in spec.tasks] == [1_500_000, 3_000_000, 3_000_000]
    assert [t.budget_for("VDN") for t in spec.tasks] == [1_500_000] * 3
    assert spec.learner.optimizer == "RMSProp" and spec.dyan.hidden_units == 64


def test_desk_preset():
    spec = C.load_preset("desk")
    assert [(t.label, t.budget) for t in spec.tasks] == [("3v3", 6000), ("5v5", 4000),
                                                         ("8v8", 4000)]
    assert spec.dyan.aggregation == "SUM" and spec.learner.algorithm == "IQL"


def test_parse_roundtrip(tmp_path):
    spec = C.parse_spec(write(tmp_path, TINY))
    assert spec == tiny()
    again = C.spec_from_dict(spec.to_dict())
    assert again == spec


def test_single_task_valid():
    assert len(tiny(tasks=[{"team_a": 2, "budget": 10}]).tasks) == 1


@pytest.mark.parametrize("bad", [
    {"tasks": [{"team_a": 2, "budget": 0}]},
    {"tasks": []},
    {"tasks": [{"team_a": 2}]},
    {"bogus": 1},
    {"learner": {"gama": 0.9}},
    {"transfer": {"kind": "teleport"}},
    {"eval_episodes": -1},
    {"opponent": "wizard"},
    {"tasks": [{"team_a": 200, "budget": 10, "map_side": 10}]},
])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        tiny(**bad)


def test_config_not_found(tmp_path):
    with pytest.raises(ParseError, match="config not found"):
        C.parse_spec(tmp_path / "missing.yaml")


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("tasks: [unclosed")
    with pytest.raises(ParseError):
        C.parse_spec(path)


def test_decreasing_counts_warn():
    with pytest.warns(UserWarning):
        tiny(tasks=[{"team_a": 3, "budget": 5}, {"team_a": 2, "budget": 5}])


def test_flat_mode_slot_defaults():
    spec = tiny(dyan={"hidden_units": 4, "mode": "flat"})
    assert (spec.dyan.teammate_slots, spec.dyan.enemy_slots) == (1, 2)


def test_derive_seed_stable():
    assert C.derive_seed(0, "init", 0) == C.derive_seed(0, "init", 0)
    assert len({C.derive_seed(0, t, k) for t in ("init", "train", "eval") for k in range(3)}) == 9


# ---------------------------------------------------------------- evaluation

def test_evaluate_bounds_and_determinism():
    spec = dyan.DyanSpec()
    ckpt = (dyan.build(spec, 0), spec)
    world = E.WorldConfig(1, 1, max_steps=40)
    a = C.evaluate(ckpt, world, 100, seed=5)
    b = C.evaluate(ckpt, world, 100, seed=5)
    assert a == b
    assert 0.0 <= a.win_rate <= 1.0 and a.mean_survivors <= 1.0


def test_evaluate_zero_episodes():
    spec = dyan.DyanSpec()
    with pytest.raises(ContractError):
        C.evaluate((dyan.build(spec, 0), spec), E.WorldConfig(1, 1), 0, 0)


def test_always_stay_loses():
    """Oracle: roll the stay-vs-scripted matchup directly and compare."""
    spec = dyan.DyanSpec()
    arrays = {n: np.zeros(s) for n, s, _ in dyan.layer_shapes(spec)}
    arrays["head.b"] = np.eye(E.NUM_ACTIONS)[E.STAY]
    world = E.WorldConfig(2, 2, max_steps=300)
    m = C.evaluate((dyan.DyanParams(arrays), spec), world, 5, seed=11)

    rng = np.random.default_rng(11)
    kills, outcomes = [], []
    for _ in range(5):
        state = E.reset(replace(world, seed=int(rng.integers(0, 2**63 - 1))))
        k, done = 0, False
        while not done:
            acts = {i: E.STAY for i in state.alive_ids(E.TEAM_A)}
            acts.update({i: E.scripted_opponent(state, i) for i in state.alive_ids(E.TEAM_B)})
            state, res = E.step(state, acts)
            k += res.kills_this_step[E.TEAM_A]
            done = res.done
        kills.append(k)
        outcomes.append(res.outcome)
    assert m.win_rate == 0.0
    assert "A_wins" not in outcomes
    assert m.mean_kill_count == np.mean(kills) == 0.0


# ---------------------------------------------------------------- run

def test_run_reload_lineage(tmp_path):
    report = C.run(tiny(), tmp_path / "out")
    t0, t1 = report.tasks
    assert t1.initial_params_sha256 == t0.final_params_sha256
    assert t1.parent_checkpoint_sha256 == t0.checkpoint_sha256
    assert t0.parent_checkpoint_sha256 is None
    for name in ("summary.json", "config.yaml", "timing.json", "curves/task_0.csv",
                 "curves/task_1.csv", "checkpoints/task_0.ckpt", "checkpoints/task_1.ckpt"):
        assert (tmp_path / "out" / name).exists(), name
    echo = yaml.safe_load((tmp_path / "out" / "config.yaml").read_text())
    assert C.spec_from_dict({k: v for k, v in echo.items() if k != "version"}) == tiny()


def test_run_in_memory_matches_on_disk(tmp_path):
    a = C.run(tiny())
    b = C.run(tiny(), tmp_path / "o")
    assert [t.final_params_sha256 for t in a.tasks] == [t.final_params_sha256 for t in b.tasks]


def test_run_budget_accounting():
    report = C.run(tiny())
    assert [t.steps for t in report.tasks] == [60, 60]


def test_run_deterministic(tmp_path):
    C.run(tiny(), tmp_path / "a")
    C.run(tiny(), tmp_path / "b")
    assert (tmp_path / "a" / "summary.json").read_bytes() == \
        (tmp_path / "b" / "summary.json").read_bytes()


def test_transfer_none_trains_each_task_fresh():
    report = C.run(tiny(transfer={"kind": "none"}))
    t0, t1 = report.tasks
    assert t1.parent_checkpoint_sha256 is None
    assert t1.initial_params_sha256 == dyan.build(tiny().dyan, C.derive_seed(3, "init", 1)).digest()


@pytest.mark.parametrize("kind", ["reuse", "distill"])
def test_run_other_transfers(kind):
    report = C.run(tiny(transfer={"kind": kind}))
    assert len(report.tasks) == 2 and report.tasks[1].updates > 0


def test_single_task_equals_bare_learner():
    spec = tiny(tasks=[{"team_a": 2, "budget": 80}], transfer={"kind": "none"}, eval_episodes=0)
    report = C.run(spec)

    learner = init_learner(spec.dyan, spec.learner, seed=C.derive_seed(spec.seed, "init", 0))
    buf = TaskBuffer(0, spec.learner.buffer_capacity, spec.learner.min_fill)
    result = train_on_task(learner, spec.world_config(spec.tasks[0]), 80, buf,
                           TaskRngs.from_seed(C.derive_seed(spec.seed, "train", 0)))
    assert report.tasks[0].final_params_sha256 == learner.online.digest()
    assert report.tasks[0].curve == result.episodes


def test_run_error_keeps_partial_report(monkeypatch):
    from dymacl import curriculum
    from dymacl.errors import NumericError
    calls = {"n": 0}
    original = curriculum.train_on_task

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("boom")
        return original(*args, **kw)

    monkeypatch.setattr(curriculum, "train_on_task", flaky)
    with pytest.raises(C.RunError) as info:
        C.run(tiny())
    assert len(info.value.report.tasks) == 1
    assert "boom" in info.value.report.error
