"""Curriculum definition, execution and evaluation.

A run trains one learner through an ordered list of battle tasks with
growing team sizes.  Between tasks knowledge moves by the selected
transfer mechanism.  Every task ends with a checkpoint and a greedy
evaluation against the scripted opponent.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dyan
from . import env as E
from .errors import ConfigError, ContractError, DymaError, ParseError
from .learners import (OPPONENTS, LOG_FIELDS, LearnerConfig, LearnerState, TaskRngs,
                       init_learner, run_episode, train_on_task)
from .replay import TaskBuffer
from .transfer import Teacher, TeacherSet, TransferMode, make_loss_hook, model_reload

log = logging.getLogger(__name__)

PRESETS = ("desk", "magent", "starcraft_tables")


@dataclass(frozen=True)
class TaskSpec:
    team_a: int
    team_b: int
    budget: int
    map_side: int | None = None
    budget_overrides: dict = field(default_factory=dict)

    def budget_for(self, algorithm: str) -> int:
        return int(self.budget_overrides.get(algorithm, self.budget))

    @property
    def label(self) -> str:
        return f"{self.team_a}v{self.team_b}"


@dataclass(frozen=True)
class WorldDefaults:
    max_steps: int = 300
    obs_radius: int = 6
    hp_max: float = 10.0
    attack_damage: float = 2.0


@dataclass(frozen=True)
class CurriculumSpec:
    tasks: tuple
    transfer: TransferMode = TransferMode()
    learner: LearnerConfig = LearnerConfig()
    dyan: dyan.DyanSpec = dyan.DyanSpec()
    world: WorldDefaults = WorldDefaults()
    eval_episodes: int = 100
    seed: int = 0
    opponent: str = "scripted"
    name: str = "run"

    def world_config(self, task: TaskSpec, seed: int = 0) -> E.WorldConfig:
        return E.WorldConfig(task.team_a, task.team_b, task.map_side,
                             self.world.max_steps, self.world.obs_radius,
                             self.world.hp_max, self.world.attack_damage, seed)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "eval_episodes": self.eval_episodes,
            "opponent": self.opponent,
            "tasks": [{k: v for k, v in asdict(t).items() if v not in (None, {})}
                      for t in self.tasks],
            "transfer": asdict(self.transfer),
            "learner": asdict(self.learner),
            "dyan": self.dyan.to_dict(),
            "world": asdict(self.world),
        }


# ---------------------------------------------------------------- parsing

_TOP_KEYS = {"name", "seed", "eval_episodes", "opponent", "tasks", "transfer",
             "learner", "dyan", "world"}
_TASK_KEYS = {"team_a", "team_b", "budget", "map_side", "budget_overrides"}


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ParseError(f"'{where}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ParseError(f"unknown keys in '{where}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (ConfigError, TypeError) as exc:
        raise ParseError(f"invalid '{where}': {exc}") from None


def spec_from_dict(data: dict) -> CurriculumSpec:
    if not isinstance(data, dict):
        raise ParseError("config must be a mapping at top level")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ParseError(f"unknown top-level keys: {sorted(unknown)}")
    raw_tasks = data.get("tasks")
    if not raw_tasks or not isinstance(raw_tasks, list):
        raise ParseError("'tasks' must be a non-empty list")
    tasks = []
    for i, t in enumerate(raw_tasks):
        if not isinstance(t, dict):
            raise ParseError(f"task {i} must be a mapping")
        bad = set(t) - _TASK_KEYS
        if bad:
            raise ParseError(f"unknown keys in task {i}: {sorted(bad)}")
        if "team_a" not in t or "budget" not in t:
            raise ParseError(f"task {i} needs 'team_a' and 'budget'")
        task = TaskSpec(int(t["team_a"]), int(t.get("team_b", t["team_a"])), int(t["budget"]),
                        t.get("map_side"), dict(t.get("budget_overrides") or {}))
        if task.budget <= 0 or any(int(v) <= 0 for v in task.budget_overrides.values()):
            raise ParseError(f"task {i}: budget must be > 0")
        tasks.append(task)

    world = _section(WorldDefaults, data.get("world"), "world")
    learner = _section(LearnerConfig, data.get("learner"), "learner")
    transfer = _section(TransferMode, data.get("transfer"), "transfer")
    dyan_raw = dict(data.get("dyan") or {})
    if dyan_raw.get("mode") == "flat":
        dyan_raw.setdefault("teammate_slots", max(t.team_a for t in tasks) - 1)
        dyan_raw.setdefault("enemy_slots", max(t.team_b for t in tasks))
    net = _section(dyan.DyanSpec, dyan_raw, "dyan")

    spec = CurriculumSpec(
        tasks=tuple(tasks), transfer=transfer, learner=learner, dyan=net, world=world,
        eval_episodes=int(data.get("eval_episodes", 100)), seed=int(data.get("seed", 0)),
        opponent=str(data.get("opponent", "scripted")), name=str(data.get("name", "run")),
    )
    validate(spec)
    return spec


def validate(spec: CurriculumSpec) -> None:
    if not spec.tasks:
        raise ParseError("a curriculum needs at least one task")
    if spec.eval_episodes < 0:
        raise ParseError("eval_episodes must be >= 0")
    if spec.opponent not in OPPONENTS:
        raise ParseError(f"opponent must be one of {OPPONENTS}")
    for i, task in enumerate(spec.tasks):
        try:
            spec.world_config(task)
        except ConfigError as exc:
            raise ParseError(f"task {i}: {exc}") from None
    sizes = [t.team_a for t in spec.tasks]
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        warnings.warn("curriculum agent counts decrease between tasks", stacklevel=2)


def parse_spec(path) -> CurriculumSpec:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed config {path}: {exc}") from None
    return spec_from_dict(data)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ParseError(f"unknown preset {name!r}; choose from {PRESETS}")
    return Path(str(resources.files("dymacl") / "presets" / f"{name}.yaml"))


def load_preset(name: str) -> CurriculumSpec:
    return parse_spec(preset_path(name))


# ---------------------------------------------------------------- seeds

_SEED_TAGS = {"init": 1, "train": 2, "eval": 3}


def derive_seed(seed: int, tag: str, task_index: int) -> int:
    """Seed of one random stream of one task, stable across runs."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _SEED_TAGS[tag], task_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------- evaluation

@dataclass
class Metrics:
    win_rate: float
    mean_survivors: float
    mean_kill_count: float
    mean_episode_reward: float
    se_win_rate: float
    se_survivors: float
    se_kill_count: float
    se_episode_reward: float
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_se(values):
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return 0.0, 0.0
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def evaluate(checkpoint, world: E.WorldConfig, episodes: int, seed: int,
             opponent: str = "scripted") -> Metrics:
    """Greedy (epsilon = 0) episodes of team A against ``opponent``.

    ``checkpoint`` is a path or a ``(params, spec)`` pair.
    """
    if episodes <= 0:
        raise ContractError("episodes must be > 0")
    if isinstance(checkpoint, (str, os.PathLike)):
        params, spec = dyan.load(checkpoint)
    else:
        params, spec = checkpoint
    learner = LearnerState(spec, LearnerConfig(), params, params, None)
    rng = np.random.default_rng(seed)
    wins, survivors, kills, rewards = [], [], [], []
    for _ in range(episodes):
        ep_world = replace(world, seed=int(rng.integers(0, 2**63 - 1)))
        stats = run_episode(learner, ep_world, rng, 0.0, opponent=opponent)
        wins.append(1.0 if stats.outcome == "A_wins" else 0.0)
        survivors.append(stats.survivors)
        kills.append(stats.kills)
        rewards.append(stats.team_reward)
    (w, sw), (s, ss), (k, sk), (r, sr) = map(_mean_se, (wins, survivors, kills, rewards))
    return Metrics(w, s, k, r, sw, ss, sk, sr, episodes)


# ---------------------------------------------------------------- run

@dataclass
class TaskReport:
    index: int
    label: str
    budget: int
    steps: int
    updates: int
    episodes: int
    checkpoint: str
    checkpoint_sha256: str
    parent_checkpoint_sha256: str | None
    initial_params_sha256: str
    final_params_sha256: str
    metrics: Metrics | None
    curve: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "curve"}
        out["metrics"] = self.metrics.to_dict() if self.metrics else None
        return out


@dataclass
class RunReport:
    config: dict
    version: str
    tasks: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    error: str | None = None

    def summary(self) -> dict:
        return {"config": self.config, "version": self.version, "error": self.error,
                "tasks": [t.summary() for t in self.tasks]}


class RunError(DymaError):
    """A curriculum run aborted; ``report`` holds the completed tasks."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def version_hash() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256(__version__.encode())
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def run(spec: CurriculumSpec, out_dir=None, on_task_end=None) -> RunReport:
    """Train through every task of ``spec`` in order.

    With ``out_dir`` the report is written as ``summary.json``,
    ``config.yaml``, ``timing.json``, ``curves/task_<k>.csv`` and
    ``checkpoints/task_<k>.ckpt``.  Without it checkpoints live in memory.
    """
    start = time.perf_counter()
    report = RunReport(spec.to_dict(), version_hash())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "curves").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        _write_config_echo(out, spec, report.version)

    teachers: list[Teacher] = []
    buffers: list[TaskBuffer] = []
    prev = None  # (params, checkpoint sha256, path)
    cfg = spec.learner
    try:
        for k, task in enumerate(spec.tasks):
            world = spec.world_config(task)
            if spec.transfer.kind == "reload" and prev is not None:
                if out is not None:
                    learner = model_reload(prev[2], spec.dyan, cfg)
                else:
                    learner = init_learner(spec.dyan, cfg, params=prev[0])
                parent = prev[1]
            else:
                learner = init_learner(spec.dyan, cfg, seed=derive_seed(spec.seed, "init", k))
                parent = None
            initial_digest = learner.online.digest()

            buffer = TaskBuffer(k, cfg.buffer_capacity, cfg.min_fill)
            if spec.transfer.kind != "reuse":
                buffers.clear()
            buffers.append(buffer)
            hook = make_loss_hook(spec.transfer, buffers, TeacherSet(teachers), cfg)
            log_path = out / "curves" / f"task_{k}.csv" if out is not None else None
            log.info("task %d (%s): budget %d steps", k, task.label, task.budget_for(cfg.algorithm))
            result = train_on_task(learner, world, task.budget_for(cfg.algorithm), buffer,
                                   TaskRngs.from_seed(derive_seed(spec.seed, "train", k)),
                                   opponent=spec.opponent, loss_hook=hook, log_path=log_path)

            ckpt_bytes = dyan.checkpoint_bytes(learner.online, spec.dyan,
                                               {"task": k, "label": task.label})
            ckpt_sha = hashlib.sha256(ckpt_bytes).hexdigest()
            ckpt_rel = f"checkpoints/task_{k}.ckpt"
            ckpt_path = None
            if out is not None:
                ckpt_path = out / ckpt_rel
                dyan.save(learner.online, spec.dyan, ckpt_path, {"task": k, "label": task.label})
            if spec.transfer.kind == "distill":
                teachers.append(Teacher(learner.online, spec.dyan, k))
            metrics = None
            if spec.eval_episodes > 0:
                metrics = evaluate((learner.online, spec.dyan), world, spec.eval_episodes,
                                   derive_seed(spec.seed, "eval", k), opponent="scripted")
            task_report = TaskReport(
                k, task.label, task.budget_for(cfg.algorithm), result.steps, result.updates,
                len(result.episodes), ckpt_rel, ckpt_sha, parent, initial_digest,
                learner.online.digest(), metrics, result.episodes)
            report.tasks.append(task_report)
            prev = (learner.online, ckpt_sha, ckpt_path)
            if on_task_end is not None:
                on_task_end(task_report, learner)
    except DymaError as exc:
        report.error = f"task {len(report.tasks)}: {exc}"
        raise RunError(report.error, report) from exc
    finally:
        report.wall_clock_seconds = time.perf_counter() - start
        if out is not None:
            _write_report(out, report)
    return report


def _write_config_echo(out: Path, spec: CurriculumSpec, version: str) -> None:
    echo = {"version": version, **spec.to_dict()}
    (out / "config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True))


def _write_report(out: Path, report: RunReport) -> None:
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": report.wall_clock_seconds}) + "\n")
    for task in report.tasks:
        path = out / "curves" / f"task_{task.index}.csv"
        if path.exists():
            continue
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in task.curve:
                writer.writerow(row.__dict__)
