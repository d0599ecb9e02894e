"""Cross-task transfer: buffer reuse, Q-value distillation and model reload."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import dyan
from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DomainError, NumericError
from .learners import (LearnerConfig, LearnerState, bootstrap_values, new_optimizer,
                       per_sample_loss, reduce_loss)
from .replay import multi_sample

TRANSFER_KINDS = ("none", "reuse", "distill", "reload")


@dataclass(frozen=True)
class TransferMode:
    """Which mechanism carries knowledge into the next task.

    ``reuse_targets``: ``"current"`` bootstraps every task's samples with
    the current target network; ``"teacher"`` uses the frozen network of
    the task the sample came from.  ``symmetric_temperature`` divides the
    student logits by ``omega`` too.  ``reduction`` applies to both the
    reuse and distillation sums (``"sum"`` is the literal double sum).
    """

    kind: str = "none"
    omega: float = 1.0
    distill_weight: float = 1.0
    reuse_targets: str = "current"
    symmetric_temperature: bool = False
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in TRANSFER_KINDS:
            raise ConfigError(f"transfer kind must be one of {TRANSFER_KINDS}")
        if not self.omega > 0:
            raise ConfigError("omega must be > 0")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be >= 0")
        if self.reuse_targets not in ("current", "teacher"):
            raise ConfigError("reuse_targets must be 'current' or 'teacher'")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")

    @classmethod
    def from_dict(cls, data: dict) -> "TransferMode":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown transfer keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Teacher:
    params: dyan.DyanParams
    spec: dyan.DyanSpec
    task_id: int


class TeacherSet(tuple):
    """Frozen snapshots of the networks trained on earlier tasks."""

    def __new__(cls, teachers=()):
        return super().__new__(cls, tuple(teachers))


def buffer_reuse_loss(per_task_batches, online, target, spec, gamma, algorithm="IQL",
                      reduction="sum", teachers=None) -> T.Tensor:
    """Squared TD error summed over every task's batch.

    The current online network scores all samples.  With ``teachers``
    (one per earlier task, in order) the bootstrap term of task ``i`` comes
    from teacher ``i`` instead of ``target``.
    """
    if not per_task_batches:
        raise ContractError("need at least one task batch")
    b = len(per_task_batches[0])
    if any(len(batch) != b for batch in per_task_batches):
        raise ContractError("every task batch must hold the same number of transitions")
    if len(per_task_batches) == 1:
        per = per_sample_loss(per_task_batches[0], online, target, spec, gamma, algorithm)
    else:
        parts = []
        for i, batch in enumerate(per_task_batches):
            boot = None
            if teachers is not None and i < len(teachers):
                t = teachers[i]
                boot = bootstrap_values(batch, t.params, t.spec)
            parts.append(per_sample_loss(batch, online, target, spec, gamma, algorithm, boot))
        per = T.concat(parts, axis=0)
    loss = reduce_loss(per, reduction)
    if not np.isfinite(loss.data):
        raise NumericError("NaN loss")
    return loss


def _rows(states):
    obs, hidden = [], []
    for item in states:
        if hasattr(item, "observations"):
            obs.extend(item.observations)
            hidden.append(item.hidden)
        else:
            o, h = item
            obs.append(o)
            hidden.append(np.asarray(h).reshape(1, -1))
    return obs, np.concatenate(hidden) if hidden else None


def distillation_loss(teachers, student, spec, states, omega=1.0, reduction="sum",
                      symmetric_temperature=False) -> T.Tensor:
    """KL(softmax(q_teacher / omega) || softmax(q_student)), summed over teachers.

    ``states`` holds transitions (every stored agent observation counts as
    one state, evaluated with its stored hidden state) or ``(obs, hidden)``
    pairs.  Teacher outputs are constants: no gradient reaches them.
    """
    if not omega > 0:
        raise DomainError(f"temperature must be > 0, got {omega}")
    if len(teachers) == 0:
        raise ContractError("distillation needs at least one teacher")
    obs, hidden = _rows(states)
    if not obs:
        raise ContractError("distillation needs at least one state")
    student_t = student.tensors() if isinstance(student, dyan.DyanParams) else student
    q_student = dyan.forward_batch(student_t, spec, dyan.pack(obs, spec), hidden).q
    if symmetric_temperature:
        q_student = T.scale(q_student, 1.0 / omega)
    log_p_student = T.log_softmax(q_student)
    ones = np.ones((q_student.shape[1], 1))
    terms = []
    for teacher in teachers:
        t_params = teacher.params if isinstance(teacher, Teacher) else teacher
        t_spec = teacher.spec if isinstance(teacher, Teacher) else spec
        t_tensors = t_params.tensors() if isinstance(t_params, dyan.DyanParams) else t_params
        q_teacher = dyan.forward_batch(t_tensors, t_spec, dyan.pack(obs, t_spec), hidden).q.data
        # same log_softmax as the student so identical networks cancel exactly
        log_p_teacher = T.log_softmax(T.Tensor(q_teacher / omega)).data
        p_teacher = np.exp(log_p_teacher)
        # per state: sum_a p_t (log p_t - log p_s), clamped at 0 against rounding
        per_state = T.matmul(T.mul(p_teacher, T.sub(log_p_teacher, log_p_student)), ones)
        terms.append(T.total(T.relu(per_state)))
    loss = terms[0]
    for term in terms[1:]:
        loss = T.add(loss, term)
    if reduction == "mean":
        loss = T.scale(loss, 1.0 / len(obs))
    elif reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    if not np.isfinite(loss.data):
        raise NumericError("NaN loss")
    return loss


def check_compatible(source: dyan.DyanSpec, target: dyan.DyanSpec) -> None:
    """Raise ``CheckpointError`` naming the first field that differs."""
    for name in ("env_self_width", "neighbor_feature_width", "num_actions", "hidden_units",
                 "mode", "split_teams", "use_gru", "aggregation",
                 "teammate_slots", "enemy_slots"):
        a, b = getattr(source, name), getattr(target, name)
        if a != b:
            raise CheckpointError(f"checkpoint incompatible: {name} is {a!r}, task needs {b!r}")


def model_reload(checkpoint_path, spec: dyan.DyanSpec, config: LearnerConfig) -> LearnerState:
    """Fresh learner whose online and target networks start from a checkpoint."""
    params, saved_spec = dyan.load(checkpoint_path)
    check_compatible(saved_spec, spec)
    return LearnerState(spec, config, params, params, new_optimizer(config))


def make_loss_hook(mode: TransferMode, buffers, teachers: TeacherSet, learner_config: LearnerConfig):
    """Build the per-update hook used by ``learners.train_on_task``.

    ``buffers`` lists earlier tasks' buffers followed by the current one.
    Returns ``None`` when the plain learner step applies.
    """
    current = buffers[-1]
    b = learner_config.batch_size
    if mode.kind == "reuse" and len(buffers) > 1:
        def hook(learner, rng):
            ready = [buf for buf in buffers[:-1] if buf.ready] + [current]
            batches = multi_sample(ready, b, rng)
            reuse_teachers = None
            if mode.reuse_targets == "teacher":
                by_task = {t.task_id: t for t in teachers}
                reuse_teachers = [by_task[buf.task_id] for buf in ready[:-1]]

            def base(params):
                return buffer_reuse_loss(batches, params, learner.target, learner.spec,
                                         learner.config.gamma, learner.config.algorithm,
                                         mode.reduction, reuse_teachers)
            return batches[-1], base, None
        return hook
    if mode.kind == "distill" and len(teachers) > 0:
        def hook(learner, rng):
            batch = current.sample(b, rng)

            def extra(params):
                kl = distillation_loss(teachers, params, learner.spec, batch, mode.omega,
                                       mode.reduction, mode.symmetric_temperature)
                return T.scale(kl, mode.distill_weight)
            return batch, None, extra
        return hook
    return None
