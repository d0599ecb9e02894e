"""Dynamic Agent-number Network.

The observation is split in three parts.  Environment and self features
go through a dense branch; every visible teammate goes through one shared
dense branch and the results are aggregated (SUM / MEAN / MAX) into a
single teammate embedding; enemies likewise with their own branch.  The
three parts are concatenated and fed to a GRU cell (or a dense layer)
followed by a linear Q head.  Because the per-neighbor branches are
shared, the parameter set does not depend on how many agents exist.

``mode="flat"`` builds the vanilla baseline instead: the observation is
zero-padded to fixed neighbor slot counts and fed to one dense layer.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .env import (ENV_FEATURE_WIDTH, NEIGHBOR_FEATURE_WIDTH, NUM_ACTIONS,
                  SELF_FEATURE_WIDTH, Observation)
from .errors import CheckpointError, ConfigError, ShapeError
from .replay import pad_to

CHECKPOINT_MAGIC = b"DYMACKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DyanSpec:
    env_self_width: int = ENV_FEATURE_WIDTH + SELF_FEATURE_WIDTH
    neighbor_feature_width: int = NEIGHBOR_FEATURE_WIDTH
    hidden_units: int = 16
    aggregation: str = "SUM"
    use_gru: bool = True
    num_actions: int = NUM_ACTIONS
    split_teams: bool = True
    mode: str = "dyan"
    teammate_slots: int = 0
    enemy_slots: int = 0
    branch_layers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("env_self_width", "neighbor_feature_width", "hidden_units", "num_actions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.aggregation not in T.AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {T.AGGREGATIONS}")
        if self.mode not in ("dyan", "flat"):
            raise ConfigError("mode must be 'dyan' or 'flat'")
        if self.branch_layers < 1:
            raise ConfigError("branch_layers must be >= 1")
        if self.mode == "flat" and (self.teammate_slots < 0 or self.enemy_slots < 0):
            raise ConfigError("slot counts must be >= 0")

    @property
    def flat_width(self) -> int:
        return (self.env_self_width
                + (self.teammate_slots + self.enemy_slots) * self.neighbor_feature_width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DyanSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown DyanSpec keys {sorted(unknown)}")
        return cls(**data)


STARCRAFT_LIKE = DyanSpec(hidden_units=64)


def layer_shapes(spec: DyanSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, shape, fan_in)`` for every parameter, in initialization order."""
    h = spec.hidden_units
    f = spec.neighbor_feature_width
    shapes = []
    if spec.mode == "dyan":
        shapes += [("env.W", (spec.env_self_width, h), spec.env_self_width),
                   ("env.b", (h,), spec.env_self_width)]
        branches = ("mate", "enemy") if spec.split_teams else ("neighbor",)
        for br in branches:
            shapes += [(f"{br}.W", (f, h), f), (f"{br}.b", (h,), f)]
            for layer in range(1, spec.branch_layers):
                shapes += [(f"{br}.W{layer}", (h, h), h), (f"{br}.b{layer}", (h,), h)]
        core_in = 3 * h
    else:
        shapes += [("flat.W", (spec.flat_width, h), spec.flat_width),
                   ("flat.b", (h,), spec.flat_width)]
        core_in = h
    if spec.use_gru:
        for gate in ("z", "r", "h"):
            shapes += [(f"gru.W_{gate}", (core_in, h), core_in),
                       (f"gru.U_{gate}", (h, h), h),
                       (f"gru.b_{gate}", (h,), h)]
    else:
        shapes += [("core.W", (core_in, h), core_in), ("core.b", (h,), core_in)]
    shapes += [("head.W", (h, spec.num_actions), h), ("head.b", (spec.num_actions,), h)]
    return shapes


def parameter_count(spec: DyanSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in layer_shapes(spec))


@dataclass(frozen=True)
class DyanParams:
    """Immutable parameter snapshot; arrays are read-only."""

    arrays: dict

    def __post_init__(self):
        for a in self.arrays.values():
            a.setflags(write=False)

    @classmethod
    def from_arrays(cls, arrays: dict) -> "DyanParams":
        return cls({k: np.array(v, dtype=np.float64) for k, v in arrays.items()})

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def tensors(self, requires_grad=False) -> dict:
        if requires_grad:
            return {k: T.Tensor(v.copy(), requires_grad=True) for k, v in self.arrays.items()}
        return {k: T.Tensor(v) for k, v in self.arrays.items()}

    def equals(self, other: "DyanParams") -> bool:
        return (self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k], dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class ForwardOutput:
    q_values: np.ndarray
    hidden_next: np.ndarray
    teammate_embedding: np.ndarray
    enemy_embedding: np.ndarray


def build(spec: DyanSpec, seed: int) -> DyanParams:
    spec.validate()
    rng = np.random.default_rng(seed)
    return DyanParams({name: T.init_uniform(rng, fan_in, shape)
                       for name, shape, fan_in in layer_shapes(spec)})


# ---------------------------------------------------------------- batching

@dataclass
class ObsBatch:
    """Observations packed for one vectorized forward pass."""

    n: int
    env_self: np.ndarray
    mates: np.ndarray
    mate_seg: np.ndarray
    enemies: np.ndarray
    enemy_seg: np.ndarray
    flat: np.ndarray | None = None


def pack(observations, spec: DyanSpec) -> ObsBatch:
    n = len(observations)
    width = spec.neighbor_feature_width
    if n == 0:
        empty = np.zeros((0, width))
        seg = np.zeros(0, dtype=np.int64)
        flat = np.zeros((0, spec.flat_width)) if spec.mode == "flat" else None
        return ObsBatch(0, np.zeros((0, spec.env_self_width)), empty, seg, empty, seg, flat)
    try:
        env_self = np.hstack([np.stack([o.env_features for o in observations]),
                              np.stack([o.self_features for o in observations])])
        mates = np.concatenate([o.teammate_features for o in observations])
        enemies = np.concatenate([o.enemy_features for o in observations])
    except ValueError as exc:
        raise ShapeError(f"inconsistent observation widths: {exc}") from None
    if env_self.shape[1] != spec.env_self_width:
        raise ShapeError(f"env+self width {env_self.shape[1]} != {spec.env_self_width}")
    if mates.shape[1] != width or enemies.shape[1] != width:
        raise ShapeError(f"neighbor feature width must be {width}")
    rows = np.arange(n)
    mate_seg = np.repeat(rows, [o.teammate_features.shape[0] for o in observations])
    enemy_seg = np.repeat(rows, [o.enemy_features.shape[0] for o in observations])
    flat = None
    if spec.mode == "flat":
        flat = np.stack([pad_to(o, spec.teammate_slots, spec.enemy_slots) for o in observations])
    return ObsBatch(n, env_self, mates, mate_seg, enemies, enemy_seg, flat)


@dataclass
class BatchOutput:
    q: T.Tensor
    hidden_next: T.Tensor
    teammate_embedding: T.Tensor
    enemy_embedding: T.Tensor


def _branch(params, key, rows, layers):
    out = T.dense(rows, params[f"{key}.W"], params[f"{key}.b"], "relu")
    for layer in range(1, layers):
        out = T.dense(out, params[f"{key}.W{layer}"], params[f"{key}.b{layer}"], "relu")
    return out


def forward_batch(params: dict, spec: DyanSpec, batch: ObsBatch, hidden) -> BatchOutput:
    """Vectorized forward; ``params`` maps names to Tensors."""
    h_units = spec.hidden_units
    hidden = T.as_tensor(hidden if hidden is not None else np.zeros((batch.n, h_units)))
    if hidden.shape != (batch.n, h_units):
        raise ShapeError(f"hidden shape {hidden.shape} != {(batch.n, h_units)}")
    if spec.mode == "dyan":
        env_part = T.dense(batch.env_self, params["env.W"], params["env.b"], "relu")
        mate_key = "mate" if spec.split_teams else "neighbor"
        enemy_key = "enemy" if spec.split_teams else "neighbor"
        mate_rows = _branch(params, mate_key, batch.mates, spec.branch_layers)
        enemy_rows = _branch(params, enemy_key, batch.enemies, spec.branch_layers)
        mate_emb = T.segment_aggregate(spec.aggregation, mate_rows, batch.mate_seg, batch.n)
        enemy_emb = T.segment_aggregate(spec.aggregation, enemy_rows, batch.enemy_seg, batch.n)
        core_in = T.concat([env_part, mate_emb, enemy_emb], axis=1)
    else:
        core_in = T.dense(batch.flat, params["flat.W"], params["flat.b"], "relu")
        mate_emb = enemy_emb = T.Tensor(np.zeros((batch.n, h_units)))
    if spec.use_gru:
        gru = {name: params[f"gru.{name}"] for name in T.GRU_PARAM_NAMES}
        h_next = T.gru_step(core_in, hidden, gru)
    else:
        h_next = T.dense(core_in, params["core.W"], params["core.b"], "relu")
    q = T.dense(h_next, params["head.W"], params["head.b"], "identity")
    return BatchOutput(q, h_next, mate_emb, enemy_emb)


def q_values(params: DyanParams, spec: DyanSpec, observations, hidden=None):
    """Inference helper: ``(q (N, A), hidden_next (N, H))`` as numpy arrays."""
    out = forward_batch(params.tensors(), spec, pack(observations, spec), hidden)
    return out.q.data, out.hidden_next.data


def forward(params: DyanParams, spec: DyanSpec, obs: Observation, hidden=None) -> ForwardOutput:
    h = None if hidden is None else np.asarray(hidden, dtype=np.float64).reshape(1, -1)
    out = forward_batch(params.tensors(), spec, pack([obs], spec), h)
    return ForwardOutput(out.q.data[0].copy(), out.hidden_next.data[0].copy(),
                         out.teammate_embedding.data[0].copy(), out.enemy_embedding.data[0].copy())


def embed(params: DyanParams, spec: DyanSpec, obs: Observation):
    """Post-aggregation ``(teammate_embedding, enemy_embedding)``."""
    out = forward(params, spec, obs)
    return out.teammate_embedding, out.enemy_embedding


def embed_batch(params: DyanParams, spec: DyanSpec, observations):
    out = forward_batch(params.tensors(), spec, pack(observations, spec), None)
    return out.teammate_embedding.data, out.enemy_embedding.data


# ---------------------------------------------------------------- checkpoints
#
# Byte layout (all integers little-endian):
#   magic      8 bytes  b"DYMACKPT"
#   version    u32
#   meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys):
#              {"spec": {...DyanSpec...}, "extra": {...}}
#   n_tensors  u32, then per tensor, in sorted name order:
#              name_len u16, name UTF-8, ndim u8, ndim x u32 dims,
#              prod(dims) x float64 little-endian
#   crc32      u32 over every preceding byte

def checkpoint_bytes(params: DyanParams, spec: DyanSpec, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps({"spec": spec.to_dict(), "extra": extra or {}},
                      sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name in sorted(params.arrays):
        arr = params.arrays[name]
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(params: DyanParams, spec: DyanSpec, path, extra: dict | None = None) -> str:
    """Write a checkpoint atomically; returns its sha256 hex digest."""
    data = checkpoint_bytes(params, spec, extra)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes):
    """Decode checkpoint bytes into ``(params, spec, extra)``."""
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated)")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
        spec = DyanSpec.from_dict(meta["spec"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    expected = {name: shape for name, shape, _ in layer_shapes(spec)}
    got = {k: v.shape for k, v in arrays.items()}
    if expected != got:
        raise CheckpointError("checkpoint tensors do not match its spec")
    return DyanParams(arrays), spec, meta.get("extra", {})


def load(path):
    """Read a checkpoint; returns ``(params, spec)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    params, spec, _ = parse_checkpoint(data)
    return params, spec


def load_with_meta(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    params, spec, extra = parse_checkpoint(data)
    return params, spec, extra, hashlib.sha256(data).hexdigest()
