"""Semantic-embedding analysis and CSV/text export.

States that mean the same thing to an agent (here: the same number of
visible teammates) should map to nearby teammate embeddings whatever the
total number of agents.  ``collect_embeddings`` gathers teammate-branch
embeddings from scripted rollouts in several scenarios and
``distance_report`` compares mean distances within and across classes.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import dyan
from . import env as E
from .errors import AnalysisError, ContractError
from .learners import LOG_FIELDS

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class SemanticSample:
    embedding: np.ndarray
    semantic_label: int
    scenario_label: str


def _visible_teammates(obs: E.Observation, state, agent_id) -> int:
    return obs.n_teammates


def _visible_enemies(obs: E.Observation, state, agent_id) -> int:
    return obs.n_enemies


def _hp_band(obs: E.Observation, state, agent_id) -> int:
    agent = state.agents[agent_id]
    return min(3, int(4 * agent.hp / state.config.hp_max))


LABELERS = {"teammates": _visible_teammates, "enemies": _visible_enemies, "hp_band": _hp_band}


def _resolve(checkpoint):
    if isinstance(checkpoint, tuple):
        return checkpoint
    return dyan.load(checkpoint)


def collect_embeddings(checkpoint, scenarios=(3, 4, 5), samples: int = 300, seed: int = 0,
                       labeler: str = "teammates", max_steps: int = 300) -> list[SemanticSample]:
    """Teammate embeddings from scripted-vs-scripted rollouts.

    ``scenarios`` are team sizes (``n`` means an n-vs-n battle).  Every
    alive team-A agent contributes one sample per step until ``samples``
    are collected for the scenario.  Deterministic given ``seed``.
    """
    params, spec = _resolve(checkpoint)
    if samples < 0:
        raise ContractError("samples must be >= 0")
    label_fn = LABELERS[labeler]
    seeds = np.random.SeedSequence(seed).spawn(len(scenarios))
    out: list[SemanticSample] = []
    for n, ss in zip(scenarios, seeds):
        rng = np.random.default_rng(ss)
        scenario = f"{n}v{n}"
        got = 0
        while got < samples:
            cfg = E.WorldConfig(n, n, max_steps=max_steps, seed=int(rng.integers(0, 2**63 - 1)))
            state = E.reset(cfg)
            done = False
            while not done and got < samples:
                ids = state.alive_ids(E.TEAM_A)[:samples - got]
                obs = [E.observe(state, i) for i in ids]
                mate_emb, _ = dyan.embed_batch(params, spec, obs)
                for k, i in enumerate(ids):
                    out.append(SemanticSample(mate_emb[k].copy(), int(label_fn(obs[k], state, i)),
                                              scenario))
                got += len(ids)
                actions = {i: E.scripted_opponent(state, i) for i in state.alive_ids()}
                state, result = E.step(state, actions)
                done = result.done
    return out


@dataclass
class DistanceReport:
    intra: float
    inter: float
    ratio: float
    counts: dict
    metric: str = "euclidean"
    degenerate: bool = False
    intra_pairs: int = 0
    inter_pairs: int = 0
    scenarios: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"metric: {self.metric}",
                 f"intra: {self.intra!r}",
                 f"inter: {self.inter!r}",
                 f"ratio: {self.ratio!r}",
                 f"degenerate: {str(self.degenerate).lower()}",
                 f"intra_pairs: {self.intra_pairs}",
                 f"inter_pairs: {self.inter_pairs}"]
        lines += [f"count[{k}]: {v}" for k, v in sorted(self.counts.items())]
        lines += [f"scenario[{k}]: {v}" for k, v in sorted(self.scenarios.items())]
        return "\n".join(lines) + "\n"


def _cosine(x: np.ndarray) -> np.ndarray:
    """Condensed cosine distances; zero vectors are at 0 from each other, 1 from the rest."""
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    unit = np.where(zero[:, None], 0.0, x / np.where(zero, 1.0, norms)[:, None])
    d = pdist(unit, "sqeuclidean") / 2.0  # 1 - cos for unit vectors
    i, j = np.triu_indices(len(x), k=1)
    d = np.where(zero[i] & zero[j], 0.0, np.where(zero[i] | zero[j], 1.0, d))
    return np.clip(d, 0.0, 2.0)


def distance_report(samples, metric: str = "euclidean") -> DistanceReport:
    """Mean pairwise distance within and across semantic classes.

    Every unordered pair counts once: pairs sharing a label feed the intra
    mean, the rest the inter mean.  ``ratio = intra / inter``; when every
    distance is zero the ratio is reported as 0 with ``degenerate`` set.
    """
    if metric not in METRICS:
        raise AnalysisError(f"metric must be one of {METRICS}")
    labels = np.array([s.semantic_label for s in samples], dtype=np.int64)
    counts = {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))}
    if sum(1 for v in counts.values() if v >= 2) < 2:
        raise AnalysisError("need at least two semantic classes with two or more samples each")
    x = np.stack([np.asarray(s.embedding, dtype=np.float64) for s in samples])
    d = pdist(x, "euclidean") if metric == "euclidean" else _cosine(x)
    i, j = np.triu_indices(len(x), k=1)
    same = labels[i] == labels[j]
    intra = float(np.mean(d[same]))
    inter = float(np.mean(d[~same]))
    degenerate = inter == 0.0
    ratio = 0.0 if degenerate else intra / inter
    scenarios: dict = {}
    for s in samples:
        scenarios[s.scenario_label] = scenarios.get(s.scenario_label, 0) + 1
    return DistanceReport(intra, inter, ratio, counts, metric, degenerate,
                          int(same.sum()), int((~same).sum()), scenarios)


# ---------------------------------------------------------------- export

def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".export-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def embeddings_csv(samples, width: int | None = None) -> str:
    """CSV text: ``label,scenario,v0..v{width-1}``, one row per sample."""
    if width is None:
        width = len(samples[0].embedding) if samples else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "scenario"] + [f"v{k}" for k in range(width)])
    for s in samples:
        if len(s.embedding) != width:
            raise ContractError("all embeddings must share one width")
        writer.writerow([s.semantic_label, s.scenario_label] + [repr(float(v)) for v in s.embedding])
    return buf.getvalue()


def export_embeddings(samples, path, width: int | None = None) -> None:
    _atomic_write(path, embeddings_csv(samples, width))


def export_report(report: DistanceReport, path) -> None:
    _atomic_write(path, report.to_text())


def export_curves(episodes, path) -> None:
    """Per-episode training log (``learners.EpisodeLog`` rows) as CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for ep in episodes:
        writer.writerow([getattr(ep, name) for name in LOG_FIELDS])
    _atomic_write(path, buf.getvalue())


def analyze(checkpoint, out_dir, scenarios=(3, 4, 5), samples: int = 300, seed: int = 0,
            metric: str = "euclidean", labeler: str = "teammates") -> DistanceReport:
    """Collect, measure and write ``embeddings.csv`` plus ``report.txt``."""
    collected = collect_embeddings(checkpoint, scenarios, samples, seed, labeler)
    report = distance_report(collected, metric)
    export_embeddings(collected, os.path.join(out_dir, "embeddings.csv"))
    export_report(report, os.path.join(out_dir, "report.txt"))
    return report
