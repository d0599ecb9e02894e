import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dymacl import analysis as A
from dymacl import dyan
from dymacl.errors import AnalysisError, CheckpointError
from dymacl.learners import EpisodeLog


def sample(vec, label, scenario="3v3"):
    return A.SemanticSample(np.asarray(vec, dtype=float), label, scenario)


def test_constructed_geometry():
    samples = [sample([0.0, 0.0], 0)] * 3 + [sample([1.0, 0.0], 1)] * 3
    r = A.distance_report(samples)
    assert (r.intra, r.inter, r.ratio) == (0.0, 1.0, 0.0)
    assert r.counts == {0: 3, 1: 3}
    assert r.intra_pairs == 6 and r.inter_pairs == 9


def test_identical_samples_degenerate():
    samples = [sample([0.5, 0.5], k % 2) for k in range(6)]
    r = A.distance_report(samples)
    assert r.intra == r.inter == r.ratio == 0.0
    assert r.degenerate


def test_insufficient_classes():
    with pytest.raises(AnalysisError):
        A.distance_report([sample([0.0], 0), sample([1.0], 0), sample([2.0], 1)])
    with pytest.raises(AnalysisError):
        A.distance_report([])


def test_label_independent_ratio_near_one():
    """Monte-Carlo oracle: labels carry no information, so E[intra] = E[inter]."""
    rng = np.random.default_rng(0)
    samples = [sample(rng.normal(size=16), int(rng.integers(0, 4))) for _ in range(150)]
    r = A.distance_report(samples)
    assert r.intra_pairs + r.inter_pairs >= 10_000
    assert abs(r.ratio - 1.0) < 0.1


def test_cosine_metric():
    samples = [sample([1.0, 0.0], 0), sample([2.0, 0.0], 0),
               sample([0.0, 1.0], 1), sample([0.0, 3.0], 1)]
    r = A.distance_report(samples, "cosine")
    assert r.intra == pytest.approx(0.0, abs=1e-15)
    assert r.inter == pytest.approx(1.0)


def test_cosine_zero_vectors():
    samples = [sample([0.0, 0.0], 0), sample([0.0, 0.0], 0),
               sample([1.0, 0.0], 1), sample([1.0, 0.0], 1)]
    r = A.distance_report(samples, "cosine")
    assert r.intra == 0.0 and r.inter == 1.0


def test_unknown_metric():
    with pytest.raises(AnalysisError):
        A.distance_report([sample([0.0], 0)] * 2 + [sample([1.0], 1)] * 2, "manhattan")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), data=st.data())
def test_order_and_scenario_invariance(seed, data):
    rng = np.random.default_rng(seed)
    samples = [sample(rng.normal(size=4), k % 3, f"{3 + k % 2}v") for k in range(12)]
    perm = data.draw(st.permutations(range(12)))
    shuffled = [A.SemanticSample(samples[i].embedding, samples[i].semantic_label, "x")
                for i in perm]
    a, b = A.distance_report(samples), A.distance_report(shuffled)
    assert a.intra == pytest.approx(b.intra, rel=1e-12)
    assert a.inter == pytest.approx(b.inter, rel=1e-12)
    assert a.counts == b.counts


# ---------------------------------------------------------------- collection

def test_collect_scenarios_and_determinism():
    spec = dyan.DyanSpec()
    params = dyan.build(spec, 0)
    a = A.collect_embeddings((params, spec), (3, 4, 5), 40, seed=1)
    b = A.collect_embeddings((params, spec), (3, 4, 5), 40, seed=1)
    assert {s.scenario_label for s in a} == {"3v3", "4v4", "5v5"}
    assert len(a) == 120
    assert all(s.embedding.shape == (16,) for s in a)
    assert all(np.array_equal(x.embedding, y.embedding) and x.semantic_label == y.semantic_label
               for x, y in zip(a, b))
    for s in a:
        n = int(s.scenario_label.split("v")[0])
        assert 0 <= s.semantic_label <= n - 1


def test_collect_single_agent_labels_zero():
    spec = dyan.DyanSpec()
    out = A.collect_embeddings((dyan.build(spec, 0), spec), (1,), 25, seed=0)
    assert len(out) == 25 and {s.semantic_label for s in out} == {0}


def test_collect_zero_samples():
    spec = dyan.DyanSpec()
    assert A.collect_embeddings((dyan.build(spec, 0), spec), (3, 4, 5), 0) == []


def test_collect_bad_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        A.collect_embeddings(path, (3,), 5)


def test_collect_from_checkpoint_file(tmp_path):
    spec = dyan.DyanSpec()
    params = dyan.build(spec, 2)
    dyan.save(params, spec, tmp_path / "m.ckpt")
    a = A.collect_embeddings(tmp_path / "m.ckpt", (3,), 10, seed=4)
    b = A.collect_embeddings((params, spec), (3,), 10, seed=4)
    assert all(np.array_equal(x.embedding, y.embedding) for x, y in zip(a, b))


# ---------------------------------------------------------------- export

def test_export_shape(tmp_path):
    rng = np.random.default_rng(0)
    samples = [sample(rng.normal(size=16), k % 3) for k in range(10)]
    A.export_embeddings(samples, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert len(rows) == 11
    assert all(len(r) == 18 for r in rows)
    assert rows[0][:3] == ["label", "scenario", "v0"]
    np.testing.assert_array_equal([float(v) for v in rows[1][2:]], samples[0].embedding)


def test_export_empty_header_only(tmp_path):
    A.export_embeddings([], tmp_path / "e.csv", width=16)
    text = (tmp_path / "e.csv").read_text()
    assert text.count("\n") == 1 and text.startswith("label,scenario,v0")


def test_export_byte_identical(tmp_path):
    samples = [sample([0.1, 1 / 3], 0), sample([2.5, -1e-9], 1)]
    A.export_embeddings(samples, tmp_path / "a.csv")
    A.export_embeddings(samples, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    r = A.distance_report(samples * 2)
    A.export_report(r, tmp_path / "a.txt")
    A.export_report(r, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert "ratio:" in (tmp_path / "a.txt").read_text()


def test_export_curves(tmp_path):
    logs = [EpisodeLog(0, 10, 1.0, float("nan"), -0.5, "B_wins", 0, 0),
            EpisodeLog(1, 12, 0.9, 0.25, 4.5, "A_wins", 1, 1)]
    A.export_curves(logs, tmp_path / "c.csv")
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert [r["outcome"] for r in rows] == ["B_wins", "A_wins"]


def test_analyze_writes_files(tmp_path):
    spec = dyan.DyanSpec()
    r = A.analyze((dyan.build(spec, 0), spec), tmp_path / "out", (3, 4, 5), 60, seed=0)
    assert (tmp_path / "out" / "embeddings.csv").exists()
    assert (tmp_path / "out" / "report.txt").exists()
    assert r.ratio >= 0
