import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inpcc.concepts import (
    ClusterModel,
    apply_cluster_map,
    candidate_pool,
    cluster,
    kmeans,
    load_vocabulary,
    read_cluster_map,
    sample_negatives,
)
from inpcc.errors import FormatError, ParameterError

from .conftest import make_vocab


def test_minimal_fixture_loads(fixture_path):
    vocab = load_vocabulary(fixture_path("vocab_min.jsonl"))
    assert len(vocab) == 2
    for e in vocab:
        assert abs(np.linalg.norm(e.classifier_embedding) - 1) <= 1e-12


def test_unnormalized_classifier_is_normalized(tmp_path):
    rec = {
        "id": 0, "action": "a", "object": "o", "name_text": "a o", "description_text": "d",
        "classifier_embedding": [3.0, 4.0], "description_embedding": [1.0], "split": "base",
    }
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    v = load_vocabulary(p)
    assert np.allclose(v[0].classifier_embedding, [0.6, 0.8], atol=1e-15)


def _write(tmp_path, records):
    p = tmp_path / "v.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in records))
    return p


def _rec(i, desc_len=2, **over):
    r = {
        "id": i, "action": f"a{i}", "object": "o", "name_text": "n", "description_text": "d",
        "classifier_embedding": [1.0, 0.0], "description_embedding": [0.5] * desc_len, "split": "base",
    }
    r.update(over)
    return r


def test_desc_dim_mismatch_names_id(tmp_path):
    with pytest.raises(FormatError, match="entry 7"):
        load_vocabulary(_write(tmp_path, [_rec(0), _rec(7, desc_len=3)]))


def test_duplicate_id_and_missing_field(tmp_path):
    with pytest.raises(FormatError, match="duplicate category id 0"):
        load_vocabulary(_write(tmp_path, [_rec(0), _rec(0, action="b")]))
    bad = _rec(4)
    del bad["split"]
    with pytest.raises(FormatError, match="4.*split"):
        load_vocabulary(_write(tmp_path, [bad]))


def test_partial_cluster_ids_rejected(tmp_path):
    with pytest.raises(FormatError):
        load_vocabulary(_write(tmp_path, [_rec(0, cluster_id=0), _rec(1)]))


def test_hundred_category_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    recs = []
    for i in range(100):
        t = rng.normal(size=8)
        recs.append(_rec(i, classifier_embedding=list(t / np.linalg.norm(t)),
                         description_embedding=list(rng.normal(size=12)),
                         split="novel" if i % 7 == 0 else "base"))
    v1 = load_vocabulary(_write(tmp_path, recs))
    out1 = tmp_path / "a.jsonl"
    v1.save(out1)
    v2 = load_vocabulary(out1)
    out2 = tmp_path / "b.jsonl"
    v2.save(out2)
    assert out1.read_bytes() == out2.read_bytes()
    assert np.array_equal(v1.description_matrix(), v2.description_matrix())
    assert np.array_equal(v1.classifier_matrix(), v2.classifier_matrix())


# ---------------------------------------------------------------- clustering


def test_separated_points_cluster_apart():
    v = make_vocab([[0, 0], [0, 1], [10, 0], [10, 1]])
    cm = cluster(v, 2, seed=0)
    a = cm.assignments
    assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]
    assert [e.cluster_id for e in v] == [a[i] for i in range(4)]


def test_j_equals_size_gives_zero_inertia():
    rng = np.random.default_rng(1)
    v = make_vocab(rng.normal(size=(6, 3)))
    cm = cluster(v, 6, seed=3)
    assert cm.inertia == 0.0
    assert len(set(cm.assignments.values())) == 6


def test_j_too_large():
    with pytest.raises(ParameterError):
        cluster(make_vocab(np.eye(3)), 4, seed=0)


def test_inertia_monotone_on_fifty_points():
    pts = np.random.default_rng(2).normal(size=(50, 4))
    _, _, trace = kmeans(pts, 5, seed=11)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_fixpoint_and_determinism():
    pts = np.random.default_rng(3).normal(size=(120, 5))
    c1, l1, t1 = kmeans(pts, 7, seed=4)
    c2, l2, t2 = kmeans(pts, 7, seed=4)
    assert np.array_equal(c1, c2) and np.array_equal(l1, l2) and t1 == t2
    nearest = np.argmin(((pts[:, None, :] - c1[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(nearest, l1)


def test_swapping_descriptions_swaps_assignments():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0], [0.0, 0.2]])
    v1 = make_vocab(pts)
    swapped = pts.copy()
    swapped[[1, 2]] = swapped[[2, 1]]
    v2 = make_vocab(swapped)
    a1, a2 = cluster(v1, 2, 0).assignments, cluster(v2, 2, 0).assignments
    same = lambda a, i, j: a[i] == a[j]  # noqa: E731
    assert same(a1, 0, 1) == same(a2, 0, 2)
    assert same(a1, 2, 3) == same(a2, 1, 3)


def test_cluster_map_round_trip(tmp_path):
    v = make_vocab(np.random.default_rng(4).normal(size=(9, 3)))
    cm = cluster(v, 3, seed=0)
    path = tmp_path / "map.tsv"
    cm.write_map(path)
    mapping = read_cluster_map(path)
    assert mapping == cm.assignments
    re = apply_cluster_map(make_vocab(np.random.default_rng(4).normal(size=(9, 3))), mapping)
    assert re.assignments == cm.assignments
    assert re.inertia == pytest.approx(cm.inertia, rel=1e-12)


# ---------------------------------------------------------------- negative sampling


def two_clusters():
    # ids 1..5 -> c1..c5; A = {1, 2, 3}, B = {4, 5}; id 0 unused padding
    v = make_vocab(np.zeros((6, 1)))
    cm = ClusterModel(np.zeros((2, 1)), {0: 1, 1: 0, 2: 0, 3: 0, 4: 1, 5: 1}, 0.0)
    return v, cm


def test_hard_easy_examples():
    v, cm = two_clusters()
    hard = sample_negatives(v, cm, {1}, 2, "hard", 0, universe=[1, 2, 3, 4, 5])
    assert set(hard) == {2, 3}
    easy = sample_negatives(v, cm, {1}, 2, "easy", 0, universe=[1, 2, 3, 4, 5])
    assert set(easy) <= {4, 5} and len(easy) == 2
    exhausted = sample_negatives(v, cm, {1}, 5, "hard", 0, universe=[1, 2, 3, 4, 5])
    assert list(exhausted) == [2, 3] and exhausted.pool_size == 2


def test_empty_pool_is_flagged_not_raised():
    v, cm = two_clusters()
    out = sample_negatives(v, cm, {1, 4}, 3, "easy", 0, universe=[1, 2, 3, 4, 5])
    assert list(out) == [] and out.pool_empty


def test_sampler_argument_errors():
    v, cm = two_clusters()
    with pytest.raises(ParameterError):
        sample_negatives(v, cm, set(), 2, "hard", 0)
    with pytest.raises(ParameterError):
        sample_negatives(v, cm, {99}, 2, "hard", 0)
    with pytest.raises(ParameterError):
        sample_negatives(v, cm, {1}, 2, "medium", 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sets(st.integers(0, 19), min_size=1, max_size=5), st.integers(1, 12))
def test_sampler_properties(seed, positives, count):
    v = make_vocab(np.zeros((20, 1)))
    cm = ClusterModel(np.zeros((4, 1)), {i: i % 4 for i in range(20)}, 0.0)
    current = {cm.assignments[p] for p in positives}
    for strategy in ("hard", "easy", "random"):
        a = sample_negatives(v, cm, positives, count, strategy, seed)
        b = sample_negatives(v, cm, positives, count, strategy, seed)
        assert list(a) == list(b)
        assert not set(a) & positives
        assert len(set(a)) == len(a) <= count
        if strategy == "hard":
            assert all(cm.assignments[n] in current for n in a)
        if strategy == "easy":
            assert all(cm.assignments[n] not in current for n in a)
    hard = set(candidate_pool(cm, positives, "hard", v.ids))
    easy = set(candidate_pool(cm, positives, "easy", v.ids))
    assert not hard & easy
    assert hard | easy | positives == set(v.ids)
