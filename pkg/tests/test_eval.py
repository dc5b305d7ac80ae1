import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inpcc.concepts import load_vocabulary
from inpcc.errors import FormatError, ParameterError
from inpcc.evaluation import (
    GroundTruthBox,
    Prediction,
    average_precision,
    evaluate_predictions,
    iou,
    match_true_positives,
    read_predictions,
    selection_similarity_matrix,
    write_predictions,
)
from inpcc.harness.data import load_dataset
from inpcc.harness.pipeline import ground_truth

from .conftest import make_vocab
from .oracles import envelope_ap

H, O = (0.1, 0.1, 0.4, 0.4), (0.6, 0.6, 0.9, 0.9)


def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    with pytest.raises(ParameterError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))
    with pytest.raises(ParameterError):
        iou((0, 0, 1, 1), (1, 1, 0.5, 2))


def test_true_positive_rules():
    gt = [GroundTruthBox("a", 3, H, O)]
    assert match_true_positives([Prediction("a", 3, 0.9, H, O)], gt) == [True]
    assert match_true_positives([Prediction("a", 4, 0.9, H, O)], gt) == [False]
    two = [Prediction("a", 3, 0.5, H, O), Prediction("a", 3, 0.9, H, O)]
    assert match_true_positives(two, gt) == [False, True]
    # both boxes must clear the threshold
    shifted = (0.6, 0.6, 0.9, 0.9)
    assert match_true_positives([Prediction("a", 3, 0.9, H, (0.75, 0.75, 1.05, 1.05))], gt) == [False]
    assert match_true_positives([Prediction("a", 3, 0.9, shifted, O)], gt) == [False]


def test_average_precision_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False], 1) == 0.0
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert average_precision([True, False, True], 2) == pytest.approx(0.8333, abs=5e-5)
    assert average_precision([], 3) == 0.0
    with pytest.raises(ParameterError):
        average_precision([True], -1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 5))
def test_average_precision_matches_envelope_walk(labels, extra):
    total = sum(labels) + extra
    if total == 0:
        return
    assert average_precision(labels, total) == pytest.approx(envelope_ap(labels, total), abs=1e-12)


@pytest.mark.parametrize("g", [1, 2, 7, 50])
def test_all_true_positives_give_one(g):
    assert average_precision([True] * g, g) == 1.0


def test_similarity_examples():
    classes, sim, excluded = selection_similarity_matrix(
        {0: [[0, 2], [0, 2]], 1: [[0, 2]], 2: [[1]], 3: []}, 3
    )
    assert classes == [0, 1, 2] and excluded == [3]
    assert sim[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert sim[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert sim[0, 2] == 0.0


# ---------------------------------------------------------------- evaluate


def _world(seed=0, images=6, cats=3):
    rng = np.random.default_rng(seed)
    vocab = make_vocab(np.eye(cats), splits=["base"] * (cats - 1) + ["novel"])
    gts, preds = [], []
    for i in range(images):
        for _ in range(int(rng.integers(1, 3))):
            x, y = rng.uniform(0, 0.5, 2)
            h = (x, y, x + 0.3, y + 0.3)
            o = (x + 0.2, y + 0.1, x + 0.45, y + 0.4)
            c = int(rng.integers(cats))
            gts.append(GroundTruthBox(f"im{i}", c, h, o))
            jitter = rng.normal(0, 0.04, 4)
            preds.append(Prediction(f"im{i}", c, float(rng.uniform()), tuple(np.add(h, jitter)), o))
            preds.append(Prediction(f"im{i}", int(rng.integers(cats)), float(rng.uniform()), h, tuple(np.add(o, jitter))))
    return vocab, gts, preds


def test_perfect_and_empty_detectors():
    vocab, gts, _ = _world()
    perfect = [Prediction(g.image_id, g.category_id, 1.0, g.human_box, g.object_box) for g in gts]
    assert evaluate_predictions(perfect, gts, vocab).split_map["full"] == 1.0
    report = evaluate_predictions([], gts, vocab)
    assert report.split_map["full"] == 0.0
    assert set(report.per_category_ap) == {g.category_id for g in gts}


def test_split_means_and_zero_gt_exclusion():
    vocab, gts, preds = _world(1)
    gts = [g for g in gts if g.category_id != 1]
    report = evaluate_predictions(preds, gts, vocab)
    assert 1 not in report.per_category_ap
    base = [report.per_category_ap[c] for c in report.per_category_ap if vocab[c].split == "base"]
    assert report.split_map["base"] == pytest.approx(float(np.mean(base)), abs=1e-15)
    assert report.split_map["full"] == pytest.approx(float(np.mean(list(report.per_category_ap.values()))), abs=1e-15)


def test_unknown_category_is_a_format_error():
    vocab, gts, preds = _world()
    with pytest.raises(FormatError):
        evaluate_predictions(preds + [Prediction("im0", 99, 0.5, H, O)], gts, vocab)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_depends_only_on_score_order(seed):
    vocab, gts, preds = _world(seed)
    squared = [Prediction(p.image_id, p.category_id, p.score**2, p.human_box, p.object_box) for p in preds]
    a = evaluate_predictions(preds, gts, vocab).format()
    b = evaluate_predictions(squared, gts, vocab).format()
    assert a == b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_duplicates_never_raise_ap(seed):
    vocab, gts, preds = _world(seed)
    base = evaluate_predictions(preds, gts, vocab).per_category_ap
    dup = evaluate_predictions(preds + list(preds), gts, vocab).per_category_ap
    assert all(dup[c] <= base[c] + 1e-15 for c in base)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_input_order_is_irrelevant(seed, rnd):
    vocab, gts, preds = _world(seed)
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    assert evaluate_predictions(preds, gts, vocab).format() == evaluate_predictions(shuffled, gts, vocab).format()


# ---------------------------------------------------------------- fixture


def test_hand_built_fixture(fixture_path):
    vocab = load_vocabulary(fixture_path("vocab_min.jsonl"))
    ds = load_dataset(fixture_path("eval_dataset.jsonl"), vocab)
    preds = read_predictions(fixture_path("eval_predictions.tsv"))
    assert len(preds) == 4
    report = evaluate_predictions(preds, ground_truth(ds), vocab)
    # category 0 ranks [TP, FP (duplicate), TP] against 2 GT; category 1 is a single exact hit
    assert report.per_category_ap[0] == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-15)
    assert report.per_category_ap[1] == 1.0
    with open(fixture_path("eval_report.golden.txt"), encoding="utf-8") as fh:
        assert report.format() == fh.read()


def test_prediction_file_round_trip(tmp_path, fixture_path):
    preds = read_predictions(fixture_path("eval_predictions.tsv"))
    out = tmp_path / "p.tsv"
    write_predictions(preds, out)
    assert read_predictions(out) == preds
    bad = tmp_path / "bad.tsv"
    bad.write_text("img\t0\t0.5\t0,0,1,1\n")
    with pytest.raises(FormatError):
        read_predictions(bad)
