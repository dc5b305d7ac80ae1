"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line PASS/FAIL verdict that the terminal summary
prints under "acceptance criteria".
"""

import contextlib
import os
import time

import numpy as np
import pytest

from inpcc import numeric as nm
from inpcc.concepts import ClusterModel, kmeans, sample_negatives
from inpcc.harness import cli
from inpcc.harness.experiments import run_ablation, run_toy
from inpcc.net import HOIDetector, inference_score
from inpcc.prompts import PromptBank, select_and_compose
from inpcc.train import GroundTruthInteraction, hungarian_match, match_batch, total_loss

from . import test_numeric
from .conftest import ACCEPTANCE_LINES, make_vocab
from .oracles import brute_force_assignment, straight_line_compose

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
FIXTURES = os.path.join(ROOT, "tests", "fixtures")


@contextlib.contextmanager
def criterion(n, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE_LINES[n] = f"criterion {n:>2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
        raise
    ACCEPTANCE_LINES[n] = f"criterion {n:>2} PASS  {title}" + (f" ({detail['info']})" if detail else "")


def test_c01_gradient_suite():
    with criterion(1, "finite-difference gradient suite") as d:
        start = time.perf_counter()
        worst = 0.0
        cases = test_numeric.op_cases()
        cases.pop("_weights")
        for name, (fn, params) in cases.items():
            proj = np.random.default_rng(7).normal(size=fn().shape)
            res = nm.gradient_check(lambda: nm.sum_(nm.mul(fn(), proj)), params, h=1e-5, floor=1e-8)
            assert res.max_rel_err <= 1e-4, (name, res)
            worst = max(worst, res.max_rel_err)
        # the full weighted loss through a whole prompt-free model
        from .test_net import small_cfg, unit_rows

        rng = np.random.default_rng(0)
        model = HOIDetector(small_cfg(M=0, N=4), rng)
        tokens, text, ids = rng.normal(size=(2, 9, 5)), unit_rows(rng, 6, 4), list(range(6))
        gts = [[GroundTruthInteraction((0.3, 0.3, 0.2, 0.2), (0.6, 0.6, 0.2, 0.3), 0)],
               [GroundTruthInteraction((0.5, 0.4, 0.3, 0.2), (0.2, 0.7, 0.2, 0.2), 4)]]
        w = (2.5, 1.0, 1.5)
        matches = match_batch(model(tokens, (3, 3), text, ids), gts, ids, w)
        res = nm.gradient_check(
            lambda: total_loss(model(tokens, (3, 3), text, ids), matches, gts, ids, w).total,
            model.parameters(), h=1e-5, floor=1e-6, max_coords=3, rng=np.random.default_rng(1),
        )
        assert res.max_rel_err <= 1e-4, res
        worst = max(worst, res.max_rel_err)
        elapsed = time.perf_counter() - start
        assert elapsed <= 5.0, f"{elapsed:.2f}s"
        d["info"] = f"max rel err {worst:.1e}, {elapsed:.2f}s"


def test_c02_matcher_oracle():
    with criterion(2, "matcher equals brute force up to 6x6") as d:
        rng = np.random.default_rng(2)
        mats = [rng.integers(0, 10, size=tuple(rng.integers(1, 7, size=2))).astype(float) for _ in range(100)]
        mats[:2] = [rng.integers(0, 10, size=(6, 6)).astype(float) for _ in range(2)]
        start = time.perf_counter()
        results = [hungarian_match(m) for m in mats]
        elapsed = time.perf_counter() - start
        for m, r in zip(mats, results):
            best, pairs = brute_force_assignment(m)
            assert sum(m[i, j] for i, j in r.pairs) == best
            assert sorted(r.pairs, key=lambda p: (p[1], p[0])) == pairs
        assert elapsed <= 1.0, f"{elapsed:.2f}s"
        d["info"] = f"{elapsed:.2f}s"


def test_c03_prompt_composition_oracle():
    with criterion(3, "prompt selection and composition oracle") as d:
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            L, D, M = (int(x) for x in rng.integers(1, 7, size=3))
            k = int(rng.integers(1, M + 1))
            bank = PromptBank(L, D, M, k, rng)
            f = rng.normal(size=D)
            sel = select_and_compose(bank, f)
            idx, weights, composed = straight_line_compose(bank, f)
            assert sel.chosen_indices == idx
            worst = max(worst, np.max(np.abs(np.array(sel.weights) - weights)),
                        np.max(np.abs(sel.composed.data - composed)))
        assert worst <= 1e-12
        d["info"] = f"max abs diff {worst:.1e}"


def test_c04_clustering():
    with criterion(4, "k-means monotone, fixpoint, deterministic") as d:
        pts = np.random.default_rng(4).normal(size=(500, 16))
        start = time.perf_counter()
        c1, l1, t1 = kmeans(pts, 8, seed=9)
        c2, l2, t2 = kmeans(pts, 8, seed=9)
        elapsed = time.perf_counter() - start
        assert all(b <= a for a, b in zip(t1, t1[1:]))
        assert np.array_equal(np.argmin(((pts[:, None] - c1[None]) ** 2).sum(-1), axis=1), l1)
        assert np.array_equal(c1, c2) and np.array_equal(l1, l2) and t1 == t2
        assert elapsed <= 2.0, f"{elapsed:.2f}s"
        d["info"] = f"{len(t1)} iterations, {elapsed:.2f}s"


def test_c05_negative_sampling():
    with criterion(5, "negative-sampling semantics over 1000 draws") as d:
        vocab = make_vocab(np.zeros((40, 1)))
        clusters = ClusterModel(np.zeros((6, 1)), {i: (i * 7) % 6 for i in range(40)}, 0.0)
        rng = np.random.default_rng(5)
        start = time.perf_counter()
        for draw in range(1000):
            positives = set(rng.choice(40, size=int(rng.integers(1, 6)), replace=False).tolist())
            strategy = ("hard", "easy", "random")[draw % 3]
            negs = sample_negatives(vocab, clusters, positives, int(rng.integers(1, 12)), strategy, draw)
            current = {clusters.assignments[p] for p in positives}
            assert not set(negs) & positives
            if strategy == "hard":
                assert all(clusters.assignments[n] in current for n in negs)
            if strategy == "easy":
                assert all(clusters.assignments[n] not in current for n in negs)
        elapsed = time.perf_counter() - start
        assert elapsed <= 1.0, f"{elapsed:.2f}s"
        d["info"] = f"{elapsed:.2f}s"


def test_c06_golden_report(tmp_path):
    with criterion(6, "hand-built mAP fixture reproduces golden report"):
        out = tmp_path / "report.txt"
        code = cli.main([
            "eval", "--predictions", os.path.join(FIXTURES, "eval_predictions.tsv"),
            "--set", f"paths.vocab={os.path.join(FIXTURES, 'vocab_min.jsonl')}",
            "--set", f"paths.dataset={os.path.join(FIXTURES, 'eval_dataset.jsonl')}",
            "--out", str(out),
        ])
        assert code == 0
        golden = open(os.path.join(FIXTURES, "eval_report.golden.txt"), "rb").read()
        assert out.read_bytes() == golden
        assert b"0\tbase\t2\t0.833333" in golden and b"1\tnovel\t1\t1.000000" in golden


@pytest.mark.slow
def test_c07_toy_training():
    with criterion(7, "toy training reaches base >= 0.90, novel >= 0.50 in < 5 min") as d:
        run = run_toy(os.path.join(CONFIGS, "toy.cfg"), os.path.join(CONFIGS, "toy_scene.txt"))
        d["info"] = f"base {run.split_map['base']:.3f}, novel {run.split_map['novel']:.3f}, {run.seconds:.0f}s"
        assert run.split_map["base"] >= 0.90, d["info"]
        assert run.split_map["novel"] >= 0.50, d["info"]
        assert run.seconds < 300, d["info"]


def _wins(a, b):
    return sum(x > y for x, y in zip(a, b))


@pytest.mark.slow
def test_c08_ablation_direction():
    with criterion(8, "hard > random negatives and prompts > common-only, >= 3 of 4 seeds") as d:
        cfg, scene = os.path.join(CONFIGS, "ablation.cfg"), os.path.join(CONFIGS, "ablation_scene.txt")
        neg = run_ablation(cfg, scene, "negatives", range(4))
        prm = run_ablation(cfg, scene, "prompts", range(4))
        d["info"] = (f"hard wins {_wins(neg['hard'], neg['random'])}/4, "
                     f"prompts win {_wins(prm['inp'], prm['common_only'])}/4")
        d["info"] += f"; per-seed full mAP {neg} {prm}"
        assert _wins(neg["hard"], neg["random"]) >= 3, (d["info"], neg)
        assert _wins(prm["inp"], prm["common_only"]) >= 3, (d["info"], prm)


def test_c09_inference_score():
    with criterion(9, "inference score exact"):
        rng = np.random.default_rng(9)
        s = rng.uniform(size=100)
        assert np.array_equal(inference_score(s, rng.uniform(size=100), 0), s)
        assert abs(inference_score(0.8, 0.5, 1) - 0.4) <= 1e-15
        assert abs(inference_score(0.8, 0.5, 2) - 0.2) <= 1e-15
        assert inference_score(0.8, 0.3, 0) == 0.8


def test_c10_train_determinism(tmp_path):
    with criterion(10, "train twice gives identical metrics and checkpoints"):
        data = tmp_path / "data"
        assert cli.main(["synth", "--spec", os.path.join(FIXTURES, "tiny_scene.txt"), "--out", str(data)]) == 0
        for run in ("a", "b"):
            code = cli.main([
                "train", "--config", os.path.join(FIXTURES, "tiny_train.cfg"),
                "--set", f"paths.vocab={data / 'vocab.jsonl'}", "--set", f"paths.dataset={data / 'dataset.jsonl'}",
                "--set", "train.steps=5", "--set", f"paths.out_dir={tmp_path / run}",
            ])
            assert code == 0
        for f in ("metrics.tsv", "model.ckpt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert len((tmp_path / "a" / "metrics.tsv").read_text().splitlines()) == 5
