"""
Verification Test
Embedding fusion, cosine scoring, ROC / TAR@FAR, k-fold accuracy, exhaustive pairing and error ranking
"""

import math
import os
import sys
import tempfile
from itertools import combinations

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from architectures import build_mnist2d
from errors import ContractViolation, DataError
from network import Network
from verification import (
    Embedding, ScoreSet, Template, angular_scatter, best_threshold, cosine_similarity, evaluate, exact_counts,
    exhaustive_pairs, extract_embedding, extract_embeddings, flip_max, fuse_template, kfold_accuracy,
    operating_point, rank_errors, roc_curve, score_pair_list, tar_at_far, write_errors, write_metrics, write_roc,
)


def _random_scores(n, seed):
    rng = np.random.default_rng(seed)
    genuine = rng.random(n) < 0.4
    scores = np.round(rng.normal(np.where(genuine, 0.5, 0.1), 0.25), 2)
    return ScoreSet(scores, genuine, [(f"a{i}", f"b{i}") for i in range(n)])


def test_flip_max():
    assert_array_equal(flip_max(np.array([1.0, -2.0]), np.array([0.0, 5.0])), [1.0, 5.0])


def test_symmetric_image_embedding():
    network = Network(build_mnist2d(), seed=4)
    half = np.random.default_rng(0).uniform(-1, 1, (1, 28, 14)).astype(np.float32)
    image = np.concatenate([half, half[..., ::-1]], axis=-1)
    embedding = extract_embedding(network, image, source="sym.png", identity="0")
    assert_allclose(embedding.vector, network.embed(image[None])[0], rtol=1e-5, atol=1e-5)
    assert embedding.source == "sym.png"


def test_batched_extraction_matches_single():
    network = Network(build_mnist2d(), seed=5)
    images = np.random.default_rng(1).uniform(-1, 1, (3, 1, 28, 28)).astype(np.float32)
    batched = extract_embeddings(network, images, batch_size=2)
    for row, image in zip(batched, images):
        assert_allclose(row, extract_embedding(network, image).vector, rtol=1e-5, atol=1e-5)


def test_template_fusion():
    single = Template("t1", [Embedding([1.0, 2.0])])
    assert_array_equal(fuse_template(single).vector, [1.0, 2.0])
    repeated = Template("t2", [Embedding([3.0, -1.0])] * 4)
    assert_allclose(fuse_template(repeated).vector, [3.0, -1.0])
    mixed = Template("t3", [Embedding([1.0, 0.0]), Embedding([0.0, 1.0])])
    assert_allclose(fuse_template(mixed).vector, [0.5, 0.5])
    try:
        fuse_template(Template("empty"))
    except ContractViolation:
        return
    raise AssertionError("empty template was accepted")


def test_cosine_similarity():
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert_allclose(cosine_similarity([2.0, 3.0], [2.0, 3.0]), 1.0)
    assert_allclose(cosine_similarity([1.0, 0.0], [1.0, 1.0]), 0.70710678, atol=1e-8)
    try:
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    except ContractViolation:
        return
    raise AssertionError("zero vector was accepted")


def test_roc_separated_and_symmetric():
    separated = roc_curve(ScoreSet([0.9, 0.8, 0.2, 0.1], [True, True, False, False]))
    assert any(f == 0.0 and t == 1.0 for f, t in zip(separated.far, separated.tar))
    assert separated.thresholds[0] == np.inf and separated.thresholds[-1] == -np.inf

    values = [0.1, 0.5, 0.9]
    same = roc_curve(ScoreSet(values + values, [True] * 3 + [False] * 3))
    assert_allclose(same.far, same.tar)


def test_roc_matches_brute_force_counts():
    scores = _random_scores(50, seed=2)
    curve = roc_curve(scores)
    genuine, impostor = scores.scores[scores.genuine], scores.scores[~scores.genuine]
    for far, tar, threshold in zip(curve.far, curve.tar, curve.thresholds):
        assert_allclose(far, np.mean(impostor >= threshold), atol=1e-12)
        assert_allclose(tar, np.mean(genuine >= threshold), atol=1e-12)
    assert np.all(np.diff(curve.far) >= 0) and np.all(np.diff(curve.tar) >= 0)


def _swept_tar(scores, target):
    """TAR by enumerating every threshold: the highest threshold at the largest FAR <= target."""
    if target >= 1.0:
        return 1.0
    genuine, impostor = scores.scores[scores.genuine], scores.scores[~scores.genuine]
    thresholds = np.append(np.unique(scores.scores), np.inf)
    far = np.array([np.mean(impostor >= t) for t in thresholds])
    reached = far[far <= target + 1e-12].max()
    candidates = thresholds[far == reached]
    threshold = candidates.min() if reached == 0.0 else candidates.max()
    return float(np.mean(genuine >= threshold))


def test_tar_at_far():
    separated = roc_curve(ScoreSet([0.9, 0.8, 0.2, 0.1], [True, True, False, False]))
    assert tar_at_far(separated, 1.0) == 1.0
    assert tar_at_far(separated, 0.0) == 1.0

    curve = roc_curve(ScoreSet([0.9, 0.8, 0.3, 0.4, 0.2, 0.1], [True] * 3 + [False] * 3))
    # FAR 1/3 is first reached at the 0.4 impostor, which leaves the 0.3 genuine pair out
    assert_allclose(tar_at_far(curve, 1 / 3), 2 / 3)
    assert_allclose(operating_point(curve, 1 / 3), (2 / 3, 0.4))
    assert_allclose(tar_at_far(curve, 0.0), 2 / 3)
    assert_allclose(tar_at_far(curve, 2 / 3), 1.0)
    assert tar_at_far(curve, 1.0) == 1.0


def test_tar_at_far_conservative_and_monotone():
    scores = _random_scores(60, seed=3)
    curve = roc_curve(scores)
    targets = np.linspace(0.0, 1.0, 101)
    values = [tar_at_far(curve, target) for target in targets]
    for target, value in zip(targets, values):
        assert_allclose(value, _swept_tar(scores, target), atol=1e-12)
        assert value <= curve.tar[curve.far <= target + 1e-12].max()
    assert np.all(np.diff(values) >= 0)


def test_best_threshold_ties_go_low():
    assert best_threshold([0.2, 0.5, 0.7], [False, True, True]) == 0.5
    assert best_threshold([0.3, 0.6], [True, False]) == 0.3


def test_kfold_separable():
    n = 40
    genuine = np.arange(n) % 2 == 0
    result = kfold_accuracy(ScoreSet(np.where(genuine, 0.9, 0.1), genuine), folds=10)
    assert result.k == 10
    assert result.mean == 1.0
    assert np.all((result.thresholds > 0.1) & (result.thresholds <= 0.9))


def test_kfold_random_labels_near_chance():
    rng = np.random.default_rng(2024)
    scores = ScoreSet(rng.random(10_000), rng.random(10_000) < 0.5)
    assert abs(kfold_accuracy(scores, folds=10).mean - 0.5) <= 0.02


def test_kfold_errors_and_custom_folds():
    scores = _random_scores(12, seed=4)
    try:
        kfold_accuracy(ScoreSet(scores.scores[:5], scores.genuine[:5]), folds=10)
    except ContractViolation:
        pass
    else:
        raise AssertionError("fewer pairs than folds was accepted")

    folds = [list(range(0, 12, 3)), list(range(1, 12, 3)), list(range(2, 12, 3))]
    result = kfold_accuracy(scores, fold_indices=folds)
    assert result.k == 3
    assert_array_equal(result.test_indices[1], folds[1])
    try:
        kfold_accuracy(scores, fold_indices=[[0, 1], [1, 2]])
    except ContractViolation:
        return
    raise AssertionError("overlapping fold lists were accepted")


def test_exhaustive_pair_counts():
    rng = np.random.default_rng(5)
    embeddings = rng.standard_normal((5, 4))
    scores = exhaustive_pairs(embeddings, ["A", "A", "A", "B", "B"], block_size=2)
    assert (scores.genuine_count, scores.impostor_count) == (4, 6)
    assert sorted(scores.pairs) == list(combinations(range(5), 2))
    for score, (i, j) in zip(scores.scores, scores.pairs):
        assert_allclose(score, cosine_similarity(embeddings[i], embeddings[j]), atol=1e-12)

    distinct = exhaustive_pairs(rng.standard_normal((6, 3)), list("abcdef"))
    assert (distinct.genuine_count, distinct.impostor_count) == (0, 15)
    twins = exhaustive_pairs(rng.standard_normal((2, 3)), ["x", "x"])
    assert (twins.genuine_count, twins.impostor_count) == (1, 0)


def test_exact_counts_at_histogram_thresholds():
    rng = np.random.default_rng(8)
    embeddings = rng.standard_normal((30, 6))
    identities = rng.integers(0, 4, 30)
    scores = exhaustive_pairs(embeddings, identities, block_size=8)
    thresholds = [np.inf, 0.5, 0.1, scores.scores[3], -np.inf]
    counts = exact_counts(embeddings, identities, thresholds, block_size=8, workers=3)
    for k, threshold in enumerate(thresholds):
        accepted = scores.scores >= threshold
        assert counts.genuine[k] == int((accepted & scores.genuine).sum())
        assert counts.impostor[k] == int((accepted & ~scores.genuine).sum())
    assert (counts.genuine_total, counts.impostor_total) == (scores.genuine_count, scores.impostor_count)

    histogram = exhaustive_pairs(embeddings, identities, block_size=8, materialize=False)
    curve = histogram.roc_curve()
    for target in (0.0, 0.05, 0.3):
        threshold = operating_point(curve, target)[1]
        exact = exact_counts(embeddings, identities, [threshold], block_size=8)
        assert exact.far[0] <= target + 1e-12
        assert_allclose(exact.tar[0], np.mean(scores.scores[scores.genuine] >= threshold), atol=1e-12)


def test_exhaustive_threads_and_histogram_agree():
    rng = np.random.default_rng(6)
    embeddings = rng.standard_normal((40, 8))
    identities = rng.integers(0, 5, 40).astype(str)
    serial = exhaustive_pairs(embeddings, identities, block_size=7, workers=1)
    threaded = exhaustive_pairs(embeddings, identities, block_size=7, workers=4)
    assert_array_equal(serial.scores, threaded.scores)
    assert serial.pairs == threaded.pairs

    histogram = exhaustive_pairs(embeddings, identities, block_size=7, materialize=False, workers=3)
    assert histogram.genuine_count == serial.genuine_count
    assert histogram.impostor_count == serial.impostor_count
    curve = histogram.roc_curve()
    assert curve.far[0] == 0.0 and curve.far[-1] == 1.0 and curve.tar[-1] == 1.0


def test_rank_errors():
    separated = ScoreSet([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
    ranking = rank_errors(separated, 0.5)
    assert ranking.false_accepts == [] and ranking.false_rejects == [] and ranking.ratio == 0.0

    one = ScoreSet([0.9, 0.8, 0.7, 0.1], [True, True, False, False], ["g1", "g2", "imp", "i2"])
    ranking = rank_errors(one, 0.5)
    assert ranking.false_accepts == [(0.7, "imp")]
    assert ranking.ratio == float("inf")


def test_rank_errors_matches_brute_force():
    scores = _random_scores(20, seed=7)
    threshold = 0.3
    ranking = rank_errors(scores, threshold)
    fa = sorted(((s, p) for s, g, p in zip(scores.scores, scores.genuine, scores.pairs) if s >= threshold and not g),
                key=lambda item: -item[0])
    fr = sorted(((s, p) for s, g, p in zip(scores.scores, scores.genuine, scores.pairs) if s < threshold and g),
                key=lambda item: item[0])
    assert [s for s, _ in ranking.false_accepts] == [s for s, _ in fa]
    assert [s for s, _ in ranking.false_rejects] == [s for s, _ in fr]
    assert {p for _, p in ranking.false_accepts} == {p for _, p in fa}


def test_angular_scatter():
    rng = np.random.default_rng(8)
    tight = np.concatenate([
        np.column_stack([np.ones(20), 0.01 * rng.standard_normal(20)]),
        np.column_stack([0.01 * rng.standard_normal(20), np.ones(20)]),
    ])
    labels = np.repeat([0, 1], 20)
    summary = angular_scatter(tight, labels)
    assert abs(summary.between - math.pi / 2) < 0.05
    assert summary.within < 0.05
    assert summary.ratio > 20
    loose = angular_scatter(rng.standard_normal((40, 2)), labels)
    assert loose.ratio < summary.ratio
    try:
        angular_scatter(tight, np.zeros(40))
    except ContractViolation:
        return
    raise AssertionError("single class was accepted")


def _brute_force_threshold(scores, genuine):
    candidates = sorted(set(scores.tolist())) + [np.inf]
    accuracies = [np.mean((scores >= t) == genuine) for t in candidates]
    return candidates[int(np.argmax(accuracies))]


def test_metric_oracles_on_random_instances():
    for seed in range(200):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(10, 100))
        genuine = rng.random(n) < rng.uniform(0.2, 0.8)
        genuine[:2] = [True, False]
        scores = ScoreSet(np.round(rng.uniform(-1, 1, n), 1), genuine, list(range(n)))
        g, i = scores.scores[genuine], scores.scores[~genuine]

        curve = roc_curve(scores)
        for far, tar, threshold in zip(curve.far, curve.tar, curve.thresholds):
            assert abs(far - np.mean(i >= threshold)) <= 1e-9
            assert abs(tar - np.mean(g >= threshold)) <= 1e-9

        target = float(rng.uniform(0, 1))
        assert abs(tar_at_far(curve, target) - _swept_tar(scores, target)) <= 1e-9

        folds = kfold_accuracy(scores, folds=5)
        for k, test in enumerate(np.array_split(np.arange(n), 5)):
            lo, hi = test[0], test[-1] + 1
            train = np.r_[0:lo, hi:n]
            threshold = _brute_force_threshold(scores.scores[train], genuine[train])
            assert folds.thresholds[k] == threshold
            assert abs(folds.accuracies[k] - np.mean((scores.scores[lo:hi] >= threshold) == genuine[lo:hi])) <= 1e-9

        threshold = float(rng.choice(scores.scores))
        ranking = rank_errors(scores, threshold)
        assert sorted(p for _, p in ranking.false_accepts) == [k for k in range(n) if scores.scores[k] >= threshold and not genuine[k]]
        assert sorted(p for _, p in ranking.false_rejects) == [k for k in range(n) if scores.scores[k] < threshold and genuine[k]]
        fa_scores = [s for s, _ in ranking.false_accepts]
        assert fa_scores == sorted(fa_scores, reverse=True)

        m = int(rng.integers(2, 14))
        identities = rng.integers(0, 4, m)
        pairs = exhaustive_pairs(rng.standard_normal((m, 3)), identities, block_size=int(rng.integers(1, 6)))
        expected = sum(identities[a] == identities[b] for a, b in combinations(range(m), 2))
        assert pairs.genuine_count == expected
        assert len(pairs) == m * (m - 1) // 2


def test_pair_list_scoring_and_reports():
    rng = np.random.default_rng(9)
    paths = [f"id{i // 3}/{i}.jpg" for i in range(12)]
    embeddings = rng.standard_normal((12, 6))
    pairs = [(paths[i], paths[j], int(i // 3 == j // 3)) for i, j in combinations(range(12), 2)]
    scores = score_pair_list(embeddings, paths, pairs)
    assert len(scores) == 66 and scores.genuine_count == 12
    assert scores.pairs[0] == (paths[0], paths[1])

    try:
        score_pair_list(embeddings, paths, [(paths[0], "nobody.jpg", 0)])
    except DataError as e:
        assert "nobody.jpg" in str(e)
    else:
        raise AssertionError("unknown image in pair list was accepted")

    report = evaluate(scores, far_targets=(0.1, 0.01), folds=6)
    rows = dict(report.rows())
    assert rows["genuine_pairs"] == "12" and rows["folds"] == "6"
    assert "tar@far=0.1" in rows and "tar@far=0.01" in rows
    with tempfile.TemporaryDirectory() as tmp:
        write_metrics(os.path.join(tmp, "report.tsv"), report)
        write_roc(os.path.join(tmp, "roc.tsv"), report.curve)
        write_errors(os.path.join(tmp, "errors.tsv"), report.errors)
        with open(os.path.join(tmp, "roc.tsv"), encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "far\ttar\tthreshold"
        assert len(lines) == len(report.curve.far) + 1
        with open(os.path.join(tmp, "errors.tsv"), encoding="utf-8") as f:
            errors = f.read().splitlines()
        assert len(errors) == 1 + len(report.errors.false_accepts) + len(report.errors.false_rejects)


TESTS = [
    test_flip_max,
    test_symmetric_image_embedding,
    test_batched_extraction_matches_single,
    test_template_fusion,
    test_cosine_similarity,
    test_roc_separated_and_symmetric,
    test_roc_matches_brute_force_counts,
    test_tar_at_far,
    test_tar_at_far_conservative_and_monotone,
    test_best_threshold_ties_go_low,
    test_kfold_separable,
    test_kfold_random_labels_near_chance,
    test_kfold_errors_and_custom_folds,
    test_exhaustive_pair_counts,
    test_exhaustive_threads_and_histogram_agree,
    test_exact_counts_at_histogram_thresholds,
    test_rank_errors,
    test_rank_errors_matches_brute_force,
    test_angular_scatter,
    test_metric_oracles_on_random_instances,
    test_pair_list_scoring_and_reports,
]


def main():
    print("=" * 70)
    print("VERIFICATION TESTS")
    print("=" * 70)

    results = {}
    for test in TESTS:
        try:
            test()
            results[test.__name__] = True
        except Exception as e:
            print(f"✗ {test.__name__}: {type(e).__name__}: {e}")
            results[test.__name__] = False

    print("\n" + "=" * 70)
    print("TEST SUMMARY")
    print("=" * 70)
    for name, passed in results.items():
        print(f"{name}: {'✓ PASSED' if passed else '✗ FAILED'}")

    all_passed = all(results.values())
    print("\n" + ("✓ ALL VERIFICATION TESTS PASSED" if all_passed else "✗ SOME TESTS FAILED"))
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
