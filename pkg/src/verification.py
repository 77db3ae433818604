"""
Embedding extraction and fusion plus every verification protocol: cosine scoring,
ROC and TAR@FAR, k-fold accuracy, exhaustive pairing, and error ranking.

Decision rule everywhere: a pair is accepted when score >= threshold.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Optional

import numpy as np
from sklearn import metrics
from sklearn.model_selection import KFold

from checkpoint import atomic_write_text
from errors import ContractViolation, DataError

FAR_TOLERANCE = 1e-12
HISTOGRAM_BINS = 10_000
DEFAULT_FAR_TARGETS = (0.01, 0.001)


# ---------------------------------------------------------------------------
# Embeddings and templates
# ---------------------------------------------------------------------------

@dataclass
class Embedding:
    vector: np.ndarray
    source: str = ""
    identity: Optional[str] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.vector).all():
            raise ContractViolation(f"embedding {self.source or '<unnamed>'} has non-finite entries")


@dataclass
class Template:
    template_id: str
    members: List[Embedding] = field(default_factory=list)


def flip_max(original, flipped):
    return np.maximum(original, flipped)


def extract_embedding(model, image, feature_point="post_fn", source="", identity=None):
    """
    Element-wise max of the features of an image [C, H, W] and its mirror.
    ``model`` is a Network; it is switched to eval mode.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractViolation(f"extract_embedding expects one image [C, H, W], got shape {image.shape}")
    pair = np.stack([image, image[..., ::-1]])
    features = model.embed(pair, feature_point=feature_point)
    return Embedding(flip_max(features[0], features[1]), source, identity)


def extract_embeddings(model, images, feature_point="post_fn", batch_size=64):
    """Batched flip-max features for a stack [N, C, H, W]."""
    images = np.asarray(images)
    original = model.embed(images, feature_point, batch_size)
    flipped = model.embed(np.ascontiguousarray(images[..., ::-1]), feature_point, batch_size)
    return flip_max(original, flipped)


def fuse_template(template):
    if not template.members:
        raise ContractViolation(f"template '{template.template_id}' has no members")
    stacked = np.stack([member.vector for member in template.members])
    return Embedding(stacked.mean(axis=0), template.template_id, template.template_id)


def _vector(value):
    return value.vector if isinstance(value, Embedding) else np.asarray(value, dtype=np.float64).reshape(-1)


def cosine_similarity(a, b):
    a, b = _vector(a), _vector(b)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ContractViolation("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def unit_rows(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise ContractViolation(f"embedding row {int(zero[0])} is a zero vector")
    return matrix / norms


# ---------------------------------------------------------------------------
# Score sets and ROC
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    scores: np.ndarray
    genuine: np.ndarray
    pairs: Optional[list] = None    # provenance per score, e.g. (path_a, path_b)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.genuine = np.asarray(self.genuine, dtype=bool).reshape(-1)
        if self.scores.shape != self.genuine.shape:
            raise ContractViolation(f"{len(self.scores)} scores but {len(self.genuine)} labels")
        if not np.isfinite(self.scores).all():
            raise ContractViolation("scores must be finite")
        if self.pairs is not None and len(self.pairs) != len(self.scores):
            raise ContractViolation(f"{len(self.pairs)} pair records for {len(self.scores)} scores")

    def __len__(self):
        return len(self.scores)

    @property
    def genuine_count(self):
        return int(self.genuine.sum())

    @property
    def impostor_count(self):
        return int((~self.genuine).sum())

    def require_both_classes(self):
        if self.genuine_count == 0 or self.impostor_count == 0:
            raise ContractViolation(
                f"rate metrics need genuine and impostor scores, got {self.genuine_count} genuine "
                f"and {self.impostor_count} impostor"
            )


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray

    def lines(self):
        out = ["far\ttar\tthreshold"]
        out += [f"{f:.10g}\t{t:.10g}\t{th:.10g}" for f, t, th in zip(self.far, self.tar, self.thresholds)]
        return out


def roc_curve(scores):
    """Operating point at every distinct score, plus +inf (0, 0) and -inf (1, 1) sentinels."""
    scores.require_both_classes()
    far, tar, thresholds = metrics.roc_curve(scores.genuine, scores.scores, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = np.inf
    return RocCurve(
        far=np.append(far, 1.0),
        tar=np.append(tar, 1.0),
        thresholds=np.append(thresholds, -np.inf),
    )


def operating_point(curve, far_target):
    """
    (tar, threshold) at the largest achievable FAR not above ``far_target``, with
    no interpolation between points. The threshold is the impostor score at which
    the downward sweep first reaches that FAR. At FAR 0 it is the lowest threshold
    that still accepts no impostor; a target of 1 is the accept-all threshold.
    """
    if not 0.0 <= far_target <= 1.0:
        raise ContractViolation(f"FAR target must lie in [0, 1], got {far_target}")
    if far_target >= 1.0:
        return 1.0, -np.inf
    allowed = np.flatnonzero(curve.far <= far_target + FAR_TOLERANCE)
    reached = curve.far[allowed].max()
    at_reached = allowed[curve.far[allowed] == reached]
    # points run from the highest threshold down
    index = at_reached[-1] if reached == 0.0 else at_reached[0]
    return float(curve.tar[index]), float(curve.thresholds[index])


def tar_at_far(curve, far_target):
    return operating_point(curve, far_target)[0]


# ---------------------------------------------------------------------------
# k-fold accuracy
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    thresholds: np.ndarray
    accuracies: np.ndarray
    test_indices: List[np.ndarray] = field(default_factory=list)

    @property
    def k(self):
        return len(self.accuracies)

    @property
    def mean(self):
        return float(self.accuracies.mean())

    @property
    def std(self):
        return float(self.accuracies.std())

    @property
    def mean_threshold(self):
        return float(self.thresholds.mean())


def accuracy_at(scores, genuine, threshold):
    return float(((scores >= threshold) == genuine).mean())


def best_threshold(scores, genuine):
    """
    Threshold maximizing accuracy on the given (training) scores. Candidates are the
    distinct scores plus +inf; ties go to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    genuine = np.asarray(genuine, dtype=bool)
    candidates = np.append(np.unique(scores), np.inf)
    genuine_sorted = np.sort(scores[genuine])
    impostor_sorted = np.sort(scores[~genuine])
    # genuine accepted: score >= t ; impostor rejected: score < t
    accepted = len(genuine_sorted) - np.searchsorted(genuine_sorted, candidates, side="left")
    rejected = np.searchsorted(impostor_sorted, candidates, side="left")
    correct = accepted + rejected
    return float(candidates[int(np.argmax(correct))])


def _check_folds(folds, n):
    seen = np.concatenate([np.asarray(f, dtype=np.int64) for f in folds]) if folds else np.zeros(0, dtype=np.int64)
    if len(seen) != n or not np.array_equal(np.sort(seen), np.arange(n)):
        raise ContractViolation(f"fold lists must cover each of the {n} pairs exactly once")


def kfold_accuracy(scores, folds=10, fold_indices=None):
    """
    Per fold: pick the threshold on the other folds, score the held-out fold.
    ``fold_indices`` overrides the contiguous partition.
    """
    n = len(scores)
    if fold_indices is not None:
        folds = len(fold_indices)
        _check_folds(fold_indices, n)
        splits = []
        for held_out, test in enumerate(fold_indices):
            train = np.concatenate([np.asarray(f, dtype=np.int64) for i, f in enumerate(fold_indices) if i != held_out])
            splits.append((train, np.asarray(test, dtype=np.int64)))
    else:
        if folds < 2:
            raise ContractViolation(f"k-fold accuracy needs at least 2 folds, got {folds}")
        if n < folds:
            raise ContractViolation(f"{n} pairs cannot be split into {folds} folds")
        splits = list(KFold(n_splits=folds, shuffle=False).split(np.arange(n)))

    thresholds, accuracies, tests = [], [], []
    for train, test in splits:
        threshold = best_threshold(scores.scores[train], scores.genuine[train])
        thresholds.append(threshold)
        accuracies.append(accuracy_at(scores.scores[test], scores.genuine[test], threshold))
        tests.append(test)
    return FoldResult(np.array(thresholds), np.array(accuracies), tests)


# ---------------------------------------------------------------------------
# Exhaustive pairing
# ---------------------------------------------------------------------------

def worker_count(deterministic=False):
    if deterministic:
        return 1
    cap = os.environ.get("DV_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ContractViolation(f"DV_THREADS must be an integer, got '{cap}'")
    return workers


@dataclass
class ScoreHistogram:
    """Genuine/impostor counts over uniform bins on [-1, 1]; merges by addition."""
    genuine: np.ndarray = field(default_factory=lambda: np.zeros(HISTOGRAM_BINS, dtype=np.int64))
    impostor: np.ndarray = field(default_factory=lambda: np.zeros(HISTOGRAM_BINS, dtype=np.int64))

    @property
    def bins(self):
        return len(self.genuine)

    @property
    def edges(self):
        return np.linspace(-1.0, 1.0, self.bins + 1)

    @property
    def genuine_count(self):
        return int(self.genuine.sum())

    @property
    def impostor_count(self):
        return int(self.impostor.sum())

    def add(self, scores, genuine):
        index = np.clip(((np.asarray(scores) + 1.0) * (self.bins / 2.0)).astype(np.int64), 0, self.bins - 1)
        self.genuine += np.bincount(index[genuine], minlength=self.bins)
        self.impostor += np.bincount(index[~genuine], minlength=self.bins)

    def merge(self, other):
        self.genuine += other.genuine
        self.impostor += other.impostor
        return self

    def roc_curve(self):
        """Operating points at every bin's lower edge (accept all bins at or above)."""
        if self.genuine_count == 0 or self.impostor_count == 0:
            raise ContractViolation("rate metrics need genuine and impostor scores")
        genuine_above = np.cumsum(self.genuine[::-1])[::-1]
        impostor_above = np.cumsum(self.impostor[::-1])[::-1]
        lower = self.edges[:-1]
        far = np.concatenate([[0.0], impostor_above[::-1] / self.impostor_count])
        tar = np.concatenate([[0.0], genuine_above[::-1] / self.genuine_count])
        return RocCurve(far, tar, np.concatenate([[np.inf], lower[::-1]]))


def _block_scores(unit, labels, rows, cols, same_block):
    sims = unit[rows] @ unit[cols].T
    i, j = np.triu_indices(len(rows), k=1, m=len(cols)) if same_block else np.indices(sims.shape).reshape(2, -1)
    genuine = labels[rows][i] == labels[cols][j]
    return sims[i, j], genuine, rows[i], cols[j]


class _PairBlocks:
    """Upper-triangular blocks of the all-pairs score matrix."""

    def __init__(self, embeddings, identities, block_size):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        self.labels = np.asarray(identities)
        self.n = len(embeddings)
        if self.n < 2:
            raise ContractViolation(f"exhaustive pairing needs at least 2 embeddings, got {self.n}")
        if len(self.labels) != self.n:
            raise ContractViolation(f"{self.n} embeddings but {len(self.labels)} identity labels")
        self.unit = unit_rows(embeddings)
        self.block_size = block_size
        starts = range(0, self.n, block_size)
        self.tasks = [(a, b) for a in starts for b in starts if b >= a]

    def score(self, task):
        a, b = task
        rows = np.arange(a, min(a + self.block_size, self.n))
        cols = np.arange(b, min(b + self.block_size, self.n))
        return _block_scores(self.unit, self.labels, rows, cols, a == b)


@dataclass
class ThresholdCounts:
    """Exact genuine/impostor counts scoring at or above each threshold."""
    thresholds: np.ndarray
    genuine: np.ndarray
    impostor: np.ndarray
    genuine_total: int = 0
    impostor_total: int = 0

    @property
    def tar(self):
        return self.genuine / self.genuine_total if self.genuine_total else np.full(len(self.thresholds), np.nan)

    @property
    def far(self):
        return self.impostor / self.impostor_total if self.impostor_total else np.full(len(self.thresholds), np.nan)

    def merge(self, other):
        self.genuine += other.genuine
        self.impostor += other.impostor
        self.genuine_total += other.genuine_total
        self.impostor_total += other.impostor_total
        return self


def _count_at_or_above(values, thresholds):
    ordered = np.sort(values)
    return len(ordered) - np.searchsorted(ordered, thresholds, side="left")


def exact_counts(embeddings, identities, thresholds, block_size=1024, workers=1):
    """Streaming pass over every pair that counts exactly at the given thresholds."""
    blocks = _PairBlocks(embeddings, identities, block_size)
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)

    def run(task):
        scores, genuine, _, _ = blocks.score(task)
        return ThresholdCounts(thresholds, _count_at_or_above(scores[genuine], thresholds),
                               _count_at_or_above(scores[~genuine], thresholds),
                               int(genuine.sum()), int((~genuine).sum()))

    total = ThresholdCounts(thresholds, np.zeros(len(thresholds), dtype=np.int64),
                            np.zeros(len(thresholds), dtype=np.int64))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for partial in pool.map(run, blocks.tasks):
            total.merge(partial)
    return total


def exhaustive_pairs(embeddings, identities, block_size=1024, materialize=True, workers=1, quiet=True):
    """
    Score every unordered pair (i < j). With ``materialize`` a ScoreSet with
    (i, j) provenance is returned; otherwise a ScoreHistogram in constant memory.
    """
    blocks = _PairBlocks(embeddings, identities, block_size)

    def run(task):
        scores, genuine, i, j = blocks.score(task)
        if materialize:
            return scores, genuine, i, j
        partial = ScoreHistogram()
        partial.add(scores, genuine)
        return partial

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(run, blocks.tasks)
        if not materialize:
            total = ScoreHistogram()
            for partial in results:
                total.merge(partial)
            return total
        results = list(results)

    scores = np.concatenate([r[0] for r in results])
    genuine = np.concatenate([r[1] for r in results])
    pairs = list(zip(np.concatenate([r[2] for r in results]).tolist(), np.concatenate([r[3] for r in results]).tolist()))
    if not quiet:
        print(f"✓ scored {len(scores)} pairs ({int(genuine.sum())} genuine, {int((~genuine).sum())} impostor)")
    return ScoreSet(scores, genuine, pairs)


# ---------------------------------------------------------------------------
# Error ranking and feature-space summaries
# ---------------------------------------------------------------------------

@dataclass
class ErrorRanking:
    false_accepts: list     # (score, pair) by descending score
    false_rejects: list     # (score, pair) by ascending score

    @property
    def ratio(self):
        """false accepts per false reject."""
        if not self.false_rejects:
            return float("inf") if self.false_accepts else 0.0
        return len(self.false_accepts) / len(self.false_rejects)


def rank_errors(scores, threshold):
    if not np.isfinite(threshold):
        raise ContractViolation(f"error ranking needs a finite threshold, got {threshold}")
    pairs = scores.pairs if scores.pairs is not None else list(range(len(scores)))
    accepted = scores.scores >= threshold
    fa = np.flatnonzero(accepted & ~scores.genuine)
    fr = np.flatnonzero(~accepted & scores.genuine)
    fa = fa[np.argsort(-scores.scores[fa], kind="stable")]
    fr = fr[np.argsort(scores.scores[fr], kind="stable")]
    return ErrorRanking(
        false_accepts=[(float(scores.scores[i]), pairs[i]) for i in fa],
        false_rejects=[(float(scores.scores[i]), pairs[i]) for i in fr],
    )


@dataclass
class ScatterSummary:
    between: float   # mean angle between class-mean directions (radians)
    within: float    # mean angle of samples to their class-mean direction (radians)

    @property
    def ratio(self):
        return self.between / self.within if self.within > 0 else float("inf")


def _angle(u, v):
    return np.arccos(np.clip(np.sum(u * v, axis=-1), -1.0, 1.0))


def angular_scatter(features, labels):
    unit = unit_rows(features)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractViolation("angular scatter needs at least two classes")
    directions = {}
    within = np.zeros(len(labels))
    for cls_id in classes:
        members = labels == cls_id
        mean = unit[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise ContractViolation(f"class {cls_id} has no mean direction")
        directions[cls_id] = mean / norm
        within[members] = _angle(unit[members], directions[cls_id])
    between = [_angle(directions[a], directions[b]) for a, b in combinations(classes, 2)]
    return ScatterSummary(float(np.mean(between)), float(within.mean()))


# ---------------------------------------------------------------------------
# Pair-list evaluation and report files
# ---------------------------------------------------------------------------

def score_pair_list(embeddings, image_paths, pairs):
    """ScoreSet for (path_a, path_b, label) pairs looked up in an embedding store."""
    row_of = {path: row for row, path in enumerate(image_paths)}
    unit = unit_rows(embeddings)
    scores, genuine, provenance = [], [], []
    for number, (a, b, label) in enumerate(pairs):
        missing = [p for p in (a, b) if p not in row_of]
        if missing:
            raise DataError(f"pair {number} ({a}, {b}) references images absent from the store: {', '.join(missing)}")
        scores.append(float(np.clip(unit[row_of[a]] @ unit[row_of[b]], -1.0, 1.0)))
        genuine.append(bool(label))
        provenance.append((a, b))
    return ScoreSet(np.array(scores), np.array(genuine, dtype=bool), provenance)


@dataclass
class VerificationReport:
    scores: ScoreSet
    folds: FoldResult
    curve: RocCurve
    far_targets: tuple
    errors: ErrorRanking

    def rows(self):
        rows = [
            ("genuine_pairs", str(self.scores.genuine_count)),
            ("impostor_pairs", str(self.scores.impostor_count)),
            ("folds", str(self.folds.k)),
            ("accuracy_mean", f"{self.folds.mean:.6f}"),
            ("accuracy_std", f"{self.folds.std:.6f}"),
            ("threshold_mean", f"{self.folds.mean_threshold:.6f}"),
        ]
        rows += [(f"tar@far={far:g}", f"{tar_at_far(self.curve, far):.6f}") for far in self.far_targets]
        rows += [
            ("false_accepts", str(len(self.errors.false_accepts))),
            ("false_rejects", str(len(self.errors.false_rejects))),
            ("fa_fr_ratio", f"{self.errors.ratio:.6f}"),
        ]
        return rows


def evaluate(scores, far_targets=DEFAULT_FAR_TARGETS, folds=10, fold_indices=None):
    fold_result = kfold_accuracy(scores, folds, fold_indices)
    threshold = fold_result.mean_threshold
    if not np.isfinite(threshold):
        threshold = float(np.nextafter(scores.scores.max(), np.inf))
    return VerificationReport(
        scores=scores,
        folds=fold_result,
        curve=roc_curve(scores),
        far_targets=tuple(far_targets),
        errors=rank_errors(scores, threshold),
    )


def write_metrics(path, report):
    atomic_write_text(path, "".join(f"{name}\t{value}\n" for name, value in report.rows()))


def write_roc(path, curve):
    atomic_write_text(path, "\n".join(curve.lines()) + "\n")


def write_errors(path, ranking):
    lines = ["kind\tscore\tpair"]
    lines += [f"false_accept\t{s:.10g}\t{_pair_text(p)}" for s, p in ranking.false_accepts]
    lines += [f"false_reject\t{s:.10g}\t{_pair_text(p)}" for s, p in ranking.false_rejects]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _pair_text(pair):
    return ",".join(str(p) for p in pair) if isinstance(pair, tuple) else str(pair)
