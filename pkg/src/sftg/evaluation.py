"""Zero-shot ranking, top-k accuracy, retrieval metrics, RSA matrices and
feature export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .encoder import ModelParams, represent
from .errors import DegenerateFeatureError, EmptyInputError, MissingClassError, NoValidQueryError, ValidationError
from .objectives import ClassEmbeddingTable


@dataclass(frozen=True)
class RankedPrediction:
    true_class: int | None
    ranked_classes: tuple[int, ...]

    def hit(self, k: int) -> bool:
        return self.true_class in self.ranked_classes[:k]


def rank_scores(scores, true_class: int | None = None) -> RankedPrediction:
    """Descending by score; equal scores in ascending class id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return RankedPrediction(true_class, tuple(int(c) for c in order))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateFeatureError("zero-norm feature vector")
    return x / norms


def project(S, params: ModelParams) -> np.ndarray:
    return np.asarray(S, dtype=np.float64) @ params.tensors["proj"].T + params.tensors["proj.bias"]


def zero_shot_classify(S, params: ModelParams, table: ClassEmbeddingTable, true_class: int | None = None) -> RankedPrediction:
    """Rank every class by cosine similarity of the projected feature to its embedding."""
    if table.n_classes == 0:
        raise ValidationError("empty class table")
    z = _unit_rows(project(S, params))
    return rank_scores(table.vectors @ z, true_class)


def class_scores(S, params: ModelParams, table: ClassEmbeddingTable | None, scorer: str) -> np.ndarray:
    """(N, C) scores: cosine to class embeddings (``zero_shot``) or classifier logits."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if scorer == "zero_shot":
        if table is None:
            raise ValidationError("zero-shot scoring needs a class embedding table")
        return _unit_rows(project(S, params)) @ table.vectors.T
    if scorer == "classifier":
        return S @ params.tensors["classifier"].T + params.tensors["classifier.bias"]
    raise ValidationError(f"unknown scorer {scorer!r}")


def topk_accuracy(predictions, k_list) -> dict[int, float]:
    preds = list(predictions)
    if not preds:
        raise EmptyInputError("no predictions")
    return {int(k): sum(p.hit(k) for p in preds) / len(preds) for k in k_list}


def evaluate_topk(params: ModelParams, features, labels, subjects, table, k_list=(1, 5), *, pe=None,
                  adjacency=None, scorer: str = "zero_shot") -> dict:
    """Top-k accuracy over a test set, overall and per subject.

    Returns ``{"overall": {k: acc}, "per_subject": {s: {k: acc}}, "n": count}``.
    """
    labels = np.asarray(labels)
    subjects = np.asarray(subjects)
    if len(labels) == 0:
        raise EmptyInputError("empty split")
    S = represent(params, features, pe, adjacency)
    scores = class_scores(S, params, table, scorer)
    preds = [rank_scores(row, int(y)) for row, y in zip(scores, labels)]
    per_subject = {}
    for s in np.unique(subjects):
        per_subject[int(s)] = topk_accuracy([p for p, m in zip(preds, subjects == s) if m], k_list)
    return {"overall": topk_accuracy(preds, k_list), "per_subject": per_subject, "n": len(preds)}


@dataclass(frozen=True)
class RetrievalResult:
    mAP: float
    rank1: float
    n_queries: int
    n_skipped: int


def retrieval_metrics(features, labels) -> RetrievalResult:
    """Leave-one-out cosine retrieval.

    Every sample queries all others (ties in ascending index). Rank-1 is the
    share of queries whose nearest neighbour has the same class; mAP the mean
    average precision of same-class retrieval. Queries without another
    same-class sample are skipped and counted.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n < 2:
        raise NoValidQueryError("retrieval needs at least two samples")
    u = _unit_rows(x)
    sims = u @ u.T
    aps, hits, skipped = [], [], 0
    for i in range(n):
        others = np.delete(np.arange(n), i)
        rel = labels[others] == labels[i]
        if not rel.any():
            skipped += 1
            continue
        order = np.lexsort((others, -sims[i, others]))
        rel = rel[order]
        ranks = np.flatnonzero(rel) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
        hits.append(bool(rel[0]))
    if not aps:
        raise NoValidQueryError("no query has another sample of its class")
    return RetrievalResult(float(np.mean(aps)), float(np.mean(hits)), len(aps), skipped)


@dataclass(frozen=True)
class SimilarityMatrix:
    classes: tuple[int, ...]
    matrix: np.ndarray


def rsa_matrix(features, labels, class_order=None) -> SimilarityMatrix:
    """Cosine similarity between per-class mean features."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = tuple(int(c) for c in (np.unique(labels) if class_order is None else class_order))
    means = []
    for c in classes:
        members = x[labels == c]
        if len(members) == 0:
            raise MissingClassError(f"class {c} has no features")
        means.append(members.mean(axis=0))
    u = _unit_rows(np.array(means))
    m = u @ u.T
    m = 0.5 * (m + m.T)
    return SimilarityMatrix(classes, m)


def write_rsa_csv(sim: SimilarityMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", *sim.classes])
        for c, row in zip(sim.classes, sim.matrix):
            w.writerow([c, *(format(v, ".17g") for v in row)])


def export_features(S, subjects, labels, path) -> int:
    """Write ``subject,label,S_0..S_{d-1}`` rows; returns the row count."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "label", *(f"S_{i}" for i in range(S.shape[1]))])
        for s, y, row in zip(subjects, labels, S):
            w.writerow([int(s), int(y), *(format(v, ".17g") for v in row)])
    return len(S)


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array([[float(v) for v in r[2:]] for r in rows])
    return (np.array([int(r[0]) for r in rows]), np.array([int(r[1]) for r in rows]), arr)


def binomial_bound(p: float, n: int, sigmas: float = 5.0) -> tuple[float, float]:
    """``p +- sigmas * sqrt(p (1 - p) / n)``."""
    half = sigmas * np.sqrt(p * (1.0 - p) / n)
    return p - half, p + half
