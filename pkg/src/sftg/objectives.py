"""Archetypes and training losses.

Every loss accepts either arrays (returns a float) or Vars recorded on a
:class:`~sftg.tensor_core.Tape` (returns a scalar Var so it can be
back-propagated). Archetypes always enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, MissingClassError, ValidationError
from .tensor_core import (
    Tape,
    Var,
    _tape_of,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    transpose,
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    tau1: float = 1.0
    tau2: float = 1.0
    tau_align: float = 0.07
    beta_gac: float = 1.0
    beta_align: float = 1.0
    cosine: bool = False  # cosine instead of raw dot-product archetype similarity

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("tau1", "tau2", "tau_align"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("beta_gac", "beta_align"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ArchetypeBank:
    """Per-class mean representation. Only classes that had at least one
    sequence are present; ``classes`` lists them in ascending order."""

    n_classes: int
    classes: tuple[int, ...]
    archetypes: np.ndarray  # (len(classes), d)
    counts: tuple[int, ...]
    epoch_tag: int = 0

    def positions(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(k)] for k in labels], dtype=np.intp)
        except KeyError as exc:
            raise MissingClassError(f"no archetype for class {exc.args[0]}") from None

    def vector(self, k: int) -> np.ndarray:
        return self.archetypes[self.positions([k])[0]]

    def equals(self, other: "ArchetypeBank") -> bool:
        return (self.n_classes == other.n_classes and self.classes == other.classes
                and self.counts == other.counts and np.array_equal(self.archetypes, other.archetypes))


def compute_archetypes(reps, labels, n_classes: int, epoch_tag: int = 0) -> ArchetypeBank:
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if reps.ndim != 2 or len(reps) == 0:
        raise EmptyInputError("need at least one representation")
    if len(labels) != len(reps):
        raise ValidationError("labels and representations differ in length")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValidationError(f"class index outside [0, {n_classes})")
    classes = np.unique(labels)
    sums = np.zeros((len(classes), reps.shape[1]))
    counts = np.zeros(len(classes), dtype=np.int64)
    pos = np.searchsorted(classes, labels)
    np.add.at(sums, pos, reps)
    np.add.at(counts, pos, 1)
    return ArchetypeBank(n_classes, tuple(int(c) for c in classes), sums / counts[:, None],
                         tuple(int(c) for c in counts), epoch_tag)


@dataclass(frozen=True)
class ClassEmbeddingTable:
    vectors: np.ndarray  # (C, d_e), unit rows

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or len(v) == 0:
            raise ValidationError("class embedding table must be a non-empty 2-D array")
        if np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > 1e-9):
            raise ValidationError("class embeddings must have unit norm")
        object.__setattr__(self, "vectors", v)

    @property
    def n_classes(self) -> int:
        return len(self.vectors)

    @classmethod
    def random(cls, n_classes: int, dim: int = 32, seed: int = 0) -> "ClassEmbeddingTable":
        """Seeded random unit vectors; a stand-in for image-encoder concept embeddings."""
        v = np.random.default_rng(seed).standard_normal((n_classes, dim))
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))

    @classmethod
    def from_vectors(cls, vectors) -> "ClassEmbeddingTable":
        v = np.asarray(vectors, dtype=np.float64)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))


def _begin(*xs) -> tuple[Tape, bool]:
    tape = _tape_of(*xs)
    return (Tape(), True) if tape is None else (tape, False)


def _finish(out: Var, eager: bool):
    return float(out.value) if eager else out


def _nll(logits, onehot):
    """Mean over rows of -log softmax(logits)[target]."""
    picked = reduce_sum(mul(log_softmax_rows(logits), onehot), axis=-1)
    return -reduce_mean(picked)


def _onehot(positions: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(positions), width))
    out[np.arange(len(positions)), positions] = 1.0
    return out


def gac_seq_loss(S, labels, bank: ArchetypeBank, tau1: float, cosine: bool = False):
    """Sequence-level archetype contrast: mean NLL of the own archetype among all."""
    tape, eager = _begin(S)
    pos = bank.positions(labels)
    S = tape.lift(S)
    arch = bank.archetypes
    if cosine:
        S = l2_normalize_rows(S)
        arch = arch / np.linalg.norm(arch, axis=1, keepdims=True)
    logits = matmul(S, tape.constant(arch.T)) * (1.0 / tau1)
    return _finish(_nll(logits, _onehot(pos, len(bank.classes))), eager)


def gac_channel_loss(snapshots, labels, bank: ArchetypeBank, heads: dict, tau2: float, cosine: bool = False):
    """Snapshot-level archetype contrast through the projections F_1, F_2.

    ``snapshots`` is (B, f, d); ``heads`` maps ``F_1``, ``F_1.bias``, ``F_2``,
    ``F_2.bias`` to arrays or Vars. The mean runs over all B * f terms.
    """
    tape, eager = _begin(snapshots, *heads.values())
    pos = bank.positions(labels)
    s = tape.lift(snapshots)
    B, f, _ = s.shape
    u = matmul(s, transpose(tape.lift(heads["F_1"]))) + tape.lift(heads["F_1.bias"])
    v = matmul(tape.constant(bank.archetypes), transpose(tape.lift(heads["F_2"]))) + tape.lift(heads["F_2.bias"])
    if cosine:
        u, v = l2_normalize_rows(u), l2_normalize_rows(v)
    logits = matmul(u, transpose(v)) * (1.0 / tau2)  # (B, f, C)
    onehot = _onehot(pos, len(bank.classes))[:, None, :]
    picked = reduce_sum(mul(log_softmax_rows(logits), onehot), axis=-1)
    return _finish(-reduce_mean(picked), eager)


def gac_loss(seq_part, ch_part, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return seq_part
    if alpha == 0.0:
        return ch_part
    return alpha * seq_part + (1.0 - alpha) * ch_part


def alignment_loss(S, labels, table: ClassEmbeddingTable, tau_a: float, proj: dict):
    """Symmetric InfoNCE between projected EEG features and class embeddings.

    Candidates are the distinct classes present in the batch. The EEG-to-class
    term is a softmax over those classes per sample; the class-to-EEG term is
    a softmax over the batch per class, with every sample of that class a
    positive (uniform soft target). The result is the mean of the two.
    """
    if not tau_a > 0:
        raise ValidationError("tau_a must be positive")
    tape, eager = _begin(S, *proj.values())
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= table.n_classes):
        raise MissingClassError(f"label outside the {table.n_classes}-class embedding table")
    present = np.unique(labels)
    col = np.searchsorted(present, labels)
    z = l2_normalize_rows(matmul(tape.lift(S), transpose(tape.lift(proj["proj"]))) + tape.lift(proj["proj.bias"]))
    logits = matmul(z, tape.constant(table.vectors[present].T)) * (1.0 / tau_a)  # (B, U)
    to_class = _nll(logits, _onehot(col, len(present)))
    target = _onehot(col, len(present)).T
    target = target / target.sum(axis=1, keepdims=True)
    to_eeg = -reduce_mean(reduce_sum(mul(log_softmax_rows(transpose(logits)), target), axis=-1))
    return _finish((to_class + to_eeg) * 0.5, eager)


def cross_entropy_loss(S, labels, head: dict):
    """Softmax cross-entropy of ``S @ classifier.T + bias``."""
    tape, eager = _begin(S, *head.values())
    W = tape.lift(head["classifier"])
    n_classes = W.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValidationError(f"label outside [0, {n_classes})")
    logits = matmul(tape.lift(S), transpose(W)) + tape.lift(head["classifier.bias"])
    return _finish(_nll(logits, _onehot(labels, n_classes)), eager)


def cross_entropy_from_logits(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValidationError(f"label outside [0, {logits.shape[1]})")
    t = Tape()
    return float(_nll(t.constant(logits), _onehot(labels, logits.shape[1])).value)
