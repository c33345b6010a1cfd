"""Synthetic EEG trials, windowed node features, the dataset file format and
train/test protocols.

The synthetic generator places class identity in the *relative* signs of a
per-class spatial pattern: within each block of electrodes the pattern may
flip polarity from trial to trial, so first-order per-channel statistics carry
the class only up to those flips while cross-channel co-activation carries it
exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedFileError,
    UnknownSubjectError,
    ValidationError,
)
from .graph import ElectrodeLayout


@dataclass(frozen=True)
class SynthConfig:
    subjects: int = 3
    classes: int = 5
    sequences: int = 20  # per (subject, class)
    channels: int = 16
    samples: int = 256
    noise: float = 2.25
    subject_shift: float = 0.3
    pattern_seed: int = 0
    seed: int = 0
    sample_rate: float = 128.0
    frequency: float = 10.0
    dc_offset: float = 0.5
    polarity_groups: int = 4

    def __post_init__(self):
        for name in ("subjects", "classes", "sequences", "channels", "samples", "polarity_groups"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.noise < 0 or self.subject_shift < 0:
            raise ValidationError("noise and subject_shift must be non-negative")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if self.polarity_groups > self.channels:
            raise ValidationError("more polarity groups than channels")


@dataclass(frozen=True)
class EegSequence:
    subject: int
    label: int
    signal: np.ndarray  # (C, T)
    sample_rate: float = 128.0


@dataclass
class EegDataset:
    signals: np.ndarray  # (N, C, T)
    subjects: np.ndarray  # (N,) int
    labels: np.ndarray  # (N,) int
    sample_rate: float
    n_subjects: int

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 3:
            raise ValidationError(f"signals must be (N, C, T), got {self.signals.shape}")
        n = len(self.signals)
        if self.subjects.shape != (n,) or self.labels.shape != (n,):
            raise ValidationError("subjects and labels must have one entry per sequence")
        if not np.all(np.isfinite(self.signals)):
            raise ValidationError("signals contain non-finite values")

    def __len__(self):
        return len(self.signals)

    @property
    def n_channels(self) -> int:
        return self.signals.shape[1]

    @property
    def n_samples(self) -> int:
        return self.signals.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def sequence(self, i: int) -> EegSequence:
        return EegSequence(int(self.subjects[i]), int(self.labels[i]), self.signals[i], self.sample_rate)

    def equals(self, other: "EegDataset") -> bool:
        return (self.sample_rate == other.sample_rate and self.n_subjects == other.n_subjects
                and np.array_equal(self.subjects, other.subjects)
                and np.array_equal(self.labels, other.labels)
                and self.signals.shape == other.signals.shape
                and self.signals.tobytes() == other.signals.tobytes())


def _block_separation(patterns: np.ndarray, groups: np.ndarray) -> int:
    """Smallest number of blocks in which two classes differ beyond a sign flip."""
    best = len(np.unique(groups))
    for a in range(len(patterns)):
        for b in range(a + 1, len(patterns)):
            same = 0
            for g in np.unique(groups):
                dot = abs(patterns[a, groups == g] @ patterns[b, groups == g])
                same += dot == np.count_nonzero(groups == g)
            best = min(best, len(np.unique(groups)) - same)
    return best


def class_patterns(n_classes: int, n_channels: int, n_groups: int, seed: int, draws: int = 64) -> np.ndarray:
    """Per-class +-1 patterns, balanced (as far as possible) within each group.

    Trial polarity flips whole blocks, so two classes whose blocks agree up
    to sign are indistinguishable. Of ``draws`` seeded candidates the one
    maximising the minimum pairwise block separation is kept (first wins).
    """
    rng = np.random.default_rng(seed)
    groups = channel_groups(n_channels, n_groups)
    best, best_sep = None, -1
    for _ in range(draws):
        out = np.empty((n_classes, n_channels))
        for k in range(n_classes):
            for g in range(n_groups):
                idx = np.flatnonzero(groups == g)
                signs = np.where(np.arange(len(idx)) < len(idx) // 2, 1.0, -1.0)
                if len(idx) % 2:
                    signs[-1] = rng.choice([-1.0, 1.0])
                out[k, idx] = rng.permutation(signs)
        sep = _block_separation(out, groups)
        if sep > best_sep:
            best, best_sep = out, sep
    return best


def channel_groups(n_channels: int, n_groups: int) -> np.ndarray:
    """Contiguous electrode blocks sharing one trial polarity."""
    return np.arange(n_channels) * n_groups // n_channels


def generate_synthetic_dataset(cfg: SynthConfig, layout: ElectrodeLayout | None = None) -> EegDataset:
    """Sinusoid-plus-noise trials modulated by a class pattern.

    ``x_j(t) = g_sj * e_j * p_kj * (dc + sin(2 pi f t / sr + phi_s + phi_n)) + noise * N(0, 1)``

    with ``p_k`` the class pattern, ``g_s`` / ``phi_s`` the subject's channel
    gains and phase, and per trial a polarity ``e`` (one random sign per
    electrode block) and phase ``phi_n``. Trial-level randomness is part of the
    noise model: with ``noise == 0`` every trial of a (subject, class) pair is
    identical.
    """
    if layout is not None and layout.J != cfg.channels:
        raise ValidationError(f"layout has {layout.J} electrodes, config {cfg.channels} channels")
    C, T = cfg.channels, cfg.samples
    patterns = class_patterns(cfg.classes, C, cfg.polarity_groups, cfg.pattern_seed)
    groups = channel_groups(C, cfg.polarity_groups)
    rng = np.random.default_rng(cfg.seed)
    gains = np.exp(cfg.subject_shift * rng.standard_normal((cfg.subjects, C)))
    phases = math.pi * cfg.subject_shift * rng.standard_normal(cfg.subjects)
    t = np.arange(T) / cfg.sample_rate
    n = cfg.subjects * cfg.classes * cfg.sequences
    signals = np.empty((n, C, T))
    subjects = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for s in range(cfg.subjects):
        for k in range(cfg.classes):
            for _ in range(cfg.sequences):
                if cfg.noise > 0:
                    polarity = rng.choice([-1.0, 1.0], size=cfg.polarity_groups)[groups]
                    trial_phase = rng.uniform(0.0, 2.0 * math.pi)
                    noise = cfg.noise * rng.standard_normal((C, T))
                else:
                    polarity, trial_phase, noise = np.ones(C), 0.0, 0.0
                carrier = cfg.dc_offset + np.sin(2.0 * math.pi * cfg.frequency * t + phases[s] + trial_phase)
                amp = gains[s] * polarity * patterns[k]
                signals[i] = amp[:, None] * carrier[None, :] + noise
                subjects[i], labels[i] = s, k
                i += 1
    return EegDataset(signals, subjects, labels, cfg.sample_rate, cfg.subjects)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def window_features(signal, f: int, window_length: int) -> np.ndarray:
    """Node features of the first ``f * window_length`` samples -> (f, C, 3).

    Per channel and window: mean, population standard deviation and mean
    absolute first difference.
    """
    x = np.asarray(signal, dtype=np.float64)
    if f < 1 or window_length < 2:
        raise ValidationError("need f >= 1 and window_length >= 2")
    C, T = x.shape[-2], x.shape[-1]
    if f * window_length > T:
        raise ValidationError(f"sequence of {T} samples is too short for {f} windows of {window_length}")
    w = x[..., : f * window_length].reshape(*x.shape[:-2], C, f, window_length)
    feats = np.stack([w.mean(axis=-1), w.std(axis=-1), np.abs(np.diff(w, axis=-1)).mean(axis=-1)], axis=-1)
    return np.swapaxes(feats, -3, -2)


def windowize(seq: EegSequence, f: int, window_length: int) -> list[np.ndarray]:
    """The f (C, 3) node-feature snapshots of one trial."""
    return list(window_features(seq.signal, f, window_length))


def dataset_features(ds: EegDataset, f: int, window_length: int) -> np.ndarray:
    """(N, f, C, 3) node features of every trial."""
    return window_features(ds.signals, f, window_length)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"EEGD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIIIId")
_RECORD = struct.Struct("<ii")


def save_dataset(ds: EegDataset, path) -> None:
    N, C, T = ds.signals.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(DATASET_VERSION, ds.n_subjects, C, T, N, float(ds.sample_rate)))
        for i in range(N):
            fh.write(_RECORD.pack(int(ds.subjects[i]), int(ds.labels[i])))
            fh.write(np.ascontiguousarray(ds.signals[i], dtype="<f8").tobytes())


def load_dataset(path, layout: ElectrodeLayout | None = None) -> EegDataset:
    data = Path(path).read_bytes()
    if len(data) < len(DATASET_MAGIC):
        raise TruncatedFileError(f"file has only {len(data)} bytes")
    if data[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(data) < 4 + _HEADER.size:
        raise MalformedHeaderError("file ends inside the header")
    version, n_subjects, C, T, N, sr = _HEADER.unpack_from(data, 4)
    if version != DATASET_VERSION:
        raise MalformedHeaderError(f"unsupported dataset version {version}")
    if C == 0 or T == 0 or n_subjects == 0 or not (math.isfinite(sr) and sr > 0):
        raise MalformedHeaderError(f"invalid header (subjects={n_subjects}, C={C}, T={T}, sample_rate={sr})")
    if layout is not None and layout.J != C:
        raise ShapeMismatchError(f"file declares {C} channels, layout has {layout.J} electrodes")
    rec = _RECORD.size + 8 * C * T
    start = 4 + _HEADER.size
    expected = start + N * rec
    if len(data) < expected:
        raise TruncatedFileError(f"payload truncated: {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise ShapeMismatchError(f"{len(data) - expected} bytes beyond the {N} declared sequences")
    signals = np.empty((N, C, T))
    subjects = np.empty(N, dtype=np.int64)
    labels = np.empty(N, dtype=np.int64)
    for i in range(N):
        off = start + i * rec
        subjects[i], labels[i] = _RECORD.unpack_from(data, off)
        signals[i] = np.frombuffer(data, dtype="<f8", count=C * T, offset=off + _RECORD.size).reshape(C, T)
    if N and (subjects.min() < 0 or subjects.max() >= n_subjects or labels.min() < 0):
        raise FormatError("record with subject or label out of range")
    if not np.all(np.isfinite(signals)):
        raise FormatError("payload contains non-finite samples")
    return EegDataset(signals, subjects, labels, sr, n_subjects)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    protocol: str  # "subject_dependent" or "loso"
    subject: int | None
    train: np.ndarray
    test: np.ndarray


def make_split(ds: EegDataset, protocol: str = "subject_dependent", subject: int | None = None,
               seed: int = 0, train_fraction: float = 0.8) -> DatasetSplit:
    """Subject-dependent: stratified per (subject, class) train/test split of
    one subject (or, with ``subject=None``, of every subject). LOSO: the
    held-out subject forms the whole test set."""
    known = set(int(s) for s in np.unique(ds.subjects))
    if subject is not None and int(subject) not in known:
        raise UnknownSubjectError(f"unknown subject {subject}; have {sorted(known)}")
    idx = np.arange(len(ds))
    if protocol == "loso":
        if subject is None:
            raise ValidationError("leave-one-subject-out needs a held-out subject")
        held = ds.subjects == subject
        return DatasetSplit("loso", int(subject), idx[~held], idx[held])
    if protocol != "subject_dependent":
        raise ValidationError(f"unknown protocol {protocol!r}")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    subjects = sorted(known) if subject is None else [int(subject)]
    for s in subjects:
        for k in np.unique(ds.labels[ds.subjects == s]):
            members = idx[(ds.subjects == s) & (ds.labels == k)]
            members = rng.permutation(members)
            n_train = max(1, int(round(train_fraction * len(members))))
            train.extend(members[:n_train])
            test.extend(members[n_train:])
    return DatasetSplit("subject_dependent", subject, np.sort(np.array(train, dtype=np.int64)),
                        np.sort(np.array(test, dtype=np.int64)))
