"""EEG graph construction: electrode layouts, spatial and functional adjacency,
the self-loop normalised Laplacian and spectral positional encodings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DegenerateChannelError, ShapeError, ValidationError
from .tensor_core import EigenDecomposition, as_matrix, fix_signs, sym_eigen

ZERO_EIGENVALUE_TOL = 1e-8


@dataclass(frozen=True)
class ElectrodeLayout:
    names: tuple[str, ...]
    positions: np.ndarray  # (J, 3)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "positions", pos)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] != len(self.names):
            raise ShapeError(f"positions must be ({len(self.names)}, 3), got {pos.shape}")
        if len(self.names) < 2:
            raise ValidationError("a layout needs at least 2 electrodes")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("electrode names must be unique")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("electrode positions must be finite")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise ValidationError("two electrodes share an identical position")

    @property
    def J(self) -> int:
        return len(self.names)

    def distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def permuted(self, perm) -> "ElectrodeLayout":
        perm = np.asarray(perm)
        return ElectrodeLayout(tuple(self.names[i] for i in perm), self.positions[perm])


def read_layout_csv(path) -> ElectrodeLayout:
    """Parse a ``name,x,y,z`` CSV (header required), rows in file order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["name", "x", "y", "z"]:
            raise ValidationError(f"layout header must be name,x,y,z; got {','.join(header)}")
        names, pos = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValidationError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                pos.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            names.append(row[0].strip())
    return ElectrodeLayout(tuple(names), np.array(pos, dtype=np.float64).reshape(-1, 3))


def write_layout_csv(layout: ElectrodeLayout, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "x", "y", "z"])
        for name, p in zip(layout.names, layout.positions):
            w.writerow([name, *(repr(float(c)) for c in p)])


# Approximate 10-10 placement: each row sits at a fixed anterior angle from
# the vertex, electrode number n at lateral angle 18 * ceil(n / 2) degrees
# (odd = left, even = right). The (anterior, lateral) pair is mapped onto the
# unit sphere as an azimuthal-equidistant projection around Cz.
_ROW_ANGLE = {
    "Fp": 72.0, "AF": 54.0, "F": 36.0, "FT": 18.0, "FC": 18.0, "T": 0.0, "C": 0.0,
    "TP": -18.0, "CP": -18.0, "P": -36.0, "PO": -54.0, "O": -72.0,
}


def _ten_ten_position(name: str) -> np.ndarray:
    i = len(name)
    while not name[i - 1].isalpha():
        i -= 1
    row, tail = name[:i], name[i:]
    if row.endswith("z"):
        row, lateral = row[:-1], 0.0
    else:
        n = int(tail)
        lateral = 18.0 * math.ceil(n / 2) * (-1.0 if n % 2 else 1.0)
    ant = _ROW_ANGLE[row]
    r = math.radians(math.hypot(ant, lateral))
    phi = math.atan2(ant, lateral)
    return np.array([math.sin(r) * math.cos(phi), math.sin(r) * math.sin(phi), math.cos(r)])


STANDARD_16 = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7",
    "C3", "Cz", "C4", "T8", "P3", "Pz", "P4", "Oz",
)

STANDARD_63 = (
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8",
    "O1", "Oz", "O2",
)


def standard_layout(n_channels: int) -> ElectrodeLayout:
    """Built-in 16- or 63-electrode montage on the unit sphere."""
    names = {16: STANDARD_16, 63: STANDARD_63}.get(n_channels)
    if names is None:
        raise ValidationError(f"no built-in layout with {n_channels} electrodes (have 16, 63)")
    return ElectrodeLayout(names, np.stack([_ten_ten_position(n) for n in names]))


# ---------------------------------------------------------------------------
# Adjacency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Adjacency:
    matrix: np.ndarray
    mode: str  # "spatial", "functional" or "combined"
    weighted: bool = False

    def __post_init__(self):
        m = as_matrix(self.matrix, "adjacency")
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"adjacency must be square, got {m.shape}")
        if not np.array_equal(m, m.T):
            raise ValidationError("adjacency must be symmetric")
        object.__setattr__(self, "matrix", m)

    @property
    def J(self) -> int:
        return self.matrix.shape[0]


def build_spatial_adjacency(layout: ElectrodeLayout, k: int | None = None, radius: float | None = None) -> Adjacency:
    """Binary adjacency from electrode geometry.

    Exactly one of ``k`` (k nearest neighbours, symmetrised by union) or
    ``radius`` (edge iff distance <= radius) must be given. Distance ties go
    to the lower electrode index.
    """
    if (k is None) == (radius is None):
        raise ValidationError("give exactly one of k or radius")
    J = layout.J
    dist = layout.distances()
    a = np.zeros((J, J))
    if k is not None:
        if not 1 <= k <= J - 1:
            raise ValidationError(f"k must be in [1, {J - 1}], got {k}")
        for i in range(J):
            d = dist[i].copy()
            d[i] = np.inf
            nearest = np.argsort(d, kind="stable")[:k]
            a[i, nearest] = 1.0
        a = np.maximum(a, a.T)
    else:
        if not radius > 0:
            raise ValidationError(f"radius must be positive, got {radius}")
        a = (dist <= radius).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return Adjacency(a, "spatial")


def pearson_matrix(signals, names=None) -> np.ndarray:
    """Pairwise Pearson correlation of the rows of a C x T signal matrix."""
    x = as_matrix(signals, "signals")
    if x.shape[1] < 2:
        raise ValidationError("need at least 2 time samples")
    xc = x - x.mean(axis=1, keepdims=True)
    ss = np.sum(xc * xc, axis=1)
    for c in np.flatnonzero(ss == 0.0):
        label = names[c] if names is not None else f"channel {c}"
        raise DegenerateChannelError(f"{label} has zero variance", channel=label)
    inv = 1.0 / np.sqrt(ss)
    rho = (xc @ xc.T) * inv[:, None] * inv[None, :]
    rho = np.clip(0.5 * (rho + rho.T), -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def build_functional_adjacency(signals, threshold: float, weighted: bool = False, names=None) -> Adjacency:
    """Adjacency from channel correlation: ``|rho| >= threshold`` (binary) or
    ``rho`` itself (weighted)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    rho = pearson_matrix(signals, names)
    if weighted:
        a = rho.copy()
    else:
        a = (np.abs(rho) >= threshold).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return Adjacency(a, "functional", weighted=weighted)


def combine_adjacency(*parts: Adjacency) -> Adjacency:
    """Logical OR of binary adjacencies over the same node set."""
    if not parts:
        raise ValidationError("nothing to combine")
    if any(p.weighted for p in parts):
        raise ValidationError("only binary adjacencies can be combined")
    a = np.zeros_like(parts[0].matrix)
    for p in parts:
        if p.J != parts[0].J:
            raise ShapeError("adjacencies have different node counts")
        a = np.maximum(a, p.matrix)
    return Adjacency(a, "combined")


def write_adjacency_csv(adj: Adjacency, path, names=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) if names is not None else [f"n{i}" for i in range(adj.J)])
        for row in adj.matrix:
            w.writerow([repr(float(v)) for v in row])


def read_adjacency_csv(path) -> tuple[Adjacency, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError("empty adjacency file")
    names = rows[0]
    try:
        m = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"bad adjacency entry: {exc}") from None
    if m.shape != (len(names), len(names)):
        raise ShapeError(f"adjacency is {m.shape}, header names {len(names)} nodes")
    weighted = not np.all(np.isin(m, (0.0, 1.0)))
    return Adjacency(m, "functional" if weighted else "combined", weighted=weighted), names


def connected_components(adj) -> int:
    m = adj.matrix if isinstance(adj, Adjacency) else np.asarray(adj)
    J = m.shape[0]
    seen = np.zeros(J, dtype=bool)
    count = 0
    for s in range(J):
        if seen[s]:
            continue
        count += 1
        stack = [s]
        seen[s] = True
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(m[i] != 0):
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
    return count


# ---------------------------------------------------------------------------
# Laplacian and positional encodings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphLaplacian:
    laplacian: np.ndarray
    degree: np.ndarray
    eig: EigenDecomposition
    adjacency: Adjacency
    components: int = field(default=1)

    @property
    def J(self) -> int:
        return self.laplacian.shape[0]


def normalized_laplacian(adj: Adjacency) -> GraphLaplacian:
    """``I - D^-1/2 (|A| + I) D^-1/2`` plus its cached eigendecomposition.

    Weighted adjacencies enter by absolute value, so anticorrelated channels
    count as coupled and every degree stays positive.
    """
    a = np.asarray(adj.matrix, dtype=np.float64)
    if not np.array_equal(a, a.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(a < -1.0):
        raise ValidationError("weighted adjacency entries must be >= -1")
    J = a.shape[0]
    a_tilde = np.abs(a) + np.eye(J)
    deg = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(J) - a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    return GraphLaplacian(lap, deg, sym_eigen(lap), adj, connected_components(adj))


@dataclass(frozen=True)
class PositionalEncodings:
    vectors: np.ndarray  # (J, K); row i is the encoding of electrode i
    eigenvalues: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.vectors.shape[1]

    @property
    def J(self) -> int:
        return self.vectors.shape[0]


def positional_encodings(g: GraphLaplacian, K: int) -> PositionalEncodings:
    """The K eigenvectors after the trivial (near-zero) ones, ascending."""
    J = g.J
    if not 1 <= K <= J - 1:
        raise CapacityError(f"K must be in [1, {J - 1}], got {K}", max_feasible=J - 1)
    w = g.eig.eigenvalues
    trivial = min(int(np.sum(w <= ZERO_EIGENVALUE_TOL)), g.components)
    available = J - trivial
    if K > available:
        raise CapacityError(
            f"graph has {available} non-trivial eigenvectors, cannot take K={K}", max_feasible=available
        )
    vecs = fix_signs(g.eig.eigenvectors[:, trivial:trivial + K])
    return PositionalEncodings(vecs, w[trivial:trivial + K].copy())


def build_graph(
    layout: ElectrodeLayout,
    signals=None,
    *,
    k: int | None = 4,
    radius: float | None = None,
    threshold: float | None = 0.7,
) -> Adjacency:
    """Default rule: spatial kNN united with functional ``|rho| >= threshold``.

    Either part is skipped when its parameter is ``None`` (or, for the
    functional part, when no signals are given).
    """
    parts = []
    if k is not None or radius is not None:
        parts.append(build_spatial_adjacency(layout, k=k, radius=radius))
    if threshold is not None and signals is not None:
        parts.append(build_functional_adjacency(signals, threshold, names=layout.names))
    if not parts:
        raise ValidationError("graph rule selects neither spatial nor functional edges")
    return parts[0] if len(parts) == 1 else combine_adjacency(*parts)
