"""Dense float64 linear algebra, a Jacobi eigensolver and a small reverse-mode
autodiff tape.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The module-level
operations (``matmul``, ``softmax_rows``, ...) accept either arrays, in which
case they return arrays, or :class:`Var` handles, in which case the operation
is recorded on the owning :class:`Tape` and a new ``Var`` is returned.
"""

from __future__ import annotations

import functools
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    ConvergenceError,
    DegenerateBatchError,
    DegenerateFeatureError,
    ShapeError,
    ValidationError,
)

DEFAULT_EIG_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 100
BATCHNORM_EPS = 1e-5


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_matmul(a_shape: tuple, b_shape: tuple) -> None:
    if len(a_shape) < 2 or len(b_shape) < 2 or a_shape[-1] != b_shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a_shape} and {b_shape}")
    try:
        np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a_shape} and {b_shape}") from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """Handle to one value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Var division is only defined for scalars")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records primitive operations in execution order.

    Each node stores its forward value, the indices of its inputs and a
    vector-Jacobian function mapping the node's adjoint to adjoints of its
    inputs. Nodes are appended as they are computed, so the list is always in
    topological order.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._tracked: list[bool] = []

    def __len__(self):
        return len(self._values)

    def variable(self, value) -> Var:
        """A leaf whose gradient is wanted."""
        return self._leaf(value, tracked=True)

    def constant(self, value) -> Var:
        """A leaf treated as fixed: no gradient flows into it."""
        return self._leaf(value, tracked=False)

    def watch(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {name: self.variable(a) for name, a in arrays.items()}

    def _leaf(self, value, tracked: bool) -> Var:
        value = np.array(value, dtype=np.float64)
        self._values.append(value)
        self._parents.append(())
        self._vjps.append(None)
        self._tracked.append(tracked)
        return Var(self, len(self._values) - 1, value)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("cannot mix values from different tapes")
            return x
        return self.constant(x)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
        idx = tuple(p.index for p in parents)
        tracked = any(self._tracked[i] for i in idx)
        self._values.append(value)
        self._parents.append(idx)
        self._vjps.append(vjp if tracked else None)
        self._tracked.append(tracked)
        return Var(self, len(self._values) - 1, value)

    def backward(self, loss: Var, wrt=None):
        """Accumulate adjoints from ``loss`` back to the leaves.

        ``wrt`` may be a mapping of name to ``Var`` (returns a dict), a
        sequence of ``Var`` (returns a list), a single ``Var`` or ``None``
        (returns the full adjoint list indexed by node).
        """
        if loss.tape is not self:
            raise ContractError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        n = loss.index + 1
        adj: list[np.ndarray | None] = [None] * n
        adj[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            grads = vjp(g)
            for p, gp in zip(self._parents[i], grads):
                if gp is None or not self._tracked[p]:
                    continue
                if adj[p] is None:
                    adj[p] = gp
                else:
                    adj[p] = adj[p] + gp

        def grad_of(v: Var) -> np.ndarray:
            g = adj[v.index] if v.index < n else None
            return np.zeros_like(v.value) if g is None else np.reshape(g, v.value.shape)

        if wrt is None:
            return [grad_of(Var(self, i, self._values[i])) for i in range(n)]
        if isinstance(wrt, Var):
            return grad_of(wrt)
        if isinstance(wrt, Mapping):
            return {k: grad_of(v) for k, v in wrt.items()}
        return [grad_of(v) for v in wrt]


def backward(loss: Var, wrt=None):
    """Reverse-mode gradient of a scalar ``loss`` Var; see :meth:`Tape.backward`."""
    if not isinstance(loss, Var):
        raise ContractError("backward() needs a Var recorded on a tape")
    return loss.tape.backward(loss, wrt)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching rules on leading axes."""
    tape = _tape_of(a, b)
    if tape is None:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _check_matmul(a.shape, b.shape)
        return a @ b
    a, b = tape.lift(a), tape.lift(b)
    _check_matmul(a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g @ _swap(bv), av.shape), _unbroadcast(_swap(av) @ g, bv.shape))

    return tape.record(av @ bv, (a, b), vjp)


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b, dtype=np.float64)
    a, b = tape.lift(a), tape.lift(b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b, dtype=np.float64)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    if not isinstance(a, Var):
        return np.asarray(a, dtype=np.float64) * c
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    if not isinstance(a, Var):
        return np.maximum(np.asarray(a, dtype=np.float64), 0.0)
    pos = a.value > 0
    return a.tape.record(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    y = np.exp(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y,))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    x = a.value
    return a.tape.record(np.log(x), (a,), lambda g: (g / x,))


def softmax_rows(m, mask=None):
    """Softmax along the last axis with max subtraction.

    ``mask`` (boolean, broadcastable) restricts the support; masked entries get
    probability exactly 0. Every row must keep at least one unmasked entry.
    """
    if not isinstance(m, Var):
        m = np.asarray(m, dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise ValidationError("softmax_rows input contains non-finite values")
        return _softmax(m, mask)
    y = _softmax(m.value, mask)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return m.tape.record(y, (m,), vjp)


def log_softmax_rows(m):
    """Log-softmax along the last axis (log-sum-exp stabilised)."""
    if not isinstance(m, Var):
        return _log_softmax(np.asarray(m, dtype=np.float64))
    y = _log_softmax(m.value)

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return m.tape.record(y, (m,), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record(np.asarray(out), (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.mean(a, axis=axis, keepdims=keepdims)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b):
    """Inner product along the last axis."""
    return reduce_sum(mul(a, b), axis=-1)


def concat(items: Sequence, axis: int = -1):
    tape = _tape_of(*items)
    if tape is None:
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in items], axis=axis)
    vs = [tape.lift(x) for x in items]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in vs], axis=axis)
    return tape.record(out, vs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    src = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(np.ndim(a.value if isinstance(a, Var) else a)))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    if not isinstance(a, Var):
        return np.transpose(a, axes)
    inv = np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def l2_normalize_rows(a):
    """Scale each vector along the last axis to unit Euclidean norm."""
    val = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(val, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateFeatureError("cannot normalize a zero vector")
    y = val / norm
    if not isinstance(a, Var):
        return y

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return a.tape.record(y, (a,), vjp)


def batchnorm(x, gamma, beta, running=None, eps: float = BATCHNORM_EPS):
    """Batch normalisation over every axis but the last.

    With ``running=None`` the batch statistics are used (training mode) and
    returned alongside the output so the caller can update running averages;
    otherwise ``running=(mean, var)`` is applied as a fixed affine map.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    (``None`` in eval mode). Variances use the population (1/N) convention.
    """
    tape = _tape_of(x, gamma, beta)
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    red = tuple(range(xv.ndim - 1))
    n = int(np.prod(xv.shape[:-1]))
    if running is None:
        if n < 2:
            raise DegenerateBatchError(f"train-mode batch normalisation needs >= 2 rows, got {n}")
        mu = xv.mean(axis=red)
        var = xv.var(axis=red)
        stats = (mu, var)
    else:
        mu, var = (np.asarray(s, dtype=np.float64) for s in running)
        stats = (None, None)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value if isinstance(gamma, Var) else np.asarray(gamma, dtype=np.float64)
    bv = beta.value if isinstance(beta, Var) else np.asarray(beta, dtype=np.float64)
    out = xhat * gv + bv
    if tape is None:
        return (out, *stats)
    x, gamma, beta = tape.lift(x), tape.lift(gamma), tape.lift(beta)
    train = running is None

    def vjp(g):
        dxhat = g * gv
        if train:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=red) - xhat * np.sum(dxhat * xhat, axis=red))
        else:
            dx = dxhat * inv
        return dx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    return (tape.record(out, (x, gamma, beta), vjp), *stats)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable, params, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is either one array (``f`` takes that array) or a mapping of
    name to array (``f`` takes the mapping). The caller's arrays are not
    modified.
    """
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    single = not isinstance(params, Mapping)
    work = {"x": np.array(params, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in params.items()
    }

    def call():
        return float(f(work["x"]) if single else f(work))

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = call()
            flat[i] = orig - h
            fm = call()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads["x"] if single else grads


def gradient_errors(analytic: np.ndarray, numeric: np.ndarray, small: float = 1e-3) -> np.ndarray:
    """Per-entry error: relative where the gradient is large, absolute below ``small``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mag = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    return np.where(mag < small, diff, diff / np.where(mag == 0, 1.0, mag))


# ---------------------------------------------------------------------------
# Symmetric eigensolver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, orthonormal
    sweeps: int = 0


@functools.lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple:
    """Pairings of the circle method: n-1 (or n) rounds of disjoint pairs
    that together visit every (p, q), p < q, exactly once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = sorted((min(p, q), max(p, q)) for p, q in pairs if p < n and q < n)
        if pairs:
            p = np.array([a for a, _ in pairs], dtype=np.intp)
            q = np.array([b for _, b in pairs], dtype=np.intp)
            rounds.append((p, q))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _off_max(a: np.ndarray) -> float:
    if a.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(a - np.diag(np.diag(a)))))


def fix_signs(vectors: np.ndarray, tie_tol: float = 1e-10) -> np.ndarray:
    """Flip columns so the entry of largest magnitude is positive.

    Magnitudes within ``tie_tol`` of the column maximum count as ties and the
    lowest index among them decides.
    """
    out = np.array(vectors, dtype=np.float64)
    mags = np.abs(out)
    for j in range(out.shape[1]):
        col = mags[:, j]
        lead = int(np.flatnonzero(col >= col.max() - tie_tol)[0])
        if out[lead, j] < 0:
            out[:, j] = -out[:, j]
    return out


def sym_eigen(m, tol: float = DEFAULT_EIG_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs (round-robin order) so that one round is a single
    orthogonal similarity transform. Iteration stops once the largest
    off-diagonal magnitude is at most ``tol`` (or at the rounding floor of the
    matrix norm, whichever is larger).

    Eigenvalues come back ascending; each eigenvector's largest-magnitude
    entry is positive.
    """
    a = as_matrix(m, "eigen input")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"eigen input must be square, got {a.shape}")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    asym = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(a)))):
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    floor = 8.0 * np.finfo(np.float64).eps * float(np.linalg.norm(a))
    threshold = max(tol, floor)
    rounds = _round_robin(n) if n > 1 else ()
    sweeps = 0
    while _off_max(a) > threshold:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {_off_max(a):.3e})",
                residual=_off_max(a),
            )
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                big = np.abs(theta) > 1e150
                t = np.where(
                    big,
                    0.5 / np.where(big, theta, 1.0),
                    np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)),
                )
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            r = np.eye(n)
            r[p, p] = c
            r[q, q] = c
            r[p, q] = s
            r[q, p] = -s
            a = r.T @ a @ r
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ r
        sweeps += 1
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return EigenDecomposition(w[order], fix_signs(v[:, order]), sweeps)
