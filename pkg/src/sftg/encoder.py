"""The EEG Graph Transformer and its parameter container.

Node features of every graph snapshot are embedded together with the
electrode's spectral positional encoding, refined by ``L`` blocks of
full-relation multi-head attention followed by a batch-normalised residual
feed-forward network, and mean-pooled over nodes (snapshot level) and then
over snapshots (sequence level).

Two much simpler encoders used only by the ablation study live here too so
that every model shares one forward interface and one checkpoint format:
``"flat"`` (one affine map of the flattened node features) and ``"channel"``
(a shared affine map applied to each electrode independently, then averaged).
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DegenerateBatchError,
    MalformedHeaderError,
    ShapeError,
    ShapeMismatchError,
    TruncatedFileError,
    ValidationError,
)
from .tensor_core import (
    Tape,
    Var,
    batchnorm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    transpose,
)

KINDS = ("egt", "flat", "channel")
NORM_MOMENTUM = 0.9
N_NODE_FEATURES = 3


@dataclass(frozen=True)
class EgtConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    K: int = 8
    d_k: int = 16
    f: int = 4
    n_classes: int = 5
    d_e: int = 32
    J: int = 16
    kind: str = "egt"
    masked: bool = False  # restrict attention to graph neighbours plus self

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}")
        for name in ("d", "heads", "layers", "K", "d_k", "f", "n_classes", "d_e", "J"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.d != self.heads * self.d_k:
            raise ValidationError(f"d ({self.d}) must equal heads * d_k ({self.heads} * {self.d_k})")

    def header_ints(self) -> list[int]:
        return [KINDS.index(self.kind), self.d, self.heads, self.layers, self.K, self.d_k,
                self.f, self.n_classes, self.d_e, self.J, int(self.masked)]

    @classmethod
    def from_header_ints(cls, ints) -> "EgtConfig":
        if len(ints) != 11 or not 0 <= ints[0] < len(KINDS):
            raise MalformedHeaderError(f"bad model header {list(ints)}")
        kind, d, h, lyr, k, dk, f, c, de, j, masked = ints
        try:
            return cls(d=d, heads=h, layers=lyr, K=k, d_k=dk, f=f, n_classes=c, d_e=de, J=j,
                       kind=KINDS[kind], masked=bool(masked))
        except ValidationError as exc:
            raise MalformedHeaderError(f"inconsistent model header: {exc}") from None


def param_shapes(cfg: EgtConfig) -> dict[str, tuple[int, ...]]:
    """Learnable tensors in checkpoint order, with their shapes."""
    d, H, dk, C = cfg.d, cfg.heads, cfg.d_k, cfg.n_classes
    s: dict[str, tuple[int, ...]] = {}
    if cfg.kind == "egt":
        s["W_v"], s["b_v"] = (d, N_NODE_FEATURES), (d,)
        s["W_p"], s["b_p"] = (d, cfg.K), (d,)
        for l in range(cfg.layers):
            for m in ("Q", "K", "V"):
                s[f"{m}.{l}"] = (H, dk, d)  # head k is [k]: a d_k x d matrix
        for l in range(cfg.layers):
            s[f"O.{l}"] = (d, d)
            s[f"W_1.{l}"] = (2 * d, d)
            s[f"W_2.{l}"] = (d, 2 * d)
            for n in ("norm1", "norm2"):
                s[f"{n}.scale.{l}"] = (d,)
                s[f"{n}.shift.{l}"] = (d,)
        s["F_1"], s["F_1.bias"] = (d, d), (d,)
        s["F_2"], s["F_2.bias"] = (d, d), (d,)
    elif cfg.kind == "flat":
        s["W_flat"], s["b_flat"] = (d, cfg.J * N_NODE_FEATURES), (d,)
    else:
        s["W_chan"], s["b_chan"] = (d, N_NODE_FEATURES), (d,)
    s["proj"], s["proj.bias"] = (cfg.d_e, d), (cfg.d_e,)
    s["classifier"], s["classifier.bias"] = (C, d), (C,)
    return s


def buffer_shapes(cfg: EgtConfig) -> dict[str, tuple[int, ...]]:
    if cfg.kind != "egt":
        return {}
    return {f"{n}.{stat}.{l}": (cfg.d,) for l in range(cfg.layers)
            for n in ("norm1", "norm2") for stat in ("mean", "var")}


_FAN_IN = {"b_v": "W_v", "b_p": "W_p", "F_1.bias": "F_1", "F_2.bias": "F_2", "proj.bias": "proj",
           "classifier.bias": "classifier", "b_flat": "W_flat", "b_chan": "W_chan"}


@dataclass
class ModelParams:
    """All learnable tensors (``tensors``) plus batch-norm running statistics
    (``buffers``) for one configuration."""

    config: EgtConfig
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EgtConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        shapes = param_shapes(config)
        tensors = {}
        for name, shape in shapes.items():
            if ".scale." in name:
                tensors[name] = np.ones(shape)
            elif ".shift." in name:
                tensors[name] = np.zeros(shape)
            else:
                ref = shapes[_FAN_IN.get(name, name)]
                bound = 1.0 / math.sqrt(ref[-1])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        buffers = {n: (np.zeros(s) if ".mean." in n else np.ones(s)) for n, s in buffer_shapes(config).items()}
        return cls(config, tensors, buffers)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of config, tensors and buffers."""
        return (self.config == other.config
                and self.tensors.keys() == other.tensors.keys()
                and self.buffers.keys() == other.buffers.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
                and all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items()))

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class ForwardResult:
    S: Var  # (B, d)
    snapshots: Var | None  # (B, f, d)
    nodes: Var | None  # (B, f, J, d)
    batch_stats: dict[str, np.ndarray]  # train-mode batch-norm statistics


# ---------------------------------------------------------------------------
# Tape-level building blocks
# ---------------------------------------------------------------------------


def _embed(x, pe, p):
    """``(W_v v + b_v) + (W_p lambda + b_p)`` for nodes on the second-to-last axis."""
    return (matmul(x, p["W_v"].T) + p["b_v"]) + (matmul(pe, p["W_p"].T) + p["b_p"])


def _attention(h, l, p, mask=None, return_weights=False):
    """Full-relation multi-head attention on ``h`` of shape (G, J, d)."""
    G, J, d = h.shape
    Q, K, V = p[f"Q.{l}"], p[f"K.{l}"], p[f"V.{l}"]
    H, dk = Q.shape[0], Q.shape[1]
    h4 = reshape(h, (G, 1, J, d))
    q = matmul(h4, transpose(Q, (0, 2, 1)))  # (G, H, J, dk)
    k = matmul(h4, transpose(K, (0, 2, 1)))
    v = matmul(h4, transpose(V, (0, 2, 1)))
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    w = softmax_rows(logits, mask)
    heads = matmul(w, v)  # (G, H, J, dk)
    cat = reshape(transpose(heads, (0, 2, 1, 3)), (G, J, H * dk))
    out = matmul(cat, transpose(p[f"O.{l}"]))
    return (out, w) if return_weights else out


def _norm(x, p, name, l, buffers, train, stats):
    running = None if train else (buffers[f"{name}.mean.{l}"], buffers[f"{name}.var.{l}"])
    out, mu, var = batchnorm(x, p[f"{name}.scale.{l}"], p[f"{name}.shift.{l}"], running)
    if train:
        stats[f"{name}.mean.{l}"] = mu
        stats[f"{name}.var.{l}"] = var
    return out


def _ffn(h, h_att, l, p, buffers, train, stats):
    hb = _norm(h + h_att, p, "norm1", l, buffers, train, stats)
    ff = matmul(relu(matmul(hb, transpose(p[f"W_1.{l}"]))), transpose(p[f"W_2.{l}"]))
    return _norm(hb + ff, p, "norm2", l, buffers, train, stats)


def attention_mask(adjacency, J: int) -> np.ndarray:
    """Neighbourhood support for masked attention: graph edges plus self."""
    m = np.asarray(adjacency) != 0
    if m.shape != (J, J):
        raise ShapeError(f"mask adjacency must be ({J}, {J}), got {m.shape}")
    return m | np.eye(J, dtype=bool)


def forward(tape: Tape, p: dict, cfg: EgtConfig, features, pe=None, buffers=None,
            train: bool = False, mask=None) -> ForwardResult:
    """Encode a batch of sequences.

    ``features`` has shape (B, f, J, 3); ``p`` maps parameter names to Vars or
    arrays on ``tape``; ``pe`` is the (J, K) positional-encoding matrix.
    """
    x = tape.lift(features)
    if x.ndim != 4 or x.shape[1:] != (cfg.f, cfg.J, N_NODE_FEATURES):
        raise ShapeError(f"features must be (B, {cfg.f}, {cfg.J}, 3), got {x.shape}")
    B = x.shape[0]
    stats: dict[str, np.ndarray] = {}
    if cfg.kind == "flat":
        flat = reshape(x.mean(axis=1), (B, cfg.J * N_NODE_FEATURES))
        return ForwardResult(matmul(flat, transpose(p["W_flat"])) + p["b_flat"], None, None, stats)
    if cfg.kind == "channel":
        per = matmul(x, transpose(p["W_chan"])) + p["b_chan"]
        return ForwardResult(per.mean(axis=(1, 2)), None, None, stats)
    if pe is None:
        raise ValidationError("the graph transformer needs positional encodings")
    if train and B * cfg.f * cfg.J < 2:
        raise DegenerateBatchError("train-mode batch normalisation needs >= 2 rows")
    G = B * cfg.f
    h = _embed(reshape(x, (G, cfg.J, N_NODE_FEATURES)), tape.lift(pe), p)
    for l in range(cfg.layers):
        h = _ffn(h, _attention(h, l, p, mask), l, p, buffers, train, stats)
    snaps = reshape(h.mean(axis=1), (B, cfg.f, cfg.d))
    return ForwardResult(snaps.mean(axis=1), snaps, reshape(h, (B, cfg.f, cfg.J, cfg.d)), stats)


def update_running_stats(params: ModelParams, batch_stats: dict[str, np.ndarray],
                         momentum: float = NORM_MOMENTUM) -> None:
    for name, value in batch_stats.items():
        params.buffers[name] = momentum * params.buffers[name] + (1.0 - momentum) * value


def lift_params(tape: Tape, params: ModelParams, track: bool = False) -> dict[str, Var]:
    make = tape.variable if track else tape.constant
    return {k: make(v) for k, v in params.tensors.items()}


def _mask_for(cfg: EgtConfig, adjacency):
    if cfg.masked:
        if adjacency is None:
            raise ValidationError("masked attention needs an adjacency matrix")
        return attention_mask(adjacency, cfg.J)
    return None


# ---------------------------------------------------------------------------
# Array-level operations
# ---------------------------------------------------------------------------


def embed_nodes(snapshot, pe, params: ModelParams) -> np.ndarray:
    """Position-enhanced node embedding of one (J, 3) snapshot -> (J, d)."""
    v = np.asarray(snapshot, dtype=np.float64)
    lam = np.asarray(getattr(pe, "vectors", pe), dtype=np.float64)
    if v.shape[0] != lam.shape[0]:
        raise ShapeError(f"snapshot has {v.shape[0]} nodes, positional encodings {lam.shape[0]}")
    t = Tape()
    return _embed(t.constant(v), t.constant(lam), lift_params(t, params)).value


def fr_attention_layer(h, layer: int, params: ModelParams, adjacency=None, return_weights=False):
    """One full-relation attention layer on a (J, d) node matrix.

    With ``adjacency`` given, each node attends only to its neighbours and
    itself. ``return_weights`` adds the (H, J, J) attention weights.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.config.d:
        raise ShapeError(f"node matrix must be (J, {params.config.d}), got {h.shape}")
    mask = None if adjacency is None else attention_mask(adjacency, h.shape[0])
    t = Tape()
    out, w = _attention(t.constant(h[None]), layer, lift_params(t, params), mask, return_weights=True)
    return (out.value[0], w.value[0]) if return_weights else out.value[0]


def ffn_block(h, h_att, layer: int, params: ModelParams, mode: str = "eval") -> np.ndarray:
    """Residual batch-normalised FFN: ``Norm(hb + W_2 relu(W_1 hb))`` with
    ``hb = Norm(h + h_att)``. Train mode normalises with the statistics of the
    given nodes; eval mode with the running statistics."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    t = Tape()
    out = _ffn(t.constant(np.asarray(h, dtype=np.float64)), t.constant(np.asarray(h_att, dtype=np.float64)),
               layer, lift_params(t, params), params.buffers, mode == "train", {})
    return out.value


@dataclass(frozen=True)
class SequenceRepresentation:
    S: np.ndarray  # (d,)
    snapshots: np.ndarray  # (f, d)
    nodes: np.ndarray  # (f, J, d)


def encode_sequence(snapshots, pe, params: ModelParams, adjacency=None, mode: str = "eval") -> SequenceRepresentation:
    """Encode the f node-feature snapshots of one sequence."""
    snaps = [np.asarray(s, dtype=np.float64) for s in snapshots]
    if not snaps:
        raise ValidationError("empty snapshot list")
    cfg = params.config
    if len(snaps) != cfg.f:
        raise ShapeError(f"expected {cfg.f} snapshots, got {len(snaps)}")
    lam = getattr(pe, "vectors", pe)
    t = Tape()
    res = forward(t, lift_params(t, params), cfg, np.stack(snaps)[None], lam, params.buffers,
                  train=(mode == "train"), mask=_mask_for(cfg, adjacency))
    return SequenceRepresentation(res.S.value[0], res.snapshots.value[0], res.nodes.value[0])


def represent(params: ModelParams, features, pe=None, adjacency=None, batch_size: int = 256) -> np.ndarray:
    """Eval-mode sequence representations S for a (N, f, J, 3) feature array.

    ``pe`` may be a raw (J, K) array or anything with a ``vectors`` attribute.
    """
    features = np.asarray(features, dtype=np.float64)
    pe = getattr(pe, "vectors", pe)
    out = []
    for i in range(0, len(features), batch_size):
        t = Tape()
        res = forward(t, lift_params(t, params), params.config, features[i:i + batch_size], pe,
                      params.buffers, train=False, mask=_mask_for(params.config, adjacency))
        out.append(res.S.value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.d))


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"EGT1"
CONTAINER_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<I", "tensor name length")
        if n > 1024:
            raise MalformedHeaderError("implausible tensor name length")
        name = self.take(n, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = self.unpack("<I", f"rank of {name}")
        if ndim > 8:
            raise MalformedHeaderError(f"implausible rank {ndim} for {name}")
        shape = self.unpack(f"<{ndim}Q", f"shape of {name}")
        (count,) = self.unpack("<Q", f"length of {name}")
        if count != int(np.prod(shape, dtype=np.int64)):
            raise ShapeMismatchError(f"tensor {name}: payload length {count} does not match shape {shape}")
        arr = np.frombuffer(self.take(8 * count, f"payload of {name}"), dtype="<f8").reshape(shape)
        return name, arr.astype(np.float64)


def write_container(fh, magic: bytes, config: EgtConfig, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header, JSON metadata and tensors, followed by a CRC-32 of everything before it."""
    body = io.BytesIO()
    ints = config.header_ints()
    body.write(magic)
    body.write(struct.pack("<II", CONTAINER_VERSION, len(ints)))
    body.write(struct.pack(f"<{len(ints)}q", *ints))
    raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    body.write(struct.pack("<Q", len(raw)))
    body.write(raw)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(body, name, arr)
    data = body.getvalue()
    fh.write(data)
    fh.write(struct.pack("<I", zlib.crc32(data)))


def read_container(data: bytes, magic: bytes, expected: EgtConfig | None = None):
    head = data[:len(magic)]
    if head != magic[:len(head)]:
        raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")
    # the structure is parsed before the checksum is compared, so truncation
    # reports as such rather than as a checksum failure
    if len(data) < len(magic) + 4:
        raise TruncatedFileError(f"file has only {len(data)} bytes")
    data, crc = data[:-4], data[-4:]
    r = _Reader(data)
    r.take(len(magic), "magic")
    version, n_ints = r.unpack("<II", "header")
    if version != CONTAINER_VERSION:
        raise MalformedHeaderError(f"unsupported container version {version}")
    if n_ints > 64:
        raise MalformedHeaderError("implausible header size")
    config = EgtConfig.from_header_ints(r.unpack(f"<{n_ints}q", "config header"))
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"corrupt metadata: {exc}") from None
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        name, arr = r.tensor()
        tensors[name] = arr
    if r.pos != len(data):
        raise ShapeMismatchError(f"{len(data) - r.pos} unexpected trailing bytes")
    if struct.unpack("<I", crc)[0] != zlib.crc32(data):
        raise ChecksumError("checksum mismatch: the file is corrupt")
    if expected is not None and config != expected:
        _check_shapes(tensors, {**param_shapes(expected), **buffer_shapes(expected)}, "checkpoint")
        raise ShapeMismatchError(f"checkpoint config {config} does not match expected {expected}")
    return config, meta, tensors


def _check_shapes(tensors: dict, shapes: dict, what: str) -> None:
    for name, shape in shapes.items():
        if name not in tensors:
            raise ShapeMismatchError(f"{what} tensor {name} missing")
        if tensors[name].shape != tuple(shape):
            raise ShapeMismatchError(f"{what} tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}")


def params_from_tensors(config: EgtConfig, tensors: dict) -> ModelParams:
    shapes, bshapes = param_shapes(config), buffer_shapes(config)
    _check_shapes(tensors, shapes, "parameter")
    _check_shapes(tensors, bshapes, "buffer")
    return ModelParams(config, {k: tensors[k].copy() for k in shapes}, {k: tensors[k].copy() for k in bshapes})


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        write_container(fh, MODEL_MAGIC, params.config, {**params.tensors, **params.buffers})


def load_params(path, expected: EgtConfig | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    config, _, tensors = read_container(data, MODEL_MAGIC, expected)
    return params_from_tensors(config, tensors)


def params_to_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    write_container(buf, MODEL_MAGIC, params.config, {**params.tensors, **params.buffers})
    return buf.getvalue()
