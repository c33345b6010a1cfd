"""Training loop, optimizers, checkpoints and the ablation matrix."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .encoder import (
    MODEL_MAGIC,
    EgtConfig,
    ModelParams,
    _mask_for,
    forward,
    lift_params,
    params_from_tensors,
    read_container,
    represent,
    update_running_stats,
    write_container,
)
from .errors import DivergenceError, MalformedHeaderError, ShapeMismatchError, ValidationError
from .evaluation import class_scores, rank_scores, retrieval_metrics, topk_accuracy
from .objectives import (
    ArchetypeBank,
    ClassEmbeddingTable,
    LossConfig,
    alignment_loss,
    compute_archetypes,
    cross_entropy_loss,
    gac_channel_loss,
    gac_loss,
    gac_seq_loss,
)
from .tensor_core import Tape

# kind: encoder; align/gac/ce: which loss terms are active; scorer: how test
# trials are ranked against the classes.
ABLATIONS = {
    "baseline": dict(kind="flat", align=False, gac=False, ce=True, scorer="classifier"),
    "NC": dict(kind="flat", align=True, gac=False, ce=False, scorer="zero_shot"),
    "EGT_NC": dict(kind="egt", align=False, gac=False, ce=True, scorer="classifier"),
    "EGT_GAC": dict(kind="egt", align=True, gac=True, ce=False, scorer="zero_shot"),
}

LOSS_COLUMNS = ("step", "loss_total", "loss_align", "loss_gac_seq", "loss_gac_ch", "loss_ce")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ablation: str = "EGT_GAC"
    class_balanced: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch size must be >= 2 (batch normalisation)")
        if self.lr < 0:
            raise ValidationError("learning rate must be non-negative")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")

    @property
    def flags(self) -> dict:
        return ABLATIONS[self.ablation]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params.tensors[k] = params.tensors[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> tuple[dict, dict]:
        return {"t": self.t}, {**{f"opt.m.{k}": v for k, v in self.m.items()},
                               **{f"opt.v.{k}": v for k, v in self.v.items()}}

    def load(self, meta: dict, tensors: dict) -> None:
        self.t = int(meta["t"])
        self.m = {k: tensors[f"opt.m.{k}"].copy() for k in self.m}
        self.v = {k: tensors[f"opt.v.{k}"].copy() for k in self.v}


class SGD:
    def __init__(self, params: ModelParams, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict) -> None:
        for k, g in grads.items():
            self.velocity[k] = self.momentum * self.velocity[k] + g
            params.tensors[k] = params.tensors[k] - self.lr * self.velocity[k]

    def state(self) -> tuple[dict, dict]:
        return {}, {f"opt.velocity.{k}": v for k, v in self.velocity.items()}

    def load(self, meta: dict, tensors: dict) -> None:
        self.velocity = {k: tensors[f"opt.velocity.{k}"].copy() for k in self.velocity}


def make_optimizer(cfg: TrainConfig, params: ModelParams):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(params, cfg.lr, cfg.momentum)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def total_loss(tape: Tape, p: dict, params: ModelParams, features, labels, *, flags: dict, loss_cfg: LossConfig,
               pe=None, bank: ArchetypeBank | None = None, table: ClassEmbeddingTable | None = None,
               train: bool = True, mask=None):
    """``beta_align * L_align + beta_gac * L_GAC (+ L_CE)`` for one batch.

    Returns ``(total, parts, batch_stats)`` where ``parts`` maps the loss
    column names to scalar Vars (absent terms are omitted).
    """
    cfg = params.config
    res = forward(tape, p, cfg, features, pe, params.buffers, train=train, mask=mask)
    parts = {}
    total = None

    def acc(term, weight):
        nonlocal total
        term = term * weight if weight != 1.0 else term
        total = term if total is None else total + term

    if flags["align"]:
        parts["loss_align"] = alignment_loss(res.S, labels, table, loss_cfg.tau_align,
                                             {"proj": p["proj"], "proj.bias": p["proj.bias"]})
        acc(parts["loss_align"], loss_cfg.beta_align)
    if flags["gac"]:
        if bank is None:
            raise ValidationError("GAC loss needs an archetype bank")
        parts["loss_gac_seq"] = gac_seq_loss(res.S, labels, bank, loss_cfg.tau1, loss_cfg.cosine)
        heads = {k: p[k] for k in ("F_1", "F_1.bias", "F_2", "F_2.bias")}
        parts["loss_gac_ch"] = gac_channel_loss(res.snapshots, labels, bank, heads, loss_cfg.tau2, loss_cfg.cosine)
        acc(gac_loss(parts["loss_gac_seq"], parts["loss_gac_ch"], loss_cfg.alpha), loss_cfg.beta_gac)
    if flags["ce"]:
        parts["loss_ce"] = cross_entropy_loss(res.S, labels, {"classifier": p["classifier"],
                                                               "classifier.bias": p["classifier.bias"]})
        acc(parts["loss_ce"], 1.0)
    if total is None:
        raise ValidationError("configuration enables no loss term")
    return total, parts, res.batch_stats


# ---------------------------------------------------------------------------
# Training state and loop
# ---------------------------------------------------------------------------


def _batches(n: int, size: int) -> list[tuple[int, int]]:
    """Consecutive [start, stop) chunks; a trailing single sample joins the previous chunk."""
    bounds = [(i, min(i + size, n)) for i in range(0, n, size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


class Trainer:
    """Owns parameters, optimizer, shuffling RNG and logs for one run.

    ``features`` is the (N, f, J, 3) node-feature array of the whole dataset;
    ``train_idx`` / ``test_idx`` select trials from it.
    """

    def __init__(self, model_cfg: EgtConfig, cfg: TrainConfig, features, labels, subjects, train_idx, test_idx,
                 *, pe=None, table: ClassEmbeddingTable | None = None, adjacency=None):
        flags = cfg.flags
        if model_cfg.kind != flags["kind"]:
            model_cfg = replace(model_cfg, kind=flags["kind"])
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.flags = flags
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.subjects = np.asarray(subjects, dtype=np.int64)
        self.train_idx = np.asarray(train_idx, dtype=np.int64)
        self.test_idx = np.asarray(test_idx, dtype=np.int64)
        if len(self.train_idx) < 2:
            raise ValidationError("need at least two training trials")
        self.pe = None if pe is None else np.asarray(getattr(pe, "vectors", pe), dtype=np.float64)
        if model_cfg.kind == "egt" and self.pe is None:
            raise ValidationError("the graph transformer needs positional encodings")
        if flags["align"] and table is None:
            raise ValidationError("alignment loss needs a class embedding table")
        self.table = table
        self.adjacency = adjacency
        self.mask = _mask_for(model_cfg, adjacency)
        self.params = ModelParams.init(model_cfg, seed=cfg.seed)
        self.optimizer = make_optimizer(cfg, self.params)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.epoch = 0
        self.step_count = 0
        self.order: np.ndarray | None = None
        self.cursor = 0
        self.epoch_start = 0  # step count when the current epoch began
        self.bank: ArchetypeBank | None = None
        self.loss_log: list[tuple] = []
        self.epoch_log: list[tuple] = []

    # -- evaluation helpers -------------------------------------------------

    def represent(self, idx) -> np.ndarray:
        return represent(self.params, self.features[np.asarray(idx)], self.pe, self.adjacency)

    def top1(self, idx) -> float:
        idx = np.asarray(idx)
        if len(idx) == 0:
            return float("nan")
        scores = class_scores(self.represent(idx), self.params, self.table, self.flags["scorer"])
        preds = [rank_scores(s, int(y)) for s, y in zip(scores, self.labels[idx])]
        return topk_accuracy(preds, (1,))[1]

    def refresh_archetypes(self) -> ArchetypeBank:
        S = self.represent(self.train_idx)
        self.bank = compute_archetypes(S, self.labels[self.train_idx], self.model_cfg.n_classes, self.epoch)
        return self.bank

    # -- stepping ------------------------------------------------------------

    def _epoch_order(self) -> np.ndarray:
        if not self.cfg.class_balanced:
            return self.rng.permutation(self.train_idx)
        # round-robin over shuffled per-class queues
        labels = self.labels[self.train_idx]
        queues = [list(self.rng.permutation(self.train_idx[labels == c])) for c in np.unique(labels)]
        out = []
        while any(queues):
            for q in queues:
                if q:
                    out.append(q.pop(0))
        return np.array(out, dtype=np.int64)

    def begin_epoch(self) -> None:
        if self.flags["gac"]:
            self.refresh_archetypes()
        self.order = self._epoch_order()
        self.cursor = 0
        self.epoch_start = self.step_count

    def step(self, idx) -> dict[str, float]:
        idx = np.asarray(idx)
        tape = Tape()
        p = lift_params(tape, self.params, track=True)
        # overflow is caught below by the finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            total, parts, stats = total_loss(
                tape, p, self.params, self.features[idx], self.labels[idx], flags=self.flags,
                loss_cfg=self.cfg.loss, pe=self.pe, bank=self.bank, table=self.table, train=True, mask=self.mask)
            value = float(total.value)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {self.step_count}",
                                      last_good=self.to_bytes())
            grads = tape.backward(total, p)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite gradient at step {self.step_count}", last_good=self.to_bytes())
        self.optimizer.step(self.params, grads)
        update_running_stats(self.params, stats)
        self.step_count += 1
        row = {"loss_total": value, **{k: float(v.value) for k, v in parts.items()}}
        self.loss_log.append((self.step_count, *(row.get(c, float("nan")) for c in LOSS_COLUMNS[1:])))
        return row

    def step_next(self) -> dict[str, float] | None:
        """Run the next mini-batch of the current epoch (starting one if needed).

        Returns ``None`` when the epoch has no batches left.
        """
        if self.order is None:
            self.begin_epoch()
        for start, stop in _batches(len(self.order), self.cfg.batch_size):
            if start == self.cursor:
                self.cursor = stop
                return self.step(self.order[start:stop])
        return None

    def run_epoch(self) -> tuple:
        if self.order is None:
            self.begin_epoch()
        while self.step_next() is not None:
            pass
        # from the log, so an epoch resumed from a checkpoint still averages every step
        losses = [row[1] for row in self.loss_log if row[0] > self.epoch_start]
        self.epoch += 1
        entry = (self.epoch, float(np.mean(losses)) if losses else float("nan"), self.top1(self.test_idx))
        self.epoch_log.append(entry)
        self.order = None
        return entry

    def fit(self, log=None) -> "Trainer":
        while self.epoch < self.cfg.epochs:
            entry = self.run_epoch()
            if log is not None:
                log(entry)
        return self

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        opt_meta, opt_tensors = self.optimizer.state()
        tensors = {**self.params.tensors, **self.params.buffers, **opt_tensors}
        meta = {
            "kind": "train_state",
            "train_config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "step": self.step_count,
            "cursor": self.cursor,
            "epoch_start": self.epoch_start,
            "order": None if self.order is None else [int(i) for i in self.order],
            "rng": self.rng.bit_generator.state,
            "optimizer": opt_meta,
            "loss_log": [list(r) for r in self.loss_log],
            "epoch_log": [list(r) for r in self.epoch_log],
        }
        if self.bank is not None:
            tensors["bank.archetypes"] = self.bank.archetypes
            meta["bank"] = {"n_classes": self.bank.n_classes, "classes": list(self.bank.classes),
                            "counts": list(self.bank.counts), "epoch_tag": self.bank.epoch_tag}
        buf = io.BytesIO()
        write_container(buf, MODEL_MAGIC, self.params.config, tensors, meta)
        return buf.getvalue()

    def restore(self, data: bytes) -> "Trainer":
        config, meta, tensors = read_container(data, MODEL_MAGIC, self.model_cfg)
        if meta.get("kind") != "train_state":
            raise MalformedHeaderError("file holds model parameters only, not a training state")
        try:
            self.params = params_from_tensors(config, tensors)
            self.optimizer.load(meta["optimizer"], tensors)
            self.epoch = int(meta["epoch"])
            self.step_count = int(meta["step"])
            self.cursor = int(meta["cursor"])
            self.epoch_start = int(meta["epoch_start"])
            self.order = None if meta["order"] is None else np.array(meta["order"], dtype=np.int64)
            self.rng.bit_generator.state = meta["rng"]
            self.loss_log = [tuple(r) for r in meta["loss_log"]]
            self.epoch_log = [tuple(r) for r in meta["epoch_log"]]
            if "bank" in meta:
                b = meta["bank"]
                self.bank = ArchetypeBank(b["n_classes"], tuple(b["classes"]), tensors["bank.archetypes"].copy(),
                                          tuple(b["counts"]), b["epoch_tag"])
            else:
                self.bank = None
        except KeyError as exc:
            raise ShapeMismatchError(f"checkpoint is missing {exc.args[0]}") from None
        return self

    # -- logs ------------------------------------------------------------------

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for row in self.loss_log:
                w.writerow([row[0], *(format(v, ".17g") for v in row[1:])])

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss_mean", "eval_top1"])
            for e, loss, top1 in self.epoch_log:
                w.writerow([e, format(loss, ".17g"), format(top1, ".17g")])


def save_checkpoint(trainer: Trainer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trainer.to_bytes())


def load_checkpoint(trainer: Trainer, path) -> Trainer:
    with open(path, "rb") as fh:
        return trainer.restore(fh.read())


def train(model_cfg: EgtConfig, cfg: TrainConfig, features, labels, subjects, split, *, pe=None, table=None,
          adjacency=None, log=None) -> Trainer:
    """Build a :class:`Trainer` for ``split`` and run every epoch."""
    return Trainer(model_cfg, cfg, features, labels, subjects, split.train, split.test, pe=pe, table=table,
                   adjacency=adjacency).fit(log)


@dataclass(frozen=True)
class AblationRow:
    name: str
    mAP: float
    rank1: float
    top1: float
    per_subject: dict  # subject -> (mAP, rank1)


def run_ablation(model_cfg: EgtConfig, cfg: TrainConfig, features, labels, subjects, split, *, pe, table,
                 adjacency=None, names=tuple(ABLATIONS), log=None) -> list[AblationRow]:
    """Train each ablation configuration on ``split`` and score the sequence
    representations of its test trials by leave-one-out retrieval."""
    rows = []
    subjects = np.asarray(subjects)
    for name in names:
        t = train(model_cfg, replace(cfg, ablation=name), features, labels, subjects, split, pe=pe, table=table,
                  adjacency=adjacency)
        S = t.represent(split.test)
        test_labels = np.asarray(labels)[split.test]
        test_subjects = subjects[split.test]
        overall = retrieval_metrics(S, test_labels)
        per = {}
        for s in np.unique(test_subjects):
            m = test_subjects == s
            r = retrieval_metrics(S[m], test_labels[m])
            per[int(s)] = (r.mAP, r.rank1)
        row = AblationRow(name, overall.mAP, overall.rank1, t.top1(split.test), per)
        if log is not None:
            log(row)
        rows.append(row)
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "subject", "mAP", "rank1"])
        for r in rows:
            for s, (m, r1) in sorted(r.per_subject.items()):
                w.writerow([r.name, s, format(m, ".17g"), format(r1, ".17g")])
            w.writerow([r.name, "all", format(r.mAP, ".17g"), format(r.rank1, ".17g")])
