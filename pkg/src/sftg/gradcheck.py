"""Finite-difference check of the full training objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EgtConfig, ModelParams, lift_params, represent
from .graph import Adjacency, normalized_laplacian, positional_encodings
from .objectives import ClassEmbeddingTable, LossConfig, compute_archetypes
from .tensor_core import Tape, finite_diff_gradient
from .trainer import total_loss

TINY = EgtConfig(d=6, heads=2, d_k=3, layers=2, K=2, f=2, n_classes=3, d_e=4, J=4)
# every loss term on, so every parameter receives a gradient
ALL_TERMS = dict(kind="egt", align=True, gac=True, ce=True)


def _tiny_problem(seed: int):
    rng = np.random.default_rng(seed)
    params = ModelParams.init(TINY, seed=seed)
    path = np.zeros((4, 4))
    for i in range(3):
        path[i, i + 1] = path[i + 1, i] = 1.0
    pe = positional_encodings(normalized_laplacian(Adjacency(path, "spatial")), TINY.K).vectors
    features = rng.standard_normal((6, TINY.f, TINY.J, 3))
    labels = np.array([0, 1, 2, 0, 1, 2])
    table = ClassEmbeddingTable.random(TINY.n_classes, TINY.d_e, seed)
    bank = compute_archetypes(represent(params, features, pe), labels, TINY.n_classes)
    return params, pe, features, labels, table, bank


def relative_errors(analytic, numeric, atol: float = 1e-7) -> np.ndarray:
    """Relative error per entry, zeroed where the absolute difference is within ``atol``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(a - n)
    mag = np.maximum(np.maximum(np.abs(a), np.abs(n)), np.finfo(float).tiny)
    return np.where(diff <= atol, 0.0, diff / mag)


@dataclass(frozen=True)
class GradientComparison:
    rel_error: float  # worst entry, after the absolute floor
    max_abs_diff: float
    max_rel_large: float  # worst plain relative error among entries with |grad| >= 1e-3
    max_abs_grad: float


def tiny_gradient_report(seed: int = 0, h: float = 1e-5, loss_cfg: LossConfig | None = None,
                         atol: float = 1e-7) -> dict[str, GradientComparison]:
    """Analytic vs central-difference gradients of the total loss, per tensor."""
    loss_cfg = loss_cfg or LossConfig()
    params, pe, x, y, table, bank = _tiny_problem(seed)

    def objective(tensors):
        q = ModelParams(TINY, tensors, {k: v.copy() for k, v in params.buffers.items()})
        tape = Tape()
        total, _, _ = total_loss(tape, lift_params(tape, q), q, x, y, flags=ALL_TERMS, loss_cfg=loss_cfg,
                                 pe=pe, bank=bank, table=table)
        return float(total.value)

    tape = Tape()
    p = lift_params(tape, params, track=True)
    total, _, _ = total_loss(tape, p, params, x, y, flags=ALL_TERMS, loss_cfg=loss_cfg, pe=pe, bank=bank,
                             table=table)
    analytic = tape.backward(total, p)
    numeric = finite_diff_gradient(objective, {k: v.copy() for k, v in params.tensors.items()}, h)
    out = {}
    for k in params.tensors:
        a, n = analytic[k], numeric[k]
        diff = np.abs(a - n)
        mag = np.maximum(np.abs(a), np.abs(n))
        large = mag >= 1e-3
        out[k] = GradientComparison(
            float(relative_errors(a, n, atol).max()), float(diff.max()),
            float((diff[large] / mag[large]).max()) if large.any() else 0.0, float(mag.max()))
    return out


def tiny_gradient_check(seed: int = 0, h: float = 1e-5, loss_cfg: LossConfig | None = None) -> dict[str, float]:
    """Worst per-tensor relative error of analytic vs central-difference gradients."""
    return {k: c.rel_error for k, c in tiny_gradient_report(seed, h, loss_cfg).items()}
