"""Glue from a :class:`RunConfig` to features, graph, split and trainers."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .data import DatasetSplit, EegDataset, dataset_features, generate_synthetic_dataset, make_split
from .encoder import EgtConfig
from .errors import ValidationError
from .graph import (
    Adjacency,
    ElectrodeLayout,
    PositionalEncodings,
    build_graph,
    normalized_laplacian,
    positional_encodings,
    standard_layout,
)
from .objectives import ClassEmbeddingTable
from .trainer import Trainer, run_ablation


@dataclass
class Experiment:
    config: RunConfig
    dataset: EegDataset
    layout: ElectrodeLayout
    adjacency: Adjacency
    pe: PositionalEncodings
    features: np.ndarray  # (N, f, J, 3)
    split: DatasetSplit
    table: ClassEmbeddingTable

    @property
    def model_config(self) -> EgtConfig:
        return self.config.model

    def trainer(self, **train_overrides) -> Trainer:
        cfg = replace(self.config.train, **train_overrides)
        return Trainer(self.config.model, cfg, self.features, self.dataset.labels, self.dataset.subjects,
                       self.split.train, self.split.test, pe=self.pe, table=self.table,
                       adjacency=self.adjacency)

    def ablation(self, log=None):
        return run_ablation(self.config.model, self.config.train, self.features, self.dataset.labels,
                            self.dataset.subjects, self.split, pe=self.pe, table=self.table,
                            adjacency=self.adjacency, log=log)


def training_signals(ds: EegDataset, idx) -> np.ndarray:
    """Trials concatenated along time, (C, n * T), for functional connectivity."""
    return np.concatenate(list(ds.signals[np.asarray(idx)]), axis=1)


def prepare(cfg: RunConfig, dataset: EegDataset | None = None, layout: ElectrodeLayout | None = None) -> Experiment:
    """Generate (or take) the data, split it, and build graph, encodings and features.

    The functional part of the graph uses training trials only.
    """
    ds = dataset if dataset is not None else generate_synthetic_dataset(cfg.synth)
    layout = layout if layout is not None else standard_layout(ds.n_channels)
    if layout.J != ds.n_channels:
        raise ValidationError(f"layout has {layout.J} electrodes, dataset {ds.n_channels} channels")
    model = replace(cfg.model, J=ds.n_channels, n_classes=max(cfg.model.n_classes, ds.n_classes),
                    masked=cfg.graph.masked)
    if ds.n_samples < model.f:
        raise ValidationError(f"{ds.n_samples} samples cannot form {model.f} windows")
    cfg = replace(cfg, model=model)
    split = make_split(ds, cfg.split.protocol, cfg.split.subject, cfg.split.seed, cfg.split.train_fraction)
    adjacency = build_graph(layout, training_signals(ds, split.train), k=cfg.graph.k, radius=cfg.graph.radius,
                            threshold=cfg.graph.threshold)
    pe = positional_encodings(normalized_laplacian(adjacency), model.K)
    features = dataset_features(ds, model.f, ds.n_samples // model.f)
    table = ClassEmbeddingTable.random(model.n_classes, model.d_e, cfg.table_seed)
    return Experiment(cfg, ds, layout, adjacency, pe, features, split, table)
