"""Graph-transformer EEG encoder with archetype-contrastive training, in numpy."""

__version__ = "0.1.0"
