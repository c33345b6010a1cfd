"""Run configuration read from ``key=value`` files.

Keys are ``section.field`` (for example ``model.d=64``, ``train.lr=0.001``,
``loss.alpha=0.5``, ``synth.noise=2``, ``graph.k=4``). Blank lines and lines
starting with ``#`` are ignored. ``none`` clears an optional value.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace

from .data import SynthConfig
from .encoder import EgtConfig
from .errors import ValidationError
from .objectives import LossConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class GraphConfig:
    k: int | None = 4
    radius: float | None = None
    threshold: float | None = 0.7
    masked: bool = False


@dataclass(frozen=True)
class SplitConfig:
    protocol: str = "subject_dependent"
    subject: int | None = None  # None pools every subject
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: EgtConfig = field(default_factory=EgtConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    table_seed: int = 0  # class-embedding table

    def with_seed(self, seed: int) -> "RunConfig":
        """Use one seed for data generation, the split and training."""
        return replace(self, synth=replace(self.synth, seed=seed), split=replace(self.split, seed=seed),
                       train=replace(self.train, seed=seed))


_SECTIONS = {"synth": SynthConfig, "graph": GraphConfig, "model": EgtConfig, "train": TrainConfig,
             "split": SplitConfig, "loss": LossConfig}


def _coerce(raw: str, hint, key: str):
    text = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ValidationError(f"{key}: cannot read {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "table_seed":
            top["table_seed"] = _coerce(value, int, key)
            continue
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        hints = typing.get_type_hints(cls) if cls else {}
        if name not in hints or name == "loss":
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _coerce(value, hints[name], key)
    loss = replace(base.train.loss, **updates.pop("loss"))
    out = replace(base, train=replace(base.train, loss=loss), **top)
    for section, values in updates.items():
        if values:
            out = replace(out, **{section: replace(getattr(out, section), **values)})
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` for every field."""
    lines = []
    for section in ("synth", "graph", "model", "train", "split"):
        obj = getattr(cfg, section)
        for f in fields(obj):
            if f.name == "loss":
                continue
            lines.append(f"{section}.{f.name}={getattr(obj, f.name)}")
    for f in fields(cfg.train.loss):
        lines.append(f"loss.{f.name}={getattr(cfg.train.loss, f.name)}")
    lines.append(f"table_seed={cfg.table_seed}")
    return "\n".join(lines) + "\n"
