"""Command-line entry point: ``sftg <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .data import load_dataset, save_dataset
from .encoder import MODEL_MAGIC, params_from_tensors, read_container, represent
from .errors import NumericalError, SftgError, ValidationError
from .evaluation import evaluate_topk, export_features, rsa_matrix, write_rsa_csv
from .graph import read_layout_csv, write_adjacency_csv, write_layout_csv
from .pipeline import Experiment, prepare
from .trainer import ABLATIONS, write_ablation_csv

DATASET_FILE = "dataset.eegd"
LAYOUT_FILE = "layout.csv"
CHECKPOINT_FILE = "model.ckpt"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "ablation", None):
        cfg = replace(cfg, train=replace(cfg.train, ablation=args.ablation))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


def _experiment(args, cfg: RunConfig) -> Experiment:
    out = Path(args.out)
    data_path = Path(args.data) if getattr(args, "data", None) else out / DATASET_FILE
    layout = read_layout_csv(args.layout) if getattr(args, "layout", None) else None
    if data_path.exists():
        return prepare(cfg, load_dataset(data_path, layout), layout)
    return prepare(cfg, layout=layout)


def _load_model(path):
    config, meta, tensors = read_container(Path(path).read_bytes(), MODEL_MAGIC)
    ablation = meta.get("train_config", {}).get("ablation", "EGT_GAC")
    return params_from_tensors(config, tensors), ablation


def cmd_gen_data(args, cfg: RunConfig) -> None:
    ex = prepare(cfg)
    save_dataset(ex.dataset, Path(args.out) / DATASET_FILE)
    write_layout_csv(ex.layout, Path(args.out) / LAYOUT_FILE)
    print(f"wrote {len(ex.dataset)} trials ({ex.dataset.n_channels} channels) to {args.out}")


def cmd_build_graph(args, cfg: RunConfig) -> None:
    ex = _experiment(args, cfg)
    out = Path(args.out)
    write_adjacency_csv(ex.adjacency, out / "adjacency.csv", ex.layout.names)
    with open(out / "pe.csv", "w", encoding="utf-8") as fh:
        fh.write("name," + ",".join(f"pe_{i}" for i in range(ex.pe.vectors.shape[1])) + "\n")
        for name, row in zip(ex.layout.names, ex.pe.vectors):
            fh.write(name + "," + ",".join(format(v, ".17g") for v in row) + "\n")
    print(f"{int(ex.adjacency.matrix.sum() // 2)} edges; eigenvalues "
          + " ".join(f"{v:.6f}" for v in ex.pe.eigenvalues))


def cmd_train(args, cfg: RunConfig) -> None:
    ex = _experiment(args, cfg)
    out = Path(args.out)
    trainer = ex.trainer()
    if args.resume:
        trainer.restore(Path(args.resume).read_bytes())
    try:
        trainer.fit(log=lambda e: print(f"epoch {e[0]:3d}  loss {e[1]:.6f}  top1 {e[2]:.4f}", flush=True))
    except NumericalError as exc:
        if getattr(exc, "last_good", None):
            (out / "last_good.ckpt").write_bytes(exc.last_good)
        raise
    finally:
        trainer.write_loss_csv(out / "losses.csv")
        trainer.write_metrics_csv(out / "metrics.csv")
    (out / CHECKPOINT_FILE).write_bytes(trainer.to_bytes())
    (out / "config.txt").write_text(dump_config(ex.config), encoding="utf-8")


def cmd_eval(args, cfg: RunConfig) -> None:
    ex = _experiment(args, cfg)
    params, ablation = _load_model(args.checkpoint or Path(args.out) / CHECKPOINT_FILE)
    test = ex.split.test
    res = evaluate_topk(params, ex.features[test], ex.dataset.labels[test], ex.dataset.subjects[test], ex.table,
                        k_list=(1, 5), pe=ex.pe, adjacency=ex.adjacency, scorer=ABLATIONS[ablation]["scorer"])
    rows = [("all", res["overall"])] + sorted(res["per_subject"].items())
    with open(Path(args.out) / "eval.csv", "w", encoding="utf-8") as fh:
        fh.write("subject,top1,top5\n")
        for s, acc in rows:
            fh.write(f"{s},{acc[1]:.17g},{acc[5]:.17g}\n")
    print(f"{'subject':>8} {'top1':>7} {'top5':>7}")
    for s, acc in rows:
        print(f"{s!s:>8} {acc[1]:7.4f} {acc[5]:7.4f}")


def cmd_ablate(args, cfg: RunConfig) -> None:
    ex = _experiment(args, cfg)
    print(f"{'config':>9} {'mAP':>7} {'R1':>7} {'top1':>7}")
    rows = ex.ablation(log=lambda r: print(f"{r.name:>9} {r.mAP:7.4f} {r.rank1:7.4f} {r.top1:7.4f}", flush=True))
    write_ablation_csv(rows, Path(args.out) / "ablation.csv")


def cmd_gradcheck(args, cfg: RunConfig) -> None:
    from .gradcheck import tiny_gradient_check

    worst = tiny_gradient_check(seed=cfg.train.seed)
    for name, err in worst.items():
        print(f"{name:>16} {err:.3e}")
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    if bad:
        raise NumericalError(f"gradient check failed for {sorted(bad)}")
    print("gradient check passed")


def _test_representations(args, cfg):
    ex = _experiment(args, cfg)
    params, _ = _load_model(args.checkpoint or Path(args.out) / CHECKPOINT_FILE)
    test = ex.split.test
    return ex, represent(params, ex.features[test], ex.pe, ex.adjacency), test


def cmd_rsa(args, cfg: RunConfig) -> None:
    ex, S, test = _test_representations(args, cfg)
    sim = rsa_matrix(S, ex.dataset.labels[test])
    write_rsa_csv(sim, Path(args.out) / "rsa.csv")
    print(np.array2string(sim.matrix, precision=3))


def cmd_export_features(args, cfg: RunConfig) -> None:
    ex, S, test = _test_representations(args, cfg)
    n = export_features(S, ex.dataset.subjects[test], ex.dataset.labels[test], Path(args.out) / "features.csv")
    print(f"wrote {n} rows")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "rsa": cmd_rsa,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="seed for data, split and training")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--data", help=f"dataset file (default: OUT/{DATASET_FILE}, generated if absent)")
    common.add_argument("--layout", help="electrode layout CSV (name,x,y,z)")

    parser = argparse.ArgumentParser(prog="sftg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--ablation", choices=sorted(ABLATIONS))
            p.add_argument("--epochs", type=int)
            p.add_argument("--resume", help="training-state checkpoint to continue from")
        if name in ("eval", "rsa", "export-features"):
            p.add_argument("--checkpoint", help=f"model checkpoint (default: OUT/{CHECKPOINT_FILE})")
        if name == "ablate":
            p.add_argument("--epochs", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (SftgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
