"""Command-line entry point: ``delaysnn train|eval|analyze|sweep|ablation``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import analyze_network
from .config import RunConfig
from .dataio import (Dataset, SyntheticSpec, gen_synthetic, load_checkpoint, load_dataset,
                     save_checkpoint, split_dataset)
from .errors import ConfigError, DelaySNNError, StateError
from .trainer import evaluate, format_metrics, train

log = logging.getLogger("delaysnn")

EXIT_USAGE = 2
SWEEP_FIELDS = ("synapses", "acc_mean", "acc_std", "mode")


class CommandError(DelaySNNError):
    pass


# -- data plumbing --------------------------------------------------------------

def load_source(args) -> Dataset:
    if args.data:
        parts = args.data.split(",")
        if len(parts) != 2:
            raise CommandError("--data expects 'features_path,labels_path'")
        return load_dataset(*parts)
    if args.synthetic:
        return gen_synthetic(SyntheticSpec.load(args.synthetic))
    raise CommandError("one of --data or --synthetic is required")


def check_fits(ds: Dataset, config: RunConfig) -> None:
    if ds.t_steps != config.t_steps or ds.n_channels != config.n_in:
        raise ConfigError(f"data is T={ds.t_steps} x C={ds.n_channels} but config has "
                          f"t_steps={config.t_steps}, n_in={config.n_in}")
    if ds.n_classes > config.n_out:
        raise ConfigError(f"data has {ds.n_classes} classes but config n_out={config.n_out}")


def prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def write_metrics(metrics, path) -> None:
    Path(path).write_text(format_metrics(metrics))


# -- experiment protocols ---------------------------------------------------------

def seeds_for(config: RunConfig, n_seeds: int):
    return [config.seed + k for k in range(n_seeds)]


def run_once(config: RunConfig, train_ds, test_ds, out_dir: Path | None):
    net, metrics = train(train_ds, test_ds, config)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, out_dir / "checkpoint")
        write_metrics(metrics, out_dir / "metrics.csv")
    best = max(row["test_acc"] for row in metrics) if metrics else float("nan")
    return net, best


def synapse_count(config: RunConfig) -> int:
    plan = config.sparsity
    return (plan.layer_target(config.n_in, config.n_hidden)
            + plan.layer_target(config.n_hidden, config.n_out))


def sweep_configs(config: RunConfig, mode: str, levels):
    """One config per level. Dense halves hidden neurons, sparse raises p."""
    levels = sorted(float(x) for x in levels)
    out = []
    if mode == "dense":
        if 0.0 not in levels:
            levels = [0.0] + levels
        for level in levels:
            hidden = max(1, int(np.floor(config.n_hidden * (1.0 - level))))
            out.append((level, config.replace(n_hidden=hidden, sparsity_mode="dense",
                                              sparsity_p=0.0)))
    elif mode == "sparse":
        sparse_mode = config.sparsity_mode if config.sparsity_mode in ("rigl", "random") else "rigl"
        for level in levels:
            out.append((level, config.replace(sparsity_mode=sparse_mode, sparsity_p=level)))
    else:
        raise CommandError(f"unknown sweep mode {mode!r}")
    return out


def run_sweep(config: RunConfig, mode: str, levels, train_ds, test_ds, out_dir: Path,
              n_seeds: int = 3):
    rows = []
    for level, cfg in sweep_configs(config, mode, levels):
        accs = []
        for seed in seeds_for(cfg, n_seeds):
            run_dir = out_dir / f"{mode}_{level:g}_seed{seed}"
            _, best = run_once(cfg.replace(seed=seed), train_ds, test_ds, run_dir)
            accs.append(best)
            log.info("sweep %s level %g seed %d -> %.4f", mode, level, seed, best)
        rows.append({"synapses": synapse_count(cfg), "acc_mean": float(np.mean(accs)),
                     "acc_std": float(np.std(accs)), "mode": mode, "level": level,
                     "runs": accs})
    with open(out_dir / f"sweep_{mode}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for row in rows:
            writer.writerow([row["synapses"], repr(row["acc_mean"]), repr(row["acc_std"]), mode])
    return rows


ABLATION_CONDITIONS = (
    ("fixed", "fixed"),
    ("fixed", "learned"),
    ("learned", "fixed"),
    ("learned", "learned"),
)


def ablation_fields(n_seeds: int):
    return ("structure", "delays", "acc_mean", "acc_std") + tuple(f"acc_seed{k}" for k in range(n_seeds))


def run_ablation(config: RunConfig, train_ds, test_ds, out_dir: Path, n_seeds: int = 3):
    """Structure learning x delay learning, Dale off, weights always trained."""
    rows = []
    for structure, delays in ABLATION_CONDITIONS:
        cfg = config.replace(
            sparsity_mode="rigl" if structure == "learned" else "fixed",
            learn_delays=delays == "learned",
            dale=False,
        )
        accs = []
        for seed in seeds_for(cfg, n_seeds):
            run_dir = out_dir / f"structure-{structure}_delays-{delays}_seed{seed}"
            _, best = run_once(cfg.replace(seed=seed), train_ds, test_ds, run_dir)
            accs.append(best)
        rows.append({"structure": structure, "delays": delays, "acc_mean": float(np.mean(accs)),
                     "acc_std": float(np.std(accs)), "runs": accs})
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ablation_fields(n_seeds))
        for row in rows:
            writer.writerow([row["structure"], row["delays"], repr(row["acc_mean"]),
                             repr(row["acc_std"])] + [repr(a) for a in row["runs"]])
    return rows


# -- commands ---------------------------------------------------------------------

def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def cmd_train(args) -> int:
    config = _config(args)
    ds = load_source(args)
    check_fits(ds, config)
    out = prepare_out(args.out)
    train_ds, test_ds = split_dataset(ds, config.test_fraction, config.seed)
    net, metrics = train(train_ds, test_ds, config, checkpoint_dir=out / "checkpoint")
    if not metrics:
        save_checkpoint(net, out / "checkpoint")
    write_metrics(metrics, out / "metrics.csv")
    final = metrics[-1]["test_acc"] if metrics else evaluate(net, test_ds)
    print(f"final test accuracy: {final:.4f}")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = load_source(args)
    try:
        check_fits(ds, net.config)
    except ConfigError as exc:
        raise StateError(f"checkpoint/data mismatch: {exc}") from None
    if args.split == "test":
        _, ds = split_dataset(ds, net.config.test_fraction, net.config.seed)
    round_delays = True if args.round_delays else None
    acc = evaluate(net, ds, round_delays=round_delays)
    print(f"accuracy: {acc:.4f}")
    return 0


def cmd_analyze(args) -> int:
    net = load_checkpoint(args.checkpoint)
    out = prepare_out(args.out)
    report = analyze_network(net, out)
    for k, v in enumerate(report.morans):
        print(f"class {k}: {'undefined' if v is None else f'{v:.4f}'}")
    print(f"mean Moran's I: {report.mean:.4f} (max class {report.argmax}, min class {report.argmin})")
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    ds = load_source(args)
    check_fits(ds, config)
    out = prepare_out(args.out)
    try:
        levels = [float(x) for x in args.levels.split(",") if x.strip()]
    except ValueError:
        raise CommandError(f"bad --levels {args.levels!r}") from None
    if not levels:
        raise CommandError("--levels is empty")
    train_ds, test_ds = split_dataset(ds, config.test_fraction, config.seed)
    rows = run_sweep(config, args.mode, levels, train_ds, test_ds, out, args.seeds)
    for row in rows:
        print(f"{row['mode']} synapses={row['synapses']}: {row['acc_mean']:.4f} +- {row['acc_std']:.4f}")
    return 0


def cmd_ablation(args) -> int:
    config = _config(args)
    ds = load_source(args)
    check_fits(ds, config)
    out = prepare_out(args.out)
    train_ds, test_ds = split_dataset(ds, config.test_fraction, config.seed)
    rows = run_ablation(config, train_ds, test_ds, out, args.seeds)
    for row in rows:
        print(f"structure={row['structure']} delays={row['delays']}: "
              f"{row['acc_mean']:.4f} +- {row['acc_std']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delaysnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--data", help="features_path,labels_path (tensor files)")
        p.add_argument("--synthetic", help="synthetic dataset spec file (key = value)")

    p = sub.add_parser("train", help="train one network")
    p.add_argument("--config")
    data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--round-delays", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="receptive fields and Moran's I")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="accuracy vs synapse count")
    p.add_argument("--config")
    data_args(p)
    p.add_argument("--mode", choices=("dense", "sparse"), required=True)
    p.add_argument("--levels", required=True, help="comma-separated sparsity levels")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", help="structure learning x delay learning")
    p.add_argument("--config")
    data_args(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DelaySNNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
