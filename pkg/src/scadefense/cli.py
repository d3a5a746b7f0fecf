"""Command line entry point: ``scadefense {train,attack,evaluate,report,run,export-mnist}``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import checkpoint, experiment
from .attacks import ThreatModel, image_grid, write_netpbm
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import bundled_mnist, write_idx
from .nn import evaluate

log = logging.getLogger("scadefense")


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for name in ("seed_model", "seed_attack", "seed_split"):
        value = getattr(args, name, None)
        if value is None and getattr(args, "seed", None) is not None and name != "seed_split":
            value = args.seed
        if value is not None:
            overrides[name] = str(value)
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides=overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _default_checkpoint(cfg: ExperimentConfig) -> Path:
    name = cfg.defense_spec().id.replace("(", "_").replace(")", "").replace(",", "_")
    return _out_dir(cfg) / f"{cfg.dataset}_{name}_{cfg.threat_model}_s{cfg.seed_model}.ckpt"


def cmd_train(args) -> int:
    cfg = _config(args)
    train, test = experiment.splits(cfg)
    experiment.feature_extractor(cfg, train, _out_dir(cfg))
    model, transform = experiment.train_target(cfg, train)
    path = Path(args.out) if args.out else _default_checkpoint(cfg)
    checkpoint.save(path, model, {"defense": cfg.defense_spec().id, "threat_model": cfg.threat_model,
                                  "seed_model": cfg.seed_model, "seed_split": cfg.seed_split})
    tm = ThreatModel.for_spec(cfg.threat_model, model.spec)
    print(f"train accuracy {evaluate(model, train):.4f}")
    print(f"test accuracy {experiment.target_accuracy(model, transform, tm, test, cfg.seed_attack):.4f}")
    print(f"checkpoint {path}")
    return 0


def _load_target(args, cfg):
    path = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg)
    model, info = checkpoint.load(path)
    if info.get("defense") not in (None, cfg.defense_spec().id):
        raise ConfigError(f"checkpoint {path} holds defense {info['defense']!r}, config says {cfg.defense_spec().id!r}")
    ThreatModel.for_spec(cfg.threat_model, model.spec).check(model.spec)
    return model


def cmd_attack(args) -> int:
    cfg = _config(args)
    model = _load_target(args, cfg)
    out = _out_dir(cfg)
    row, report, _ = experiment.run_cell(cfg, out, model=model)
    csv_path = Path(args.csv) if args.csv else out / "results.csv"
    experiment.append_csv(csv_path, [row])
    train, _ = experiment.splits(cfg)
    k = min(args.grid_size, len(train))
    grid = image_grid(
        [img for pair in zip(train.images[:k], report.reconstructions[:k]) for img in pair], cols=10)
    grid_path = Path(args.grid) if args.grid else csv_path.with_name(_default_checkpoint(cfg).stem + ".pgm")
    write_netpbm(grid_path, grid)
    print(experiment.rows_to_csv([row]), end="")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model = _load_target(args, cfg)
    train, test = experiment.splits(cfg)
    tm = ThreatModel.for_spec(cfg.threat_model, model.spec)
    transform = experiment.leak_transform(cfg)
    print(f"train accuracy {evaluate(model, train):.4f}")
    print(f"test accuracy {experiment.target_accuracy(model, transform, tm, test, cfg.seed_attack):.4f}")
    return 0


def cmd_report(args) -> int:
    rows = [row for path in args.csv for row in experiment.read_csv(path)]
    text = experiment.report_markdown(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def _run_one(cfg: ExperimentConfig) -> str:
    row, _, _ = experiment.run_cell(cfg, _out_dir(cfg))
    return experiment.rows_to_csv([row], header=False)


def cmd_run(args) -> int:
    """Train and attack every (defense, seed) cell, writing one CSV."""
    cfg = _config(args)
    defenses = args.defense or [cfg.defense]
    seeds = args.seeds or [cfg.seed_model]
    cells = [replace(cfg, defense=d).with_seeds(s) for d in defenses for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            lines = list(pool.map(_run_one, cells))
    else:
        lines = [_run_one(c) for c in cells]
    text = ",".join(experiment.CSV_COLUMNS) + "\n" + "".join(lines)
    csv_path = Path(args.csv) if args.csv else _out_dir(cfg) / "results.csv"
    csv_path.write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_export_mnist(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(bundled_mnist(), out / "mnist-images-idx3-ubyte", out / "mnist-labels-idx1-ubyte")
    print(f"wrote IDX files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scadefense", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="set both --seed-model and --seed-attack")
        p.add_argument("--seed-model", dest="seed_model", type=int)
        p.add_argument("--seed-attack", dest="seed_attack", type=int)
        p.add_argument("--seed-split", dest="seed_split", type=int)
        return p

    p = common(sub.add_parser("train", help="train a defended target model"))
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("attack", help="run the inversion attack on a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--csv", help="CSV file to append the result row to")
    p.add_argument("--grid", help="PGM/PPM path for original/reconstruction pairs")
    p.add_argument("--grid-size", type=int, default=20)
    p.set_defaults(func=cmd_attack)

    p = common(sub.add_parser("evaluate", help="report train/test accuracy of a checkpoint"))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="Markdown table from result CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("run", help="train + attack a grid of defenses and seeds"))
    p.add_argument("--defense", action="append", help="defense id (repeatable)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-mnist", help="write the bundled MNIST sample as IDX files")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_export_mnist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
