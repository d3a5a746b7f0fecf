"""One experiment cell: train a defended target, attack it, score the attack."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, metrics
from .attacks import AttackReport, ThreatModel, harvest, reconstruct, train_inverter
from .config import ExperimentConfig
from .data import Dataset, bundled_mnist, downsample, load_idx, split
from .defenses import LeakTransform, build
from .nn import LayerSpec, Model, ModelSpec, TrainConfig, evaluate, fit
from .tensor import make_rng

log = logging.getLogger(__name__)

CSV_COLUMNS = ("dataset", "defense", "threat_model", "psnr", "ssim", "fid", "accuracy", "seed", "wall_time_s")

_DATA_CACHE: dict = {}
_FX_CACHE: dict = {}


@dataclass
class ResultRow:
    dataset: str
    defense: str
    threat_model: str
    psnr: float
    ssim: float
    fid: float
    accuracy: float
    seed: int
    wall_time_s: float | None = None

    def as_strings(self) -> list[str]:
        def num(v):
            return "NA" if v is None else f"{v:.6f}"

        return [self.dataset, self.defense, self.threat_model, num(self.psnr), num(self.ssim), num(self.fid),
                num(self.accuracy), str(self.seed), "NA" if self.wall_time_s is None else f"{self.wall_time_s:.1f}"]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    key = (cfg.dataset, cfg.images_path, cfg.labels_path, cfg.downsample)
    if key not in _DATA_CACHE:
        if cfg.images_path:
            ds = load_idx(cfg.images_path, cfg.labels_path, name=cfg.dataset)
        elif cfg.dataset == "mnist":
            ds = bundled_mnist()
        else:
            raise ValueError(f"no files given for dataset {cfg.dataset!r}")
        _DATA_CACHE[key] = downsample(ds, cfg.downsample)
    return _DATA_CACHE[key]


def splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return split(load_dataset(cfg), cfg.train_fraction, cfg.seed_split)


def reference_spec(input_shape, classes, seed) -> ModelSpec:
    n_in = int(np.prod(input_shape))
    layers = [LayerSpec("flatten"), LayerSpec.linear(n_in, 128), LayerSpec("relu", tap="fc1"),
              LayerSpec.linear(128, 64), LayerSpec("relu", tap="features"), LayerSpec.linear(64, classes, tap="logits")]
    return ModelSpec(layers, classes, input_shape, seed)


def train_feature_extractor(train: Dataset, seed: int, epochs: int) -> metrics.FeatureExtractor:
    """Reference classifier whose penultimate layer feeds the Frechet distance."""
    model = Model(reference_spec(train.image_shape, train.classes, seed))
    fit(model, train, TrainConfig(epochs=epochs, batch_size=32, learning_rate=0.05), make_rng(seed, 7))
    return metrics.FeatureExtractor(model, "features", {"seed": seed, "dataset": train.name, "epochs": epochs})


def feature_extractor(cfg: ExperimentConfig, train: Dataset, directory: Path | None = None) -> metrics.FeatureExtractor:
    key = (cfg.dataset, cfg.downsample, cfg.seed_split, cfg.fx_seed, cfg.fx_epochs)
    if key in _FX_CACHE:
        return _FX_CACHE[key]
    path = directory / f"fx_{cfg.dataset}_seed{cfg.fx_seed}.ckpt" if directory else None
    fx = None
    if path is not None and path.exists():
        model, info = checkpoint.load(path)
        if info.get("key") == list(key):
            fx = metrics.FeatureExtractor(model, "features", info)
    if fx is None:
        fx = train_feature_extractor(train, cfg.fx_seed, cfg.fx_epochs)
        if path is not None:
            checkpoint.save(path, fx.model, {**fx.provenance, "key": list(key)})
    _FX_CACHE[key] = fx
    return fx


def train_target(cfg: ExperimentConfig, train: Dataset) -> tuple[Model, LeakTransform]:
    spec, train_cfg, transform = build(cfg.defense_spec(), train, cfg.architecture(), cfg.training())
    model = Model(spec)
    fit(model, train, train_cfg, make_rng(cfg.seed_model, 1),
        callback=lambda e, loss: log.info("%s epoch %d loss %.4f", cfg.defense, e, loss))
    return model, transform


def leak_transform(cfg: ExperimentConfig) -> LeakTransform:
    return build(cfg.defense_spec(), ((1, 2, 2), 2))[2]


def target_accuracy(model: Model, transform: LeakTransform, tm: ThreatModel, test: Dataset, seed: int) -> float:
    """Test accuracy with the leak transform active at the tap."""
    return evaluate(model, test, hooks={tm.tap_label: transform.hook(make_rng(seed, 4))})


def attack_target(cfg: ExperimentConfig, model: Model, transform: LeakTransform, train: Dataset, test: Dataset,
                  fx: metrics.FeatureExtractor | None) -> AttackReport:
    tm = ThreatModel.for_spec(cfg.threat_model, model.spec)
    rng = make_rng(cfg.seed_attack, 2)
    pairs = harvest(model, transform, tm, test, rng)
    inverter = train_inverter(pairs, cfg.attack(), rng,
                              callback=lambda e, mse: log.info("inverter epoch %d mse %.5f", e, mse))
    report = reconstruct(inverter, model, transform, tm, train, make_rng(cfg.seed_attack, 3), fx)
    report.accuracy = target_accuracy(model, transform, tm, test, cfg.seed_attack)
    report.metadata.update(defense=cfg.defense, seed_model=cfg.seed_model, seed_attack=cfg.seed_attack,
                           seed_split=cfg.seed_split)
    return report


def run_cell(cfg: ExperimentConfig, directory: Path | None = None, model: Model | None = None) -> tuple[ResultRow, AttackReport, Model]:
    start = time.perf_counter()
    train, test = splits(cfg)
    fx = feature_extractor(cfg, train, directory)
    transform = leak_transform(cfg)
    if model is None:
        model, transform = train_target(cfg, train)
    report = attack_target(cfg, model, transform, train, test, fx)
    elapsed = time.perf_counter() - start
    row = ResultRow(train.name, cfg.defense_spec().id, cfg.threat_model, report.psnr, report.ssim, report.fid,
                    report.accuracy, cfg.seed_model, elapsed if cfg.timing else None)
    return row, report, model


def rows_to_csv(rows, header=True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.as_strings())
    return buf.getvalue()


def append_csv(path, rows) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows, header=new))


def read_csv(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            f = [None if v == "NA" else v for v in rec]
            rows.append(ResultRow(f[0], f[1], f[2], *(None if v is None else float(v) for v in f[3:7]),
                                  int(f[7]), None if f[8] is None else float(f[8])))
        return rows


def report_markdown(rows) -> str:
    """Tables grouped by dataset with the strongest defense (lowest PSNR) last."""
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows to report")
    lines = []
    for dataset in sorted({r.dataset for r in rows}):
        group = sorted((r for r in rows if r.dataset == dataset), key=lambda r: (-r.psnr, r.defense))
        lines += [f"### {dataset}", "",
                  "| Defense | Threat model | Seed | PSNR ⇊ | SSIM ⇊ | FID ⇈ | Accuracy |",
                  "|---|---|---|---|---|---|---|"]
        for r in group:
            fid = "NA" if r.fid is None else f"{r.fid:.2f}"
            acc = "NA" if r.accuracy is None else f"{r.accuracy:.3f}"
            lines.append(f"| {r.defense} | {r.threat_model} | {r.seed} | {r.psnr:.2f} | {r.ssim:.3f} | {fid} | {acc} |")
        lines.append("")
    return "\n".join(lines)

