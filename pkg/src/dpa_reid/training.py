"""Training loop, embedding extraction, evaluation runs and the ablation matrix."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff.tensor import Tape, backward
from .config import RunConfig
from .data import DatasetManifest, ImageLoader, PkSampler
from .evaluation import (EvalReport, distance_matrix, evaluate, ranked_list, write_metrics_csv,
                         write_ranks_csv)
from .losses import total_loss
from .model import ReIdModel, build_model
from .nn import load_checkpoint, save_checkpoint
from .optim import SGD, Adam, lr_at

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "lr", "lsce", "hmt", "total", "seconds")
ABLATION_ARMS = ("baseline", "cpa", "spa", "dpa")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    lsce: float
    hmt: float
    total: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    @property
    def loss_decreased(self) -> bool:
        return len(self.records) >= 2 and self.records[-1].total < self.records[0].total

    def write_csv(self, path, include_time: bool = False) -> None:
        # wall time is left out by default so logs are reproducible byte for byte
        cols = TRAIN_LOG_COLUMNS if include_time else TRAIN_LOG_COLUMNS[:-1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [r.epoch, f"{r.lr:.10g}", f"{r.lsce:.10f}", f"{r.hmt:.10f}", f"{r.total:.10f}"]
                if include_time:
                    row.append(f"{r.seconds:.3f}")
                w.writerow(row)


def train_labels(manifest: DatasetManifest):
    """Training entry indices and their identities relabelled densely from 0."""
    idx = np.array(manifest.select("train"))
    ids = np.array([manifest.entries[i].id for i in idx])
    uniq = np.unique(ids)
    return idx, np.searchsorted(uniq, ids), len(uniq)


def model_for(cfg: RunConfig, num_classes: int) -> ReIdModel:
    return build_model(replace(cfg.backbone, num_classes=num_classes), seed=cfg.seed)


def fit_arrays(cfg: RunConfig, images: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
               model: ReIdModel | None = None, progress=None):
    """Train on in-memory N×3×H×W images with dense integer labels."""
    labels = np.asarray(labels)
    num_classes = int(num_classes or labels.max() + 1)
    model = model or model_for(cfg, num_classes)
    return _fit(cfg, model, lambda sel: images[sel], labels, progress)


def train(cfg: RunConfig, manifest: DatasetManifest, loader: ImageLoader, progress=None):
    idx, labels, n_cls = train_labels(manifest)
    model = model_for(cfg, n_cls)
    return _fit(cfg, model, lambda sel: loader.load(idx[sel]), labels, progress)


def _fit(cfg: RunConfig, model: ReIdModel, fetch, labels, progress):
    sampler = PkSampler(labels, cfg.P, cfg.K, seed=cfg.seed + 1)
    params = model.parameters()
    if cfg.optimizer == "sgd":
        opt = SGD(params, cfg.momentum, cfg.weight_decay)
    else:
        opt = Adam(params, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    iters = cfg.iters_per_epoch or max(1, round(len(labels) / (cfg.P * cfg.K)))
    history = TrainLog()
    model.train()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(schedule, epoch)
        sums = np.zeros(3)
        for _ in range(iters):
            batch = sampler.next()
            images = fetch(batch.indices)
            opt.zero_grad()
            with Tape() as tape:
                out = model(images)
                total, l1, l2 = total_loss(out.logits, out.features, labels[batch.indices], cfg.weights,
                                           cfg.lsce, cfg.hmt)
            backward(tape, total)
            opt.step(lr)
            sums += (l1.item(), l2.item(), total.item())
        sums /= iters
        rec = EpochRecord(epoch, lr, *sums, time.perf_counter() - start)
        history.records.append(rec)
        log.info("epoch %d lr %.3g lsce %.4f hmt %.4f total %.4f (%.1fs)", epoch, lr, *sums, rec.seconds)
        if progress is not None:
            progress(rec)
    model.eval()
    return model, history


def embed(model: ReIdModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode post-neck embeddings for N×3×H×W images."""
    model.eval()
    chunks = [model(images[i: i + batch_size]).embedding.data for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks)


def split_arrays(manifest: DatasetManifest, loader: ImageLoader, split: str):
    idx = manifest.select(split)
    ids = np.array([manifest.entries[i].id for i in idx])
    cams = np.array([manifest.entries[i].cam for i in idx])
    return loader.load(idx), ids, cams


def evaluate_model(model: ReIdModel, manifest: DatasetManifest, loader: ImageLoader, cfg: RunConfig):
    q_img, q_ids, q_cams = split_arrays(manifest, loader, "query")
    g_img, g_ids, g_cams = split_arrays(manifest, loader, "gallery")
    dist = distance_matrix(embed(model, q_img), embed(model, g_img), cfg.metric)
    report = evaluate(dist, q_ids, q_cams, g_ids, g_cams, cfg.cross_camera)
    rows = ranked_list(dist, min(cfg.ranks_k, len(g_ids)), q_ids, g_ids)
    return report, rows


def chance_map(manifest: DatasetManifest, cfg: RunConfig, trials: int = 50, dim: int | None = None,
               seed: int = 0) -> float:
    """Mean mAP of random Gaussian embeddings on the query/gallery split."""
    q = manifest.select("query")
    g = manifest.select("gallery")
    q_ids = [manifest.entries[i].id for i in q]
    q_cams = [manifest.entries[i].cam for i in q]
    g_ids = [manifest.entries[i].id for i in g]
    g_cams = [manifest.entries[i].cam for i in g]
    dim = dim or cfg.backbone.embed_dim
    rng = np.random.default_rng(seed)
    maps = []
    for _ in range(trials):
        dist = distance_matrix(rng.standard_normal((len(q), dim)), rng.standard_normal((len(g), dim)), cfg.metric)
        maps.append(evaluate(dist, q_ids, q_cams, g_ids, g_cams, cfg.cross_camera).mAP)
    return float(np.mean(maps))


def run_train(cfg: RunConfig, manifest, loader, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(cfg, manifest, loader)
    save_checkpoint(model, out / "checkpoint.dpac")
    history.write_csv(out / "train_log.csv")
    return model, history


def run_eval(cfg: RunConfig, manifest, loader, out_dir, checkpoint=None) -> EvalReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, n_cls = train_labels(manifest)
    model = model_for(cfg, n_cls)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
    report, rows = evaluate_model(model, manifest, loader, cfg)
    write_metrics_csv(report, out / "metrics.csv")
    write_ranks_csv(rows, out / "ranks.csv")
    return report


def ablation_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}")
    if arm == "baseline":
        backbone = replace(cfg.backbone, dpa_after_stage=())
    else:
        backbone = replace(cfg.backbone, attention=arm, dpa_after_stage=cfg.backbone.dpa_after_stage or (2,))
    return replace(cfg, backbone=backbone)


def run_ablation(cfg: RunConfig, manifest, loader, out_dir, arms=None) -> list:
    """Train and evaluate each attention arm; writes ``ablation.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in arms or ABLATION_ARMS:
        arm_cfg = ablation_config(cfg, name)
        model, _ = train(arm_cfg, manifest, loader)
        report, _ = evaluate_model(model, manifest, loader, arm_cfg)
        save_checkpoint(model, out / f"checkpoint_{name}.dpac")
        rows.append({"method": name, "mAP": report.mAP, "rank1": report.rank1, "rank5": report.rank5,
                     "mINP": report.mINP, "params": model.num_parameters()})
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mAP", "rank1", "rank5", "mINP", "params"])
        for r in rows:
            w.writerow([r["method"]] + [f"{r[k]:.6f}" for k in ("mAP", "rank1", "rank5", "mINP")] + [r["params"]])
    return rows
