"""Deterministic training driver for ERM, MixUp, Pani MixUp, VAT and Pani VAT."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from pani.autodiff import Tape, backward_gradients, one_hot
from pani.checkpoint import save_checkpoint
from pani.config import SSL_METHODS, ExperimentConfig, labeled_batch_size
from pani.data import Dataset, generate_synthetic, load_idx, split_ssl
from pani.errors import ConfigError, ContractError, NonFiniteError
from pani.mixup import apply_mix, build_mix_plan, vanilla_mixup
from pani.model import SGD, forward_with_taps, init_params, predict_logits
from pani.neighbors import filter_peers_random, filter_peers_semantic, knn_patches
from pani.patches import extract_patches
from pani.rng import RngStreams
from pani.vat import pani_vat_loss, supervised_loss, vanilla_vat_loss

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "reg_loss", "test_error", "seconds")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    reg_loss: float
    test_error_percent: float
    wall_seconds: float

    def row(self, with_time: bool) -> list:
        return [self.epoch, repr(self.train_loss), repr(self.reg_loss), repr(self.test_error_percent),
                f"{self.wall_seconds:.3f}" if with_time else "0"]


class BatchCycler:
    """Endless shuffled full-size batches over ``indices``; a short tail is dropped."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        if batch_size > len(indices) or batch_size < 1:
            raise ConfigError(f"batch size {batch_size} does not fit {len(indices)} samples")
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.shape[0]:
            self._order = self.indices[self.rng.permutation(self.indices.shape[0])]
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def load_dataset(cfg: ExperimentConfig, streams: RngStreams) -> Dataset:
    if cfg.data == "idx":
        return load_idx(cfg.train_images, cfg.train_labels)
    return generate_synthetic(cfg.num_classes, cfg.per_class, tuple(cfg.image_shape), cfg.separation,
                              streams["data"], noise=cfg.data_noise)


def prepare(cfg: ExperimentConfig) -> tuple:
    """Dataset, split, initial parameters and the seeded streams for one run."""
    streams = RngStreams(cfg.seed)
    ds = load_dataset(cfg, streams)
    if tuple(ds.images.shape[1:]) != tuple(cfg.image_shape):
        raise ConfigError(f"image_shape {list(cfg.image_shape)} does not match data {list(ds.images.shape[1:])}")
    split = split_ssl(ds, cfg.n_labeled, cfg.n_test, streams["split"], n_unlabeled=cfg.n_unlabeled,
                      num_classes=cfg.num_classes)
    params = init_params(cfg.model_config(), streams["init"])
    return ds, split, params, streams


def evaluate_error(params: dict, images: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of argmax mistakes; ties go to the lower class index."""
    if len(labels) == 0:
        raise ContractError("cannot evaluate on an empty subset")
    pred = np.argmax(predict_logits(params, images), axis=1)
    return 100.0 * float(np.count_nonzero(pred != labels)) / len(labels)


def step_loss(cfg: ExperimentConfig, params: dict, x_l: np.ndarray, t_l: np.ndarray,
              x_u: Optional[np.ndarray], streams: RngStreams) -> tuple:
    """The method's loss for one batch: ``(total Var, weighted regulariser value)``."""
    method = cfg.method
    if method == "erm":
        return supervised_loss(forward_with_taps, params, x_l, t_l, Tape()), 0.0
    if method == "mixup":
        mixed, targets = vanilla_mixup(x_l, t_l, cfg.a, streams["mixup"])
        return supervised_loss(forward_with_taps, params, mixed, targets, Tape()), 0.0
    if method == "pani_mixup":
        mc = cfg.mix_config()
        patches = extract_patches(x_l, mc.patch_size)
        peers = filter_peers_random(x_l.shape[0], mc.k1, streams["peers"])
        plan = build_mix_plan(patches, peers, mc, streams["lambda"], streams["eta"], streams["mask"])
        mixed, targets = apply_mix(x_l, t_l, plan, mc.patch_size)
        return supervised_loss(forward_with_taps, params, mixed, targets, Tape()), 0.0
    if method == "vat":
        total, parts = vanilla_vat_loss(forward_with_taps, params, (x_l, t_l), x_u, cfg.eps, cfg.beta,
                                        cfg.power_iters, cfg.xi, streams["power"])
        return total, cfg.beta * parts["vat_reg"]
    if method == "pani_vat":
        total, parts = pani_vat_loss(forward_with_taps, params, (x_l, t_l), x_u, cfg.vat_config(),
                                     streams["power"])
        return total, cfg.beta * parts["vat_reg"]
    raise ConfigError(f"unknown method {method!r}")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> list:
    """Train per ``cfg`` and return one :class:`MetricsRecord` per epoch.

    With an output directory, writes ``config.json``, ``metrics.csv`` (row by
    row) and ``checkpoint.pani``. Identical configs give identical metrics.
    """
    return train(cfg, out_dir)[0]


def train(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> tuple:
    """Like :func:`run_experiment` but returns ``(records, final_params)``."""
    out_dir = out_dir or cfg.out
    ds, split, params, streams = prepare(cfg)
    n_l, n_u = len(split.labeled), len(split.unlabeled)
    lbs = labeled_batch_size(cfg)
    labeled = BatchCycler(split.labeled, lbs, streams["shuffle_labeled"])
    use_unlabeled = cfg.method in SSL_METHODS and n_u > 0
    unlabeled = BatchCycler(split.unlabeled, min(cfg.batch_size, n_u), streams["shuffle_unlabeled"]) \
        if use_unlabeled else None
    steps = math.ceil(max(n_l, n_u) / cfg.batch_size)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    names = list(params)
    test_x, test_y = ds.images[split.test], ds.labels[split.test]

    writer = fh = None
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        fh = open(path / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        fh.flush()

    records = []
    step_index = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            lr = cfg.lr * (cfg.lr_decay_factor if epoch > cfg.decay_epoch else 1.0)
            loss_sum = reg_sum = 0.0
            for _ in range(steps):
                idx = labeled.next()
                x_l = ds.images[idx]
                t_l = one_hot(ds.labels[idx], cfg.num_classes)
                x_u = ds.images[unlabeled.next()] if unlabeled is not None else None
                try:
                    total, reg = step_loss(cfg, params, x_l, t_l, x_u, streams)
                    grads = backward_gradients(total.tape, total, wrt=names)
                    params = opt.step(params, grads, lr)
                    for name, value in params.items():
                        if not np.all(np.isfinite(value)):
                            raise NonFiniteError(f"parameter {name} became non-finite")
                except NonFiniteError as exc:
                    raise NonFiniteError(f"numeric abort at step {step_index} (epoch {epoch}): {exc}") from exc
                loss_sum += float(total.value)
                reg_sum += reg
                step_index += 1
            err = evaluate_error(params, test_x, test_y) if len(test_y) else float("nan")
            rec = MetricsRecord(epoch, loss_sum / steps, reg_sum / steps, err, time.perf_counter() - start)
            records.append(rec)
            log.info("epoch %d  loss %.4f  reg %.4f  test error %.2f%%  (%.1fs)", epoch, rec.train_loss,
                     rec.reg_loss, rec.test_error_percent, rec.wall_seconds)
            if writer is not None:
                writer.writerow(rec.row(cfg.record_wall_time))
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    if out_dir:
        save_checkpoint(Path(out_dir) / "checkpoint.pani", params)
    return records, params


def batch_graphs(cfg: ExperimentConfig, params: dict, images: np.ndarray, streams: RngStreams,
                 workers: int = 1) -> list:
    """The neighbour graphs ``cfg.method`` would build for ``images``, as ``[(tap, NeighborIndex)]``.

    Pani MixUp uses random peers on input patches; every other method uses the
    Pani VAT recipe (semantic peers, one graph per configured tap).
    """
    if cfg.method == "pani_mixup":
        mc = cfg.mix_config()
        peers = filter_peers_random(images.shape[0], mc.k1, streams["peers"])
        return [(0, knn_patches(extract_patches(images, mc.patch_size), peers, mc.k, workers=workers))]
    vc = cfg.vat_config()
    clean = forward_with_taps(params, images, track_params=False)
    peers = filter_peers_semantic(clean.penultimate.value, vc.k1)
    return [(layer.tap, knn_patches(extract_patches(clean.tapped[layer.tap].value, layer.patch_size), peers,
                                    layer.k2, workers=workers))
            for layer in vc.layers]
