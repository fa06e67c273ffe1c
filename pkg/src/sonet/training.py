"""Mini-batch training loops and evaluation helpers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import Checkpoint, checkpoint_from, load_into
from .data import AugmentParams, Dataset, augment
from .errors import EmptySourceError
from .model import (
    AutoEncoder,
    Classifier,
    DecoderConfig,
    EncoderConfig,
    Segmenter,
    prepare_batch,
    reconstruction_loss,
    unstack_scores,
)
from .nn import AdamState, LrSchedule, accuracy, adam_step, chamfer_value, mean_iou
from .som import SomGrid, SomTrainConfig, build_som

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 0.001
    decay_every: Optional[int] = None  # None: 20 for >= 5000-point clouds, else 40
    augment: bool = True
    augment_params: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0
    keep: float = 0.4
    coarse_supervision: bool = True
    time_limit: Optional[float] = None  # seconds; stops after the epoch that crosses it
    dtype: type = np.float32


@dataclass
class FitResult:
    model: object
    checkpoint: Checkpoint
    log: list


def compute_soms(dataset: Dataset, m: int, cfg: SomTrainConfig | None = None) -> list:
    """SOM preprocessing for every cloud; independent of network training."""
    return [build_som(c, m, cfg) for c in dataset.clouds]


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs two samples; fold a trailing singleton into its neighbour
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _augmented(dataset, soms, idx, cfg: TrainConfig, rng):
    clouds, grids = [], []
    for i in idx:
        c, s = dataset.clouds[i], soms[i]
        if cfg.augment:
            c, s = augment(c, s, replace(cfg.augment_params, seed=int(rng.integers(2**63))))
        clouds.append(c)
        grids.append(s)
    return clouds, grids


def _schedule(cfg: TrainConfig, dataset: Dataset) -> LrSchedule:
    if cfg.decay_every is not None:
        return LrSchedule(cfg.base_lr, cfg.decay_every)
    return LrSchedule.for_cloud_size(dataset.clouds[0].n, cfg.base_lr)


def _fit(model, dataset, soms, cfg: TrainConfig, step_loss, evaluate=None) -> FitResult:
    if len(dataset) == 0:
        raise EmptySourceError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    schedule = _schedule(cfg, dataset)
    adam = AdamState(base_lr=cfg.base_lr)
    params = model.parameters()
    history = []
    start = time.perf_counter()
    lr = schedule(0)
    for epoch in range(cfg.epochs):
        lr = schedule(epoch)
        model.train()
        losses, weights = [], []
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            clouds, grids = _augmented(dataset, soms, idx, cfg, rng)
            model.zero_grad()
            with Tape() as tape:
                loss = step_loss(clouds, grids, rng)
            tape.backward(loss)
            adam_step(params, {n: p.grad for n, p in params.items()}, adam, lr)
            losses.append(float(loss.data))
            weights.append(len(idx))
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": float(np.average(losses, weights=weights)),
            "eval_metric": float(evaluate()) if evaluate is not None else float("nan"),
        }
        history.append(row)
        log.info("epoch %(epoch)d lr %(lr).2e loss %(train_loss).4f eval %(eval_metric).4f", row)
        if cfg.time_limit is not None and time.perf_counter() - start > cfg.time_limit:
            log.info("time limit reached after epoch %d", epoch + 1)
            break
    model.eval()
    return FitResult(model, checkpoint_from(model, adam, len(history), lr), history)


def _warm_start(model, pretrained: Checkpoint | None):
    if pretrained is not None:
        load_into(model, pretrained, prefix="encoder.")


# --- classification ------------------------------------------------------------------


def fit_classifier(
    dataset: Dataset,
    soms: list,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    n_classes: int | None = None,
    pretrained: Checkpoint | None = None,
    eval_set: tuple | None = None,
    hidden=(256, 128),
) -> FitResult:
    n_classes = n_classes or len(dataset.class_names) or int(dataset.class_ids().max()) + 1
    model = Classifier(enc_cfg, n_classes, np.random.default_rng(cfg.seed), hidden, cfg.keep, cfg.dtype)
    _warm_start(model, pretrained)

    def step_loss(clouds, grids, rng):
        labels = np.array([c.class_id for c in clouds])
        batch = prepare_batch(clouds, grids, enc_cfg)
        return ad.softmax_cross_entropy(model.forward_batch(batch, rng), labels)

    evaluate = None
    if eval_set is not None:
        evaluate = lambda: evaluate_classifier(model, *eval_set)  # noqa: E731
    return _fit(model, dataset, soms, cfg, step_loss, evaluate)


def predict_scores(model: Classifier, dataset: Dataset, soms: list, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        batch = prepare_batch(dataset.clouds[i : i + batch_size], soms[i : i + batch_size], model.encoder.cfg)
        out.append(model.forward_batch(batch).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.head.n_classes))


def evaluate_classifier(model: Classifier, dataset: Dataset, soms: list) -> float:
    scores = predict_scores(model, dataset, soms)
    return accuracy(scores.argmax(axis=1), dataset.class_ids())


# --- segmentation --------------------------------------------------------------------


def fit_segmenter(
    dataset: Dataset,
    soms: list,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    n_parts: int | None = None,
    pretrained: Checkpoint | None = None,
    eval_set: tuple | None = None,
    pre_widths=(256, 128),
    post_widths=(128,),
) -> FitResult:
    n_parts = n_parts or int(max(c.labels.max() for c in dataset.clouds)) + 1
    model = Segmenter(enc_cfg, n_parts, np.random.default_rng(cfg.seed), pre_widths, post_widths, cfg.dtype)
    _warm_start(model, pretrained)

    def step_loss(clouds, grids, rng):
        batch = prepare_batch(clouds, grids, enc_cfg)
        labels = np.concatenate([c.labels[o] for c, o in zip(clouds, batch.orders)])
        return ad.softmax_cross_entropy(model.forward_batch(batch), labels)

    evaluate = None
    if eval_set is not None:
        evaluate = lambda: evaluate_segmenter(model, *eval_set)[0]  # noqa: E731
    return _fit(model, dataset, soms, cfg, step_loss, evaluate)


def predict_parts(model: Segmenter, dataset: Dataset, soms: list, batch_size: int = 16) -> list:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        batch = prepare_batch(dataset.clouds[i : i + batch_size], soms[i : i + batch_size], model.encoder.cfg)
        out += [s.argmax(axis=1) for s in unstack_scores(model.forward_batch(batch).data, batch)]
    model.train(was_training)
    return out


def evaluate_segmenter(model: Segmenter, dataset: Dataset, soms: list, parts_of=None) -> tuple[float, dict]:
    """Instance-mean IoU and per-category means; ``parts_of(class_id)`` lists a category's parts."""
    parts_of = parts_of or (lambda _cid: np.arange(model.head.n_parts))
    preds = predict_parts(model, dataset, soms)
    return mean_iou((p, c.labels, parts_of(c.class_id), c.class_id) for p, c in zip(preds, dataset.clouds))


# --- autoencoder -----------------------------------------------------------------------


def fit_autoencoder(
    dataset: Dataset,
    soms: list,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
    eval_set: tuple | None = None,
) -> FitResult:
    model = AutoEncoder(enc_cfg, dec_cfg, np.random.default_rng(cfg.seed), cfg.dtype)

    def step_loss(clouds, grids, rng):
        final, coarse = model(clouds, grids)
        return reconstruction_loss(final, coarse, [c.points for c in clouds], cfg.coarse_supervision)

    evaluate = None
    if eval_set is not None:
        evaluate = lambda: evaluate_autoencoder(model, *eval_set)  # noqa: E731
    return _fit(model, dataset, soms, cfg, step_loss, evaluate)


def reconstruct(model: AutoEncoder, dataset: Dataset, soms: list, batch_size: int = 32) -> list:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        final, _ = model(dataset.clouds[i : i + batch_size], soms[i : i + batch_size])
        out += list(final.data)
    model.train(was_training)
    return out


def evaluate_autoencoder(model: AutoEncoder, dataset: Dataset, soms: list) -> float:
    """Mean Chamfer distance between inputs and their final reconstructions."""
    recon = reconstruct(model, dataset, soms)
    return float(np.mean([chamfer_value(r, c.points) for r, c in zip(recon, dataset.clouds)]))


# --- robustness ------------------------------------------------------------------------


def corrupt_dropout(dataset: Dataset, frac: float, seed: int) -> Dataset:
    """Randomly delete a fraction of each cloud's points (at least one point survives)."""
    rng = np.random.default_rng(seed)
    clouds = []
    for c in dataset.clouds:
        keep = max(1, int(round(c.n * (1 - frac))))
        clouds.append(c.subset(np.sort(rng.choice(c.n, keep, replace=False))))
    return Dataset(clouds, dataset.class_names)


def corrupt_soms(soms: list, sigma: float, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [SomGrid(s.m, s.nodes + rng.normal(0, sigma, s.nodes.shape)) if sigma > 0 else s for s in soms]


def robustness_sweep(model: Classifier, dataset: Dataset, soms: list, dropout_fracs=(0.0,), noise_sigmas=(0.0,), som_cfg=None, seed: int = 0) -> list:
    """Accuracy under point deletion (SOMs rebuilt on the surviving points) and SOM node noise."""
    rows = []
    m = model.encoder.cfg.som_size
    for frac in dropout_fracs:
        data = corrupt_dropout(dataset, frac, seed) if frac > 0 else dataset
        grids = compute_soms(data, m, som_cfg) if frac > 0 else soms
        rows.append({"corruption": "point_dropout", "level": frac, "accuracy": evaluate_classifier(model, data, grids)})
    for sigma in noise_sigmas:
        grids = corrupt_soms(soms, sigma, seed)
        rows.append({"corruption": "som_noise", "level": sigma, "accuracy": evaluate_classifier(model, dataset, grids)})
    return rows
