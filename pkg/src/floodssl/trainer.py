"""Pseudo-label semi-supervised training for classification and segmentation.

Each epoch: pick alpha from the ramp, run labeled steps (plus pseudo-labeled
steps once alpha > 0), regenerate hard pseudo labels for the unlabeled pool
from the current model, then evaluate on the validation split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import (Dataset, Sample, SamplerState, concat_datasets, gen_synthetic_classification,
                   gen_synthetic_segmentation, subsample_unlabeled, weighted_sample_batch)
from .losses import LossWeights, bce_with_logits, combined_seg_loss, semi_supervised_loss
from .metrics import ConfusionMatrix, classification_metrics, segmentation_metrics
from .models import ModelConfig, init_classifier, init_unet_lite, save_checkpoint
from .optim import StepLRSchedule, make_optimizer
from .preprocess import AugmentConfig, augment, denoise_pipeline, one_hot_batch, resize
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_BATCH = 64


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_i: float = 0.0
    alpha_f: float = 1.0
    e_i: int = 10
    e_f: int = 135

    def __post_init__(self):
        if not 0 <= self.alpha_i <= self.alpha_f:
            raise ValueError("0 <= alpha_i <= alpha_f violated")
        if not self.e_i < self.e_f:
            raise ValueError("e_i < e_f violated")


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    s = schedule
    if epoch < s.e_i:
        return s.alpha_i
    if epoch < s.e_f:
        return (s.alpha_f - s.alpha_i) / (s.e_f - s.e_i) * (epoch - s.e_i) + s.alpha_i
    return s.alpha_f


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    lr: float
    optimizer: str
    sup_loss: float
    pseudo_loss: float
    total_loss: float
    metrics: dict
    pseudo_labels: int = 0


@dataclass
class StepRecord:
    epoch: int
    alpha: float
    sup_loss: float
    pseudo_loss: float | None
    total_loss: float


@dataclass
class MetricsLog:
    task: str
    records: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    best_epoch: int = -1
    best_metrics: dict = field(default_factory=dict)
    final_confusion: ConfusionMatrix | None = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def loss_trace(self) -> list[float]:
        return [s.total_loss for s in self.steps]

    def metric_columns(self) -> list[str]:
        if self.task == "classification":
            return ["val_accuracy", "val_precision", "val_recall", "val_f1"]
        return ["val_miou", "val_pixel_accuracy"]


PseudoLabelStore = dict  # unlabeled id -> class index or H×W mask


# -- batching -----------------------------------------------------------------

def stack_images(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]))


def _targets(samples: Sequence[Sample], task: str, n_classes: int,
             store: PseudoLabelStore | None = None):
    if task == "classification":
        labels = [store[s.id] if store is not None else s.label for s in samples]
        return np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    masks = np.stack([store[s.id] if store is not None else s.mask for s in samples])
    return one_hot_batch(masks, n_classes)


def _task_loss(logits: Tensor, target: np.ndarray, task: str, weights: LossWeights) -> Tensor:
    if task == "classification":
        return bce_with_logits(logits, target)
    return combined_seg_loss(logits, target, weights)


def predict(model, samples: Sequence[Sample], task: str) -> list:
    """Hard predictions: logit > 0 for the binary head, channel argmax per pixel otherwise.

    ``np.argmax`` returns the lowest index among tied channels.
    """
    out = []
    with T.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            logits = model(stack_images(samples[i:i + EVAL_BATCH])).data
            if task == "classification":
                out.extend(int(v) for v in (logits[:, 0] > 0))
            else:
                out.extend(logits.argmax(axis=1).astype(np.int64))
    return out


def generate_pseudo_labels(model, unlabeled: Sequence[Sample], task: str) -> PseudoLabelStore:
    preds = predict(model, list(unlabeled), task)
    return {s.id: p for s, p in zip(unlabeled, preds)}


def evaluate(model, samples: Sequence[Sample] | Dataset, task: str, n_classes: int = 2,
             positive_class: int = 1) -> tuple[dict, ConfusionMatrix]:
    samples = list(samples)
    for s in samples:
        if not s.labeled:
            raise ValueError(f"cannot evaluate on unlabeled sample {s.id}")
    cm = ConfusionMatrix(n_classes)
    preds = predict(model, samples, task)
    for s, p in zip(samples, preds):
        cm.update(p, s.label if task == "classification" else s.mask)
    if task == "classification":
        return classification_metrics(cm, positive_class), cm
    return segmentation_metrics(cm), cm


def _score(metrics: dict, task: str) -> float:
    return metrics["f1"] if task == "classification" else metrics["miou"]


# -- data preparation ---------------------------------------------------------

def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def synthetic_dataset(config: ExperimentConfig) -> Dataset:
    """Generate train (labeled + unlabeled), val and test splits from the config."""
    parts = []
    plan = [("train", True, config.n_labeled), ("train", False, config.n_unlabeled),
            ("val", True, config.n_val), ("test", True, config.n_test)]
    for k, (split, labeled, n) in enumerate(plan):
        if n == 0:
            continue
        seed = _sub_seed(config.seed, k)
        if config.task == "classification":
            parts.append(gen_synthetic_classification(n, config.positive_fraction,
                                                      config.image_size, seed, split, labeled))
        else:
            parts.append(gen_synthetic_segmentation(n, config.n_classes, config.image_size,
                                                    seed, split, labeled))
    if not parts:
        return Dataset([], config.task, config.n_classes)
    return concat_datasets(parts)


def prepare_dataset(dataset: Dataset, config: ExperimentConfig) -> Dataset:
    """Fixed resize to ``image_size`` and, if enabled, the denoise pipeline."""
    size = config.image_size
    out = []
    for s in dataset.samples:
        img, mask = s.image, s.mask
        if img.shape[1:] != (size, size):
            img = resize(img, size, size, "bilinear")
            if mask is not None:
                mask = resize(mask, size, size, "nearest")
        if config.preprocess:
            img = np.clip(denoise_pipeline(img), 0.0, 1.0)
        out.append(Sample(img, s.id, s.label, mask, s.labeled, s.split))
    return Dataset(out, dataset.task, dataset.n_classes, dataset.split)


# -- training -----------------------------------------------------------------

def load_experiment_data(config: ExperimentConfig) -> Dataset:
    """Manifest data when ``config.data`` is set, synthetic otherwise; always prepared."""
    from .data import load_manifest

    if config.data:
        n = config.n_classes if config.task == "segmentation" else 2
        dataset = load_manifest(config.data, n)
    else:
        dataset = synthetic_dataset(config)
    return prepare_dataset(dataset, config)


def build_model(config: ExperimentConfig, in_channels: int = 3):
    mc = ModelConfig(in_channels=in_channels, n_classes=config.n_classes, width=config.width,
                     seed=config.seed)
    return init_classifier(mc) if config.task == "classification" else init_unet_lite(mc)


def train(config: ExperimentConfig, dataset: Dataset, outdir: str | Path | None = None,
          on_epoch_end=None):
    """Run the semi-supervised loop; returns (final model, MetricsLog).

    ``dataset`` holds all splits (train labeled/unlabeled, val, optional test).
    With ``outdir`` set, ``ckpt_best`` is written whenever the validation score
    improves and ``ckpt_final`` at the end. ``on_epoch_end(model, record)`` is
    called after each epoch's record is logged.
    """
    config.validate()
    task = config.task
    if dataset.task != task:
        raise ValueError(f"dataset is {dataset.task}, config wants {task}")
    n_classes = dataset.n_classes if task == "segmentation" else 2
    train_split = dataset.subset("train")
    labeled = train_split.labeled()
    unlabeled = train_split.unlabeled()
    val = dataset.subset("val").samples
    if not labeled:
        raise ValueError("no labeled training samples")

    ss = np.random.SeedSequence(config.seed)
    s_sampler, s_aug, s_order, s_paug = ss.spawn(4)
    if task == "classification":
        sampler = SamplerState.balanced([s.label for s in labeled], 2,
                                        int(s_sampler.generate_state(1)[0]))
    else:
        sampler = SamplerState.uniform(len(labeled), int(s_sampler.generate_state(1)[0]))
    rng_aug = np.random.default_rng(s_aug)
    rng_order = np.random.default_rng(s_order)
    rng_paug = np.random.default_rng(s_paug)
    aug_cfg = (AugmentConfig.classification() if task == "classification"
               else AugmentConfig.segmentation())

    in_channels = labeled[0].image.shape[0]
    model = build_model(config, in_channels)
    params = model.parameters()
    schedule = StepLRSchedule(config.lr, config.milestones, config.gamma)
    alphas = AlphaSchedule(config.alpha_i, config.alpha_f, config.e_i, config.e_f)
    weights = LossWeights(config.w_bce, config.w_dice, config.dice_smooth)
    opt = make_optimizer(config.optimizer, params, config.lr, config.momentum)
    switched = False
    steps = config.steps_per_epoch or math.ceil(len(labeled) / config.batch_size)

    mlog = MetricsLog(task)
    if not unlabeled:
        msg = "unlabeled pool is empty; training is supervised only"
        mlog.warnings.append(msg)
        log.warning(msg)
    by_id = {s.id: s for s in unlabeled}
    store: PseudoLabelStore = {}
    outdir = Path(outdir) if outdir else None
    best_score = -math.inf

    for epoch in range(config.epochs):
        alpha = alpha_at(alphas, epoch)
        if alpha > 0 and config.pseudo_optimizer and not switched:
            # fresh optimizer state; moments are not carried over
            opt = make_optimizer(config.pseudo_optimizer, params, config.pseudo_lr, config.momentum)
            switched = True
        opt.lr = config.pseudo_lr if switched else schedule.lr_at(epoch)

        use_pseudo = alpha > 0 and bool(store)
        order: list[str] = []
        cursor = 0
        if use_pseudo:
            keys = list(store)
            order = [keys[i] for i in rng_order.permutation(len(keys))]

        sums = np.zeros(3)
        for _ in range(steps):
            idx = weighted_sample_batch(config.batch_size, sampler)
            batch = [labeled[i] for i in idx]
            if config.augment:
                batch = [augment(s, aug_cfg, rng_aug) for s in batch]
            sup = _task_loss(model(stack_images(batch)), _targets(batch, task, n_classes),
                             task, weights)
            pseudo = None
            if use_pseudo:
                ids = []
                while len(ids) < config.batch_size and len(ids) < len(order):
                    if cursor == len(order):
                        cursor = 0
                    ids.append(order[cursor])
                    cursor += 1
                pbatch = [_with_pseudo(by_id[i], store[i], task) for i in ids]
                if config.augment:
                    pbatch = [augment(s, aug_cfg, rng_paug) for s in pbatch]
                pseudo = _task_loss(model(stack_images(pbatch)),
                                    _targets(pbatch, task, n_classes), task, weights)
            total = semi_supervised_loss(sup, pseudo, alpha)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            total.backward()
            opt.step()
            p_val = pseudo.item() if pseudo is not None else None
            mlog.steps.append(StepRecord(epoch, alpha, sup.item(), p_val, total.item()))
            sums += (sup.item(), p_val or 0.0, total.item())

        n_pseudo = len(store) if use_pseudo else 0
        if unlabeled and epoch + 1 < config.epochs and alpha_at(alphas, epoch + 1) > 0:
            subset = subsample_unlabeled(unlabeled, config.unlabeled_ratio, config.seed, epoch)
            store = generate_pseudo_labels(model, subset, task)

        metrics, cm = evaluate(model, val, task, n_classes, config.positive_class) if val else ({}, None)
        means = sums / steps
        mlog.append(EpochRecord(epoch, alpha, opt.lr, opt.kind, float(means[0]), float(means[1]),
                                float(means[2]), metrics, n_pseudo))
        mlog.final_confusion = cm
        if metrics and _score(metrics, task) > best_score:
            best_score = _score(metrics, task)
            mlog.best_epoch = epoch
            mlog.best_metrics = dict(metrics)
            if outdir:
                save_checkpoint(model, outdir / "ckpt_best")
        log.info("epoch %d alpha=%.4f lr=%g loss=%.5f", epoch, alpha, opt.lr, means[2])
        if on_epoch_end is not None:
            on_epoch_end(model, mlog.records[-1])

    if outdir:
        save_checkpoint(model, outdir / "ckpt_final")
    return model, mlog


def _with_pseudo(sample: Sample, target, task: str) -> Sample:
    if task == "classification":
        return Sample(sample.image, sample.id, int(target), None, True, sample.split)
    return Sample(sample.image, sample.id, None, np.asarray(target), True, sample.split)


def train_classification(config: ExperimentConfig, dataset: Dataset, outdir=None, on_epoch_end=None):
    if config.task != "classification":
        raise ValueError("config.task must be classification")
    return train(config, dataset, outdir, on_epoch_end)


def train_segmentation(config: ExperimentConfig, dataset: Dataset, outdir=None, on_epoch_end=None):
    if config.task != "segmentation":
        raise ValueError("config.task must be segmentation")
    return train(config, dataset, outdir, on_epoch_end)
