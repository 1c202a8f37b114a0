"""Losses, ADAM with stepped learning-rate decay, augmentation, and the
epoch loop.

L2 regularization applies only to convolution and dense weights; batch
norm affine terms and the per-unit mapping scalars are excluded.  After
every optimizer step each mapping alpha is clamped away from zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import imageops
from .builder import Model


@dataclass
class FocalLossConfig:
    alpha_t: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_t <= 1.0:
            raise ValueError("focal loss balancing factor must be in [0, 1]")
        if self.gamma < 0.0:
            raise ValueError("focal loss focusing parameter must be >= 0")


def focal_loss(probabilities, labels, cfg: FocalLossConfig) -> float:
    """Mean of -alpha_t * (1 - p_t)^gamma * ln(p_t) over the batch, with
    p_t the probability assigned to the true class (floored at 1e-7)."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    k = probabilities.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label index out of range [0, {k})")
    pt = probabilities[np.arange(probabilities.shape[0]), labels]
    pt = np.maximum(pt, 1e-7)
    return float(np.mean(-cfg.alpha_t * (1.0 - pt) ** cfg.gamma * np.log(pt)))


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shapes differ")
    return float(np.mean((pred - target) ** 2))


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    decay_factor: float = 0.8
    decay_period: int = 10  # epochs
    l2_coefficient: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)


def lr_at_epoch(epoch: int, state: OptimizerState) -> float:
    """base_lr * decay_factor ** floor(epoch / decay_period)."""
    return state.base_lr * state.decay_factor ** (epoch // state.decay_period)


def adam_step(store: ad.ParamStore, state: OptimizerState,
              lr: float) -> None:
    """One bias-corrected ADAM update over all trainable entries.

    Weight-decay entries receive the L2 term added to their gradient;
    entries with a clamp are forced to |value| >= clamp afterwards.
    """
    if not getattr(store, "grads_populated", False):
        raise ad.GraphError("adam_step before backward: no gradients")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for entry in store.trainable_entries():
        g = entry.grad
        if entry.weight_decay and state.l2_coefficient:
            g = g + np.asarray(state.l2_coefficient,
                               entry.value.dtype) * entry.value
        if entry.name not in state.moments:
            state.moments[entry.name] = (np.zeros_like(entry.value),
                                         np.zeros_like(entry.value))
        m, v = state.moments[entry.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        entry.value -= np.asarray(lr, entry.value.dtype) * m_hat / (
            np.sqrt(v_hat) + eps)
        if entry.clamp_min_abs is not None:
            val = entry.value
            sign = np.where(val < 0, -1.0, 1.0).astype(val.dtype)
            entry.value[...] = sign * np.maximum(np.abs(val),
                                                 entry.clamp_min_abs)


@dataclass
class AugmentConfig:
    apply_probability: float = 0.25
    flip: bool = True
    hue_delta: float = 0.08
    saturation_range: tuple = (0.8, 1.2)
    brightness_delta: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    zoom_range: tuple = (1.0, 1.15)

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply probability must be in [0, 1]")


def augment(image: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """With probability apply_probability, run the whole transform chain:
    horizontal flip, then hue/saturation/brightness/contrast jitter, then
    zoom with center crop.  Output is clipped to [0, 1], shape preserved."""
    if rng.random() >= cfg.apply_probability:
        return image
    h, w, _ = image.shape
    out = np.asarray(image, dtype=np.float64)
    if cfg.flip and rng.random() < 0.5:
        out = out[:, ::-1, :]
    hsv = imageops.rgb_to_hsv(np.clip(out, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue_delta,
                                             cfg.hue_delta)) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*cfg.saturation_range),
                          0.0, 1.0)
    out = imageops.hsv_to_rgb(hsv)
    out = out + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    mean = out.mean()
    out = (out - mean) * rng.uniform(*cfg.contrast_range) + mean
    zoom = rng.uniform(*cfg.zoom_range)
    if zoom > 1.0:
        zh, zw = int(round(h * zoom)), int(round(w * zoom))
        out = imageops.center_crop(imageops.bilinear_resize(out, zh, zw),
                                   h, w)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def zero_center(batch: np.ndarray, channel_means) -> np.ndarray:
    """Subtract fixed per-channel means (computed once from the training
    split) from an NHWC batch."""
    means = np.asarray(channel_means, dtype=batch.dtype)
    return batch - means


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    metric: float  # accuracy (categorical) or RMSE (dimensional)
    alphas: list
    betas: list


@dataclass
class TrainingLog:
    loss_kind: str
    records: list = field(default_factory=list)

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.loss_kind == "focal" else "rmse"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        n_units = len(self.records[0].alphas) if self.records else 0
        header = (["epoch", "lr", "loss", self.metric_name]
                  + [f"alpha_{i + 1}" for i in range(n_units)]
                  + [f"beta_{i + 1}" for i in range(n_units)])
        writer.writerow(header)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.lr), repr(r.loss),
                             repr(r.metric)]
                            + [repr(a) for a in r.alphas]
                            + [repr(b) for b in r.betas])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _loss_graph(model: Model, loss_kind: str, focal_cfg: FocalLossConfig):
    key = f"loss/{loss_kind}"
    if key in model.extras:
        return model.extras[key], model.extras[f"{key}/feed"]
    if loss_kind == "focal":
        if model.config.head != "categorical":
            raise ValueError("focal loss requires the categorical head")
        labels = ad.IntPlaceholder("labels", (None,))
        loss = ad.FocalLoss(model.outputs, labels, focal_cfg.alpha_t,
                            focal_cfg.gamma, name="loss/focal")
    elif loss_kind == "mse":
        if model.config.head != "dimensional":
            raise ValueError("MSE loss requires the dimensional head")
        labels = ad.Placeholder("targets", (None, 2), dtype=model.dtype)
        loss = ad.MseLoss(model.outputs, labels, name="loss/mse")
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    model.extras[key] = loss
    model.extras[f"{key}/feed"] = labels
    return loss, labels


def train_epochs(model: Model, dataset, epochs: int,
                 loss_kind: str = "focal", seed: int = 0,
                 batch_size: int = 128,
                 state: OptimizerState | None = None,
                 focal_cfg: FocalLossConfig | None = None,
                 augment_cfg: AugmentConfig | None = None,
                 channel_means=None,
                 progress=None) -> TrainingLog:
    """Run shuffled mini-batch epochs and record per-epoch loss, the head
    metric, and every unit's mapping scalars.

    Deterministic for a fixed seed: shuffling and augmentation draw from
    one integer-seeded generator and batches run sequentially.
    """
    if len(dataset.images) == 0:
        raise ValueError("dataset is empty")
    state = state or OptimizerState()
    focal_cfg = focal_cfg or FocalLossConfig()
    loss_node, label_feed = _loss_graph(model, loss_kind, focal_cfg)
    rng = np.random.default_rng(seed)
    log = TrainingLog(loss_kind=loss_kind)

    n = len(dataset.images)
    targets = (dataset.class_labels if loss_kind == "focal"
               else dataset.va_labels)

    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, state)
        order = rng.permutation(n)
        loss_sum = 0.0
        metric_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            images = dataset.images[idx].astype(model.dtype, copy=True)
            if augment_cfg is not None:
                for i in range(images.shape[0]):
                    images[i] = augment(images[i], augment_cfg, rng)
            if channel_means is not None:
                images = zero_center(images, channel_means)
            feeds = {model.input.name: images, label_feed.name: targets[idx]}
            out = ad.evaluate([loss_node, model.outputs], feeds,
                              training=True)
            loss_val = float(out[loss_node.name])
            if not np.isfinite(loss_val):
                # rerun with per-node checking to name the first bad node
                ad.evaluate([loss_node], feeds, training=True,
                            check_finite=True)
                raise ad.NonFiniteError(loss_node.name)
            preds = out[model.outputs.name]
            if loss_kind == "focal":
                metric_sum += float(np.sum(
                    np.argmax(preds, axis=1) == targets[idx]))
            else:
                metric_sum += float(np.sum((preds - targets[idx]) ** 2))
            loss_sum += loss_val * len(idx)

            model.store.zero_grad()
            ad.backward(loss_node, model.store)
            adam_step(model.store, state, lr)

        metric = (metric_sum / n if loss_kind == "focal"
                  else float(np.sqrt(metric_sum / (n * 2))))
        pairs = model.mapping_values()
        record = EpochRecord(
            epoch=epoch, lr=lr, loss=loss_sum / n, metric=metric,
            alphas=[a for a, _ in pairs], betas=[b for _, b in pairs])
        log.records.append(record)
        if progress is not None:
            progress(record)
    return log
