"""Training: waveform augmentation with per-epoch regeneration, per-task
losses, four loss-weighting schemes with cross-task normalization, and the
momentum-SGD loop with inverse-time learning-rate decay.

Augmentation happens on the mono source before spatial rendering, so added
noise passes through the same impulse response as the speech. Augmentation
randomness is keyed by (data seed, item index, epoch) alone, so runs that
differ only in model seed train on identical data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch.nn import functional as F

from . import features as frontend
from . import spatial
from .corpus import NUM_CLASSES, WORKING_RATE
from .model import KwsResNet, ModelSpec, save_checkpoint

_STREAM_AUG = 200
_STREAM_REGEN = 201
_STREAM_SHUFFLE = 202

TASK_KWS = "kws"
TASK_DETECTION = "detection"

SCHEMES = ("constant", "dtp", "inverse_accuracy", "loss_ratio")

# input column ranges per model variant; features always stack front then
# rear, 40 coefficients each
VARIANTS = ("baseline", "front", "rear", "dual")


def variant_columns(variant: str, num_coeffs: int = 40) -> slice:
    if variant == "front":
        return slice(0, num_coeffs)
    if variant == "rear":
        return slice(num_coeffs, 2 * num_coeffs)
    if variant in ("dual", "baseline"):
        return slice(None)
    raise ValueError(f"unknown variant {variant!r}")


def variant_spec(variant: str, base: ModelSpec) -> ModelSpec:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(base, multitask=(variant != "baseline"))


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 26
    batch_size: int = 64
    momentum: float = 0.9
    lr0: float = 0.1
    decay: float = 1e-5
    regen_fraction: float = 0.3
    regen_exact: bool = False
    noise_prob: float = 0.8
    shift_range_ms: tuple = (-100.0, 100.0)
    augment: bool = True
    # external-speaker utterances keep their true word label in the KWS loss
    # by default; "mask" drops them from that loss term instead
    external_kws_labels: str = "true"
    loss_scheme: str = "dtp"
    seed: int = 0

    def validate(self) -> None:
        if min(self.epochs, self.batch_size) <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.momentum, self.lr0) < 0 or self.decay < 0:
            raise ValueError("rates must be non-negative")
        if not 0.0 <= self.regen_fraction <= 1.0:
            raise ValueError("regen_fraction must lie in [0, 1]")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")
        if self.loss_scheme not in SCHEMES:
            raise ValueError(f"loss_scheme must be one of {SCHEMES}")
        if self.external_kws_labels not in ("true", "mask"):
            raise ValueError("external_kws_labels must be 'true' or 'mask'")


# -- loss weighting ----------------------------------------------------------

def total_loss(losses, weights) -> float:
    if len(losses) != len(weights):
        raise ValueError("losses and weights must align")
    for loss in losses:
        if loss < 0:
            raise ValueError(f"task losses are cross-entropies and cannot be "
                             f"negative, got {loss}")
    return float(sum(w * l for w, l in zip(weights, losses)))


def ema_update(prev: float | None, new: float, alpha: float = 0.75) -> float:
    if prev is None:
        return float(new)
    return float(alpha * prev + (1.0 - alpha) * new)


@dataclass
class LossWeightState:
    scheme: str
    num_tasks: int = 2
    alpha: float = 0.75
    initial_losses: tuple = (math.log(NUM_CLASSES), math.log(2))
    ema_accuracy: list = field(default_factory=list)
    ema_loss: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown loss-weighting scheme {self.scheme!r}")
        if not self.ema_accuracy:
            self.ema_accuracy = [None] * self.num_tasks
        if not self.ema_loss:
            self.ema_loss = [None] * self.num_tasks
        if not self.weights:
            self.weights = [1.0] * self.num_tasks


def update_loss_weights(state: LossWeightState, accuracies,
                        losses) -> LossWeightState:
    """Fold one epoch's per-task training accuracy and loss into the moving
    averages, then recompute weights for the next epoch. Raw weights are
    normalized so they sum to the task count."""
    n = state.num_tasks
    if len(accuracies) != n or len(losses) != n:
        raise ValueError("per-task stats must match the task count")
    ema_acc = [ema_update(p, a, state.alpha)
               for p, a in zip(state.ema_accuracy, accuracies)]
    ema_loss = [ema_update(p, l, state.alpha)
                for p, l in zip(state.ema_loss, losses)]

    if state.scheme == "constant":
        raw = [1.0] * n
    elif state.scheme == "dtp":
        if min(ema_acc) <= 0:
            raise ValueError(f"dtp needs accuracy averages in (0, 1], got {ema_acc}")
        raw = [-(1.0 - k) * math.log(k) for k in ema_acc]
    elif state.scheme == "inverse_accuracy":
        if min(ema_acc) <= 0:
            raise ValueError(f"inverse-accuracy weight undefined at zero "
                             f"accuracy: {ema_acc}")
        raw = [1.0 / k for k in ema_acc]
    else:  # loss_ratio
        if min(ema_loss) <= 0:
            raise ValueError(f"loss_ratio needs positive loss averages, got {ema_loss}")
        raw = [l / l0 for l, l0 in zip(ema_loss, state.initial_losses)]

    total = sum(raw)
    if total > 0:
        weights = [r * n / total for r in raw]
    else:
        weights = [1.0] * n  # every task converged; keep the split even
    return LossWeightState(scheme=state.scheme, num_tasks=n, alpha=state.alpha,
                           initial_losses=state.initial_losses,
                           ema_accuracy=ema_acc, ema_loss=ema_loss,
                           weights=weights)


# -- augmentation ------------------------------------------------------------

def time_shift(samples: np.ndarray, shift_samples: int) -> np.ndarray:
    out = np.zeros_like(samples)
    if shift_samples > 0:
        out[shift_samples:] = samples[:-shift_samples or None]
    elif shift_samples < 0:
        out[:shift_samples] = samples[-shift_samples:]
    else:
        out[:] = samples
    return out


def augment(samples: np.ndarray, noise_bank, rng: np.random.Generator,
            config: TrainConfig, sample_rate: int = WORKING_RATE) -> np.ndarray:
    """Random time shift, then (with probability noise_prob) an added noise
    segment of equal length scaled uniformly from [0, 1)."""
    u = rng.uniform(*config.shift_range_ms)
    out = time_shift(samples, int(round(u * sample_rate / 1000.0)))
    if rng.random() < config.noise_prob:
        noise = noise_bank[int(rng.integers(len(noise_bank)))]
        start = int(rng.integers(0, len(noise) - len(out) + 1))
        out = out + rng.uniform(0.0, 1.0) * noise[start:start + len(out)]
    return out


def regeneration_mask(num_items: int, rng: np.random.Generator,
                      fraction: float, exact: bool = False) -> np.ndarray:
    if exact:
        mask = np.zeros(num_items, dtype=bool)
        count = round(fraction * num_items)
        if count:
            mask[rng.choice(num_items, size=count, replace=False)] = True
        return mask
    return rng.random(num_items) < fraction


def regenerate_epoch(cache: np.ndarray, rebuild, rng: np.random.Generator,
                     fraction: float, exact: bool = False) -> int:
    """Re-augment a random subset of the cached feature tensors in place;
    untouched entries stay bit-identical. Returns the regenerated count."""
    mask = regeneration_mask(len(cache), rng, fraction, exact)
    for i in np.flatnonzero(mask):
        cache[i] = rebuild(int(i))
    return int(mask.sum())


def lr_at(step: int, lr0: float = 0.1, decay: float = 1e-5) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return lr0 / (1.0 + decay * step)


class MomentumSgd:
    """v <- momentum * v - lr * g; w <- w + v, applied per parameter."""

    def __init__(self, params, momentum: float = 0.9, lr0: float = 0.1,
                 decay: float = 1e-5):
        self.params = list(params)
        self.momentum = momentum
        self.lr0 = lr0
        self.decay = decay
        self.step_count = 0
        self.velocity = [torch.zeros_like(p) for p in self.params]

    @property
    def lr(self) -> float:
        return lr_at(self.step_count, self.lr0, self.decay)

    @torch.no_grad()
    def step(self) -> None:
        lr = self.lr
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v.mul_(self.momentum).sub_(p.grad, alpha=lr)
            p.add_(v)
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training data -----------------------------------------------------------

@dataclass
class TrainItem:
    source: np.ndarray  # mono clip at the working rate, already 1 s
    ir: spatial.ImpulseResponsePair
    label: int
    own: bool


@dataclass
class TrainingData:
    train_items: list
    val_features: np.ndarray  # clean (n, T, F_full) from the feature cache
    val_labels: np.ndarray
    val_own: np.ndarray
    noise_bank: list
    level_scale: float
    frontend: frontend.FrontendConfig = field(default_factory=frontend.FrontendConfig)
    data_seed: int = 0


def _item_features(item: TrainItem, data: TrainingData, config: TrainConfig,
                   index: int, epoch: int) -> np.ndarray:
    wave = item.source
    if config.augment:
        rng = _rng(data.data_seed, _STREAM_AUG, index, epoch)
        wave = augment(wave, data.noise_bank, rng, config)
    rendered = spatial.render_spatial(wave, WORKING_RATE, item.ir,
                                      working_rate=WORKING_RATE,
                                      level_scale=data.level_scale)
    return frontend.extract_features(rendered, data.frontend).values


def build_feature_cache(data: TrainingData, config: TrainConfig,
                        epoch: int = 0) -> np.ndarray:
    mats = [_item_features(item, data, config, i, epoch)
            for i, item in enumerate(data.train_items)]
    return np.stack(mats)


# -- the loop ----------------------------------------------------------------

def _epoch_pass(model, feats, labels, own, config, state, optimizer, order):
    """One training epoch; returns per-task (loss, accuracy) averages."""
    n = len(order)
    sums = {"loss_kws": 0.0, "loss_det": 0.0, "hit_kws": 0.0, "hit_det": 0.0,
            "n_kws": 0}
    multitask = model.spec.multitask
    for lo in range(0, n, config.batch_size):
        idx = order[lo:lo + config.batch_size]
        x = torch.from_numpy(feats[idx])
        y = torch.from_numpy(labels[idx])
        logits, ov = model(x)

        if multitask and config.external_kws_labels == "mask":
            keep = torch.from_numpy(own[idx])
        else:
            keep = torch.ones(len(idx), dtype=torch.bool)
        if keep.any():
            loss_kws = F.cross_entropy(logits[keep], y[keep])
        else:
            loss_kws = logits.sum() * 0.0
        task_losses = [loss_kws]
        if multitask:
            target = torch.from_numpy(own[idx]).float()
            task_losses.append(F.binary_cross_entropy(ov, target))

        loss = sum(w * l for w, l in zip(state.weights, task_losses))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {optimizer.step_count}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        m = int(keep.sum())
        sums["n_kws"] += m
        sums["loss_kws"] += float(task_losses[0].detach()) * m
        sums["hit_kws"] += int((logits.argmax(1)[keep] == y[keep]).sum())
        if multitask:
            sums["loss_det"] += float(task_losses[1].detach()) * len(idx)
            sums["hit_det"] += int(((ov > 0.5).detach().numpy() == own[idx]).sum())

    kws = (sums["loss_kws"] / max(sums["n_kws"], 1),
           sums["hit_kws"] / max(sums["n_kws"], 1))
    if not multitask:
        return [kws]
    return [kws, (sums["loss_det"] / n, sums["hit_det"] / n)]


def _validate(model, feats, labels, own, batch_size):
    model.eval()
    stats = {"loss_kws": 0.0, "hit_kws": 0.0, "loss_det": 0.0, "hit_det": 0.0}
    n = len(feats)
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            x = torch.from_numpy(feats[lo:lo + batch_size])
            y = torch.from_numpy(labels[lo:lo + batch_size])
            logits, ov = model(x)
            stats["loss_kws"] += float(F.cross_entropy(logits, y, reduction="sum"))
            stats["hit_kws"] += int((logits.argmax(1) == y).sum())
            if ov is not None:
                target = torch.from_numpy(own[lo:lo + batch_size]).float()
                stats["loss_det"] += float(F.binary_cross_entropy(
                    ov, target, reduction="sum"))
                stats["hit_det"] += int(((ov > 0.5).numpy() == own[lo:lo + batch_size]).sum())
    model.train()
    out = [(stats["loss_kws"] / n, stats["hit_kws"] / n)]
    if model.spec.multitask:
        out.append((stats["loss_det"] / n, stats["hit_det"] / n))
    return out


def train(spec: ModelSpec, config: TrainConfig, data: TrainingData,
          checkpoint_path, metrics_path, variant: str = "dual") -> dict:
    """Full training run for one variant and seed. Writes the best-validation
    checkpoint and a line-delimited per-epoch metrics log; returns a summary
    with the selected epoch and its validation accuracies."""
    config.validate()
    spec = variant_spec(variant, spec)
    cols = variant_columns(variant)
    torch.set_num_threads(1)

    items = data.train_items
    val_feats = data.val_features
    val_labels, val_own = data.val_labels, data.val_own
    if not spec.multitask:
        # the single-task configuration sees the wearer's speech only
        keep = [i for i, it in enumerate(items) if it.own]
        items = [items[i] for i in keep]
        val_keep = val_own.astype(bool)
        val_feats, val_labels, val_own = (val_feats[val_keep],
                                          val_labels[val_keep],
                                          val_own[val_keep])
    if not items or not len(val_feats):
        raise ValueError("empty training or validation set")

    run_data = replace(data, train_items=items)
    cache = build_feature_cache(run_data, config, epoch=0)
    labels = np.array([it.label for it in items], dtype=np.int64)
    own = np.array([it.own for it in items], dtype=bool)
    val_view = np.ascontiguousarray(val_feats[:, :, cols])

    model = KwsResNet(spec, init_seed=config.seed)
    model.train()
    optimizer = MomentumSgd(model.parameters(), config.momentum,
                            config.lr0, config.decay)
    num_tasks = 2 if spec.multitask else 1
    state = LossWeightState(scheme=config.loss_scheme if spec.multitask else "constant",
                            num_tasks=num_tasks)

    best = {"metric": -1.0, "epoch": -1}
    history = []
    with open(metrics_path, "w", encoding="utf-8") as log:
        for epoch in range(1, config.epochs + 1):
            if epoch > 1 and config.regen_fraction > 0 and config.augment:
                regen_rng = _rng(data.data_seed, _STREAM_REGEN, epoch)
                regenerate_epoch(
                    cache,
                    lambda i: _item_features(items[i], run_data, config, i, epoch),
                    regen_rng, config.regen_fraction, config.regen_exact)
            order = _rng(config.seed, _STREAM_SHUFFLE, epoch).permutation(len(items))
            feats_view = np.ascontiguousarray(cache[:, :, cols])

            try:
                train_stats = _epoch_pass(model, feats_view, labels, own,
                                          config, state, optimizer, order)
            except FloatingPointError as err:
                save_checkpoint(checkpoint_path, model, config.seed,
                                meta={"aborted_epoch": epoch, "error": str(err)})
                raise RuntimeError(
                    f"training diverged in epoch {epoch}: {err}; diagnostic "
                    f"checkpoint written to {checkpoint_path}") from err
            val_stats = _validate(model, val_view, val_labels, val_own,
                                  config.batch_size)

            record = {
                "epoch": epoch,
                "lr": optimizer.lr,
                "lambda": list(state.weights),
                "train_loss_kws": train_stats[0][0],
                "train_acc_kws": train_stats[0][1],
                "val_loss_kws": val_stats[0][0],
                "val_acc_kws": val_stats[0][1],
            }
            if spec.multitask:
                record.update(train_loss_detection=train_stats[1][0],
                              train_acc_detection=train_stats[1][1],
                              val_loss_detection=val_stats[1][0],
                              val_acc_detection=val_stats[1][1])
            log.write(json.dumps(record, sort_keys=True) + "\n")
            history.append(record)

            metric = float(np.mean([s[1] for s in val_stats]))
            if metric > best["metric"]:
                best = {"metric": metric, "epoch": epoch}
                save_checkpoint(checkpoint_path, model, config.seed,
                                meta={"epoch": epoch, "val_metric": metric,
                                      "variant": variant})
            state = update_loss_weights(state, [s[1] for s in train_stats],
                                        [s[0] for s in train_stats])
    return {"best_epoch": best["epoch"], "best_val_metric": best["metric"],
            "history": history, "variant": variant}
