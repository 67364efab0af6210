"""Loss, optimizer, and the (serial, bit-reproducible) training loop.

The objective is 0.4 * cross-entropy + 0.6 * soft-Dice on softmax
probabilities, with the Dice term averaged over foreground classes only so
small structures keep their learning signal. AdamW applies decoupled weight
decay to matrix-shaped weights and never to biases or normalization gains.
The learning rate follows cosine decay from the configured peak to 1% of it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import tensor as T
from .errors import ConfigError, NumericsError
from .metrics import mean_dice
from .net import DCAUNet
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 24
    lr: float = 1e-3
    weight_decay: float = 1e-4
    ce_weight: float = 0.4
    dice_weight: float = 0.6
    seed: int = 0
    schedule: str = "cosine"
    augment: bool = True
    eval_every: int = 1
    dice_smooth: float = 1e-5
    target_soft_dsc: float = 0.0  # stop early once the epoch soft DSC reaches this

    def __post_init__(self):
        if abs(self.ce_weight + self.dice_weight - 1.0) > 1e-9:
            raise ConfigError(
                f"loss weights must sum to 1, got {self.ce_weight} + {self.dice_weight}"
            )
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size/epochs must be positive, got "
                              f"{self.batch_size}/{self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be cosine or constant, got {self.schedule!r}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**known)


def one_hot(masks: np.ndarray, num_classes: int) -> np.ndarray:
    masks = np.asarray(masks)
    if masks.min(initial=0) < 0 or masks.max(initial=0) >= num_classes:
        raise ConfigError(
            f"labels must lie in [0, {num_classes}), got "
            f"[{int(masks.min())}, {int(masks.max())}]"
        )
    return np.eye(num_classes, dtype=T.get_default_dtype())[masks]


def log_softmax_lastdim(logits: Tensor) -> Tensor:
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    centered = logits - shift
    return centered - T.log(T.exp(centered).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood of the true class."""
    targets = Tensor(one_hot(masks, logits.shape[-1]))
    log_probs = log_softmax_lastdim(logits)
    pixels = int(np.prod(logits.shape[:-1]))
    return -(log_probs * targets).sum() * (1.0 / pixels)


def soft_dice(logits: Tensor, masks: np.ndarray, smooth: float = 1e-5) -> tuple:
    """(loss, per-class soft Dice floats) over foreground classes.

    Soft Dice of class k is (2*sum(p_k*y_k) + smooth) / (sum(p_k) + sum(y_k)
    + smooth) on softmax probabilities; the loss is 1 minus their mean.
    """
    num_classes = logits.shape[-1]
    targets = one_hot(masks, num_classes)
    probs = T.softmax_lastdim(logits)
    per_class = []
    values = {}
    for class_id in range(1, num_classes):
        p = probs[..., class_id]
        y = Tensor(targets[..., class_id])
        intersection = (p * y).sum()
        denom = p.sum() + y.sum() + smooth
        dice_k = (2.0 * intersection + smooth) / denom
        per_class.append(dice_k)
        values[class_id] = dice_k.item()
    total = per_class[0]
    for dice_k in per_class[1:]:
        total = total + dice_k
    mean = total * (1.0 / len(per_class))
    return 1.0 - mean, values


def segmentation_loss(logits: Tensor, masks: np.ndarray, ce_weight: float = 0.4,
                      dice_weight: float = 0.6, smooth: float = 1e-5) -> tuple:
    """Weighted CE + soft-Dice loss; returns (scalar tensor, detail floats)."""
    ce = cross_entropy(logits, masks)
    dice_loss, per_class = soft_dice(logits, masks, smooth=smooth)
    total = ce_weight * ce + dice_weight * dice_loss
    detail = {
        "ce": ce.item(),
        "dice_loss": dice_loss.item(),
        "soft_dsc": 1.0 - dice_loss.item(),
        "per_class_soft_dice": per_class,
    }
    return total, detail


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter list.

    Decay applies only to parameters with >= 2 dimensions whose name does not
    mark them as a gain; biases and normalization gains are never decayed.
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.named = [(name, p) for name, p in named_params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    @staticmethod
    def _decays(name: str, param) -> bool:
        leaf = name.rsplit(".", 1)[-1]
        return param.data.ndim >= 2 and "gain" not in leaf and leaf != "bias"

    def parameter_groups(self) -> tuple:
        decay = [name for name, p in self.named if self._decays(name, p)]
        no_decay = [name for name, p in self.named if not self._decays(name, p)]
        return decay, no_decay

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        beta1, beta2 = self.betas
        for name, p in self.named:
            if p.grad is None:
                continue
            grad = p.grad
            if not np.all(np.isfinite(grad)):
                raise NumericsError(f"non-finite gradient in parameter {name}")
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * grad
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * grad * grad
            m_hat = self.m[name] / (1.0 - beta1 ** t)
            v_hat = self.v[name] / (1.0 - beta2 ** t)
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and self._decays(name, p):
                p.data = p.data * (1.0 - lr * self.weight_decay) - update
            else:
                p.data = p.data - update


def cosine_lr(epoch: int, total_epochs: int, peak: float, floor_fraction: float = 0.01) -> float:
    if total_epochs <= 1:
        return peak
    floor = floor_fraction * peak
    progress = epoch / (total_epochs - 1)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def evaluate_soft_dsc(net: DCAUNet, dataset, batch_size: int = 8,
                      smooth: float = 1e-5) -> float:
    """Mean foreground soft Dice of the current weights over a sample batch."""
    was_training = net.training
    net.eval()
    values = []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            logits = net(Tensor(dataset.images[start:start + batch_size]))
            dice_loss, _ = soft_dice(logits, dataset.masks[start:start + batch_size],
                                     smooth=smooth)
            values.append(1.0 - dice_loss.item())
    net.train(was_training)
    return float(np.mean(values))


def predict_masks(net: DCAUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax class maps for a stack of images, in eval mode without a graph."""
    was_training = net.training
    net.eval()
    outputs = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = Tensor(images[start:start + batch_size])
            logits = net(chunk)
            outputs.append(np.argmax(logits.data, axis=-1))
    net.train(was_training)
    return np.concatenate(outputs, axis=0)


def fit(net: DCAUNet, train_set, cfg: TrainConfig, out_dir=None, val_set=None) -> dict:
    """Train the network; returns the log plus checkpoint paths.

    Fully deterministic under a fixed config: batch order is a pure function
    of (epoch, seed), augmentation of (seed, epoch, sample index). The best
    checkpoint (validation DSC when a validation set is given, otherwise
    lowest training loss) is kept, and a non-finite loss halts training with
    the last good state saved.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = AdamW(net.named_parameters(), lr=cfg.lr,
                      weight_decay=cfg.weight_decay)
    if cfg.lr == 0:
        for module in net.modules():
            if hasattr(module, "track_stats"):
                module.track_stats = False

    log = []
    best = {"metric": -math.inf, "epoch": -1}
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None
    best_state = None
    last_good_state = {name: arr.copy() for name, arr in net.state_arrays().items()}
    halted = False

    for epoch in range(cfg.epochs):
        lr_epoch = (cosine_lr(epoch, cfg.epochs, cfg.lr)
                    if cfg.schedule == "cosine" else cfg.lr)
        order = data_mod.shuffled_indices(len(train_set), epoch, cfg.seed)
        net.train()
        epoch_losses = []
        epoch_soft_dsc = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = order[start:start + cfg.batch_size]
            images = train_set.images[chosen].copy()
            masks = train_set.masks[chosen].copy()
            if cfg.augment:
                for j, sample_index in enumerate(chosen):
                    seed = np.random.SeedSequence((cfg.seed, epoch, int(sample_index)))
                    images[j], masks[j] = data_mod.augment(images[j], masks[j], seed)
            logits = net(Tensor(images))
            loss, detail = segmentation_loss(
                logits, masks, ce_weight=cfg.ce_weight,
                dice_weight=cfg.dice_weight, smooth=cfg.dice_smooth,
            )
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                halted = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr_epoch)
            epoch_losses.append(loss_value)
            epoch_soft_dsc.append(detail["soft_dsc"])
            log.append({
                "kind": "step", "epoch": epoch, "step": step,
                "loss": loss_value, "ce": detail["ce"],
                "dice_loss": detail["dice_loss"], "lr": lr_epoch,
            })
        if halted:
            if last_path is not None:
                from .checkpoint import save_checkpoint
                save_checkpoint(last_path,
                                {"network": net.cfg.to_dict(), "seed": net.seed},
                                last_good_state)
            log.append({"kind": "halt", "epoch": epoch,
                        "reason": "non-finite loss; last good state saved"})
            break
        last_good_state = {name: arr.copy() for name, arr in net.state_arrays().items()}

        record = {
            "kind": "epoch", "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "soft_dsc": float(np.mean(epoch_soft_dsc)),
            "lr": lr_epoch,
        }
        metric = -record["loss"]
        if val_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            predictions = predict_masks(net, val_set.images)
            dscs = [mean_dice(predictions[i], val_set.masks[i], net.cfg.num_classes)[0]
                    for i in range(len(val_set))]
            record["val_dsc"] = float(np.mean(dscs))
            metric = record["val_dsc"]
        log.append(record)
        if metric > best["metric"]:
            best = {"metric": metric, "epoch": epoch}
            best_state = {name: arr.copy() for name, arr in net.state_arrays().items()}
            if best_path is not None:
                net.save(best_path)
        if cfg.target_soft_dsc and record["soft_dsc"] >= cfg.target_soft_dsc:
            log.append({"kind": "early_stop", "epoch": epoch,
                        "soft_dsc": record["soft_dsc"]})
            break

    if not halted and last_path is not None:
        net.save(last_path)
    if out_dir is not None:
        with open(out_dir / "train_log.jsonl", "w", encoding="ascii") as handle:
            for record in log:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
    return {
        "log": log,
        "best": best,
        "best_state": best_state,
        "best_checkpoint": str(best_path) if best_path else None,
        "last_checkpoint": str(last_path) if last_path else None,
        "halted": halted,
    }
