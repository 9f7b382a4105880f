"""Training driver: Adam with decoupled weight decay, polynomial learning-rate
decay, per-epoch validation, and divergence handling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .metrics import dsc
from .segnet import SegNet, total_loss
from .synthdata import VolumeSample, augment

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite; carries the component values."""

    def __init__(self, components):
        self.components = components
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"training loss diverged ({parts})")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_net(cls, net: SegNet) -> "AdamState":
        m = {n: np.zeros_like(net.params[n]) for n in net.trainable_names()}
        v = {n: np.zeros_like(net.params[n]) for n in net.trainable_names()}
        return cls(m=m, v=v, step=0)


def poly_lr(base_lr: float, epoch: int, total_epochs: int, power: float = 0.9) -> float:
    """base_lr * (1 - epoch/total)^power; reaches 0 at epoch == total."""
    frac = 1.0 - epoch / total_epochs
    return base_lr * frac ** power


def stack_batch(samples):
    """Assemble (B,1,H,W,D) images, (B,H,W,D) labels, (B,H,W,D) edges-or-None."""
    images = np.stack([s.image for s in samples])[:, None]
    labels = np.stack([s.labels for s in samples])
    edges = None
    if samples[0].edges is not None:
        edges = np.stack([s.edges for s in samples])
    return images, labels, edges


def train_step(net: SegNet, batch, opt: AdamState, lr: float, weight_decay: float):
    """One forward/backward/update. Returns the component losses as floats."""
    images, labels, edges = batch
    tape = Tape(np.float32)
    outputs, leaves = net.forward(tape, images, mode="train")
    edge_ref = None
    if net.config.edge_enabled:
        edge_ref = edges.reshape(images.shape[0], 1, *images.shape[2:])
    total, comps = total_loss(outputs, labels, edge_ref, net.config)
    values = {k: float(v.value) for k, v in comps.items()}
    values["total"] = float(total.value)
    if not np.isfinite(values["total"]):
        raise DivergenceError(values)
    tape.backward(total)

    opt.step += 1
    t = opt.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in net.trainable_names():
        g = tape.grad(leaves[name])
        m, v = opt.m[name], opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p = net.params[name]
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return values


def predict_labels(net: SegNet, image: np.ndarray) -> np.ndarray:
    """Eval-mode argmax segmentation of one preprocessed (H, W, D) volume."""
    tape = Tape(np.float32)
    outputs, _ = net.forward(tape, image[None, None], mode="eval")
    return outputs.final_logits.value[0].argmax(axis=0).astype(np.uint8)


def validate(net: SegNet, samples) -> dict:
    """Mean DSC per foreground class over a sample list (NaN-free means)."""
    k = net.config.num_classes
    per_class = {c: [] for c in range(1, k)}
    for s in samples:
        pred = predict_labels(net, s.image)
        for c in range(1, k):
            d = dsc(pred, s.labels, c)
            if np.isfinite(d):
                per_class[c].append(d)
    means = {c: (float(np.mean(v)) if v else float("nan")) for c, v in per_class.items()}
    finite = [m for m in means.values() if np.isfinite(m)]
    return {"per_class": means,
            "mean_foreground": float(np.mean(finite)) if finite else float("nan")}


def train_loop(net: SegNet, train_samples, val_samples, *, total_epochs: int,
               base_lr: float, weight_decay: float, batch_size: int, seed: int,
               start_epoch: int = 0, opt: AdamState = None, val_interval: int = 10,
               augment_enabled: bool = True, augment_angle: float = 15.0,
               early_stop_dsc: float = 0.0, log_fn=None, checkpoint_fn=None):
    """Run epochs [start_epoch, total_epochs); returns the epoch records.

    Deterministic for a fixed seed: the shuffle and augmentation stream of
    epoch e is seeded by (seed, e), so resumed runs replay the same batches.
    Divergence raises DivergenceError after logging; the last written
    checkpoint stays on disk.
    """
    if opt is None:
        opt = AdamState.for_net(net)
    records = []
    best = -np.inf
    n = len(train_samples)
    for epoch in range(start_epoch, total_epochs):
        lr = poly_lr(base_lr, epoch, total_epochs)
        rng = np.random.default_rng([seed, 7919, epoch])
        order = rng.permutation(n)
        sums, steps = {}, 0
        for at in range(0, n, batch_size):
            chunk = order[at:at + batch_size]
            if augment_enabled:
                picked = [augment(train_samples[i], rng, augment_angle) for i in chunk]
            else:
                picked = [train_samples[i] for i in chunk]
            values = train_step(net, stack_batch(picked), opt, lr, weight_decay)
            steps += 1
            for key, val in values.items():
                sums[key] = sums.get(key, 0.0) + val
        record = {"epoch": epoch, "lr": lr}
        record.update({f"loss_{k}": v / steps for k, v in sums.items()})

        is_val_epoch = val_interval and ((epoch + 1) % val_interval == 0 or epoch == total_epochs - 1)
        if is_val_epoch and val_samples:
            val = validate(net, val_samples)
            record["val_dsc_mean"] = val["mean_foreground"]
            for c, m in val["per_class"].items():
                record[f"val_dsc_c{c}"] = m
        records.append(record)
        if log_fn:
            log_fn(record)
        if checkpoint_fn:
            is_best = record.get("val_dsc_mean", -np.inf) > best
            if is_best:
                best = record["val_dsc_mean"]
            checkpoint_fn(epoch, net, opt, is_best, record)
        if early_stop_dsc and record.get("val_dsc_mean", 0.0) >= early_stop_dsc:
            break
    return records
