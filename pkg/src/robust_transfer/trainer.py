"""Outer minimisation: momentum SGD with step decay over natural, PGD or
Gaussian-perturbed minibatches."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .adversary import AttackConfig, PerturbationConstraint, gaussian_batch, pgd_attack
from .gradcore import Batch, Network, forward, loss_and_grads

log = logging.getLogger(__name__)

Adversary = Union[None, AttackConfig, PerturbationConstraint]


@dataclass(frozen=True)
class OptimizerHyper:
    lr0: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 10.0
    decay_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing: {self.decay_epochs}")


@dataclass(frozen=True)
class TrainConfig:
    hyper: OptimizerHyper
    epochs: int
    adversary: Adversary = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: Optional[float] = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def evaluated(self) -> list[EpochRecord]:
        return [r for r in self.records if r.test_accuracy is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "train_loss", "test_accuracy"])
            for r in self.records:
                acc = "" if r.test_accuracy is None else fmt_float(r.test_accuracy)
                writer.writerow([r.epoch, fmt_float(r.lr), fmt_float(r.train_loss), acc])


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def lr_at(epoch: int, hyper: OptimizerHyper) -> float:
    """Learning rate in (1-based) ``epoch``: one decay per milestone reached."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    decays = sum(1 for e in hyper.decay_epochs if e <= epoch)
    return hyper.lr0 * (1.0 / hyper.lr_decay_factor) ** decays


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, hyper: OptimizerHyper):
    """Heavy-ball step ``v = m v + g + wd p; p = p - lr v``.

    Only names present in ``grads`` move; everything else is returned as is.
    """
    new_params = dict(params)
    new_velocity = dict(velocity)
    for name, g in grads.items():
        p = params[name]
        v = hyper.momentum * velocity.get(name, 0.0) + g
        if hyper.weight_decay:
            v = v + hyper.weight_decay * p
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


def perturbation(net: Network, x, y, adversary: Adversary, seed: int, keys, pixel_range=(0.0, 1.0)):
    if adversary is None:
        return np.zeros_like(x)
    if isinstance(adversary, AttackConfig):
        return pgd_attack(net, Batch(x, y), adversary, pixel_range=pixel_range)
    delta = gaussian_batch(x.shape, adversary, seed, keys)
    if pixel_range is not None:
        delta = np.clip(x + delta, *pixel_range) - x
    return delta


def _check_compatible(net: Network, data, adversary: Adversary):
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    per_example = int(np.prod(data.images.shape[1:]))
    if per_example != net.spec.input_size:
        raise ValueError(f"dataset {data.name!r} examples have shape {data.images.shape[1:]}, "
                         f"network expects {net.spec.input_shape}")
    if data.labels.min() < 0 or data.labels.max() >= net.spec.num_labels:
        raise ValueError(f"labels of {data.name!r} exceed the head's {net.spec.num_labels} classes")
    if isinstance(adversary, PerturbationConstraint) and adversary.norm != "l2":
        raise ValueError("gaussian training requires an L2 constraint")


def train(net: Network, data, cfg: TrainConfig, *, test_data=None, eval_epochs=None,
          trainable=None, pixel_range=(0.0, 1.0)) -> tuple[Network, TrainHistory]:
    """Minibatch SGD over ``data`` with the configured adversary.

    ``trainable`` is an optional boolean mask (name -> bool); frozen
    parameters get no gradient, no velocity and no weight decay.
    ``eval_epochs`` selects the epochs at which ``test_data`` is scored
    (default: every epoch).  The last partial batch is kept.
    """
    _check_compatible(net, data, cfg.adversary)
    net = net.copy()
    names = [n for n in net.params if trainable is None or trainable[n]]
    velocity = {n: np.zeros_like(net.params[n]) for n in names}
    rng = np.random.default_rng(cfg.seed)
    hyper = cfg.hyper
    n = len(data)
    history = TrainHistory()
    if eval_epochs is None:
        eval_epochs = range(1, cfg.epochs + 1)
    eval_epochs = set(eval_epochs)

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, hyper)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            x, y = data.images[idx], data.labels[idx]
            delta = perturbation(net, x, y, cfg.adversary, cfg.seed,
                                 [(epoch, int(i)) for i in idx], pixel_range)
            loss, grads, _ = loss_and_grads(net, x + delta, y, params=names)
            net.params, velocity = sgd_step(net.params, grads, velocity, lr, hyper)
            total += loss * len(idx)
        acc = evaluate(net, test_data) if test_data is not None and epoch in eval_epochs else None
        history.records.append(EpochRecord(epoch, lr, total / n, acc))
        log.debug("epoch %d lr %.4g loss %.5f acc %s", epoch, lr, total / n, acc)
    return net, history


def predict(net: Network, images, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per example; ties go to the lowest class index."""
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(net, images[start:start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def evaluate(net: Network, data) -> float:
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, data.images) == data.labels))
