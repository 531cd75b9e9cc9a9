"""Fine-tuning a pre-trained MiniNet on a target domain with a frozen body."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, resize_dataset
from .gradcore import Network, NetworkSpec, block_of, init_head
from .trainer import TrainConfig, TrainHistory, train

SEED_BASE = 20_000_000
SEED_STRIDE = 100_000


@dataclass(frozen=True)
class FreezePlan:
    """Tune the head plus the last ``tuned_blocks`` residual blocks.

    The stem only trains when every block does.
    """
    tuned_blocks: int
    tune_head: bool = True

    def __post_init__(self):
        if self.tuned_blocks < 0:
            raise ValueError("tuned_blocks must be >= 0")
        if not self.tune_head:
            raise ValueError("the head is always tuned")


@dataclass(frozen=True)
class SubsetSpec:
    size: int
    seed: int


@dataclass(frozen=True)
class FineTuneConfig:
    freeze: FreezePlan
    subset: SubsetSpec
    train: TrainConfig
    head_init_seed: int


def seed_set(k: int) -> list[int]:
    """The first ``k`` seeds of the 20000000 + 100000 i family."""
    if k < 1:
        raise ValueError(f"need at least one seed, got {k}")
    return [SEED_BASE + SEED_STRIDE * i for i in range(k)]


def subset_indices(labels, size: int, seed: int, num_labels: int | None = None) -> np.ndarray:
    """Sample ``size`` distinct indices covering every label at least once.

    One example per label is drawn first (labels ascending), then the rest
    are drawn uniformly without replacement from what is left.  The result
    is sorted.
    """
    labels = np.asarray(labels)
    num_labels = int(labels.max()) + 1 if num_labels is None else num_labels
    if size > len(labels):
        raise ValueError(f"subset of {size} requested from {len(labels)} examples")
    if size < num_labels:
        raise ValueError(f"subset of {size} cannot cover {num_labels} labels")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(num_labels):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"label {c} has no examples to sample from")
        picked.append(int(members[rng.integers(len(members))]))
    rest = np.setdiff1d(np.arange(len(labels)), picked)
    fill = rng.choice(rest, size=size - num_labels, replace=False)
    return np.sort(np.concatenate([picked, fill]).astype(np.int64))


def sample_subset(data: Dataset, spec: SubsetSpec) -> Dataset:
    idx = subset_indices(data.labels, spec.size, spec.seed, data.num_labels)
    return data.subset(idx, name=f"{data.name}[n={spec.size},seed={spec.seed}]")


def reinit_head(net: Network, num_labels_target: int, seed: int) -> Network:
    """Fresh head for ``num_labels_target`` classes; the body is copied bit for bit."""
    if num_labels_target < 2:
        raise ValueError("target needs at least two labels")
    spec = NetworkSpec(net.spec.input_shape, net.spec.blocks, num_labels_target)
    weight, bias = init_head(num_labels_target, spec.width, np.random.default_rng(seed))
    params = {k: v.copy() for k, v in net.params.items() if block_of(k) != "head"}
    params["head.weight"], params["head.bias"] = weight, bias
    return Network(spec, params)


def tuned_groups(num_blocks: int, plan: FreezePlan) -> set[str]:
    if plan.tuned_blocks > num_blocks:
        raise ValueError(f"cannot tune {plan.tuned_blocks} blocks of a {num_blocks}-block network")
    groups = {"head"} | {f"block{i}" for i in range(num_blocks - plan.tuned_blocks + 1, num_blocks + 1)}
    if plan.tuned_blocks == num_blocks:
        groups.add("stem")
    return groups


def freeze_mask(net: Network, plan: FreezePlan) -> dict[str, bool]:
    """``True`` for parameters that fine-tuning may update."""
    groups = tuned_groups(net.spec.num_blocks, plan)
    return {name: block_of(name) in groups for name in net.params}


def fine_tune(source: Network, target: Dataset, cfg: FineTuneConfig, *, test_data: Dataset | None = None,
              eval_epochs=None) -> tuple[Network, TrainHistory]:
    """reinit_head -> sample_subset -> train with the body frozen per ``cfg.freeze``.

    Optimiser state starts fresh for every call.  Target images are resized
    to the network's input resolution when they differ.
    """
    net = reinit_head(source, target.num_labels, cfg.head_init_seed)
    if len(net.spec.input_shape) == 3:
        h, w = net.spec.input_shape[1:]
        target = resize_dataset(target, h, w)
        if test_data is not None:
            test_data = resize_dataset(test_data, h, w)
    subset = sample_subset(target, cfg.subset)
    mask = freeze_mask(net, cfg.freeze)
    return train(net, subset, cfg.train, test_data=test_data, eval_epochs=eval_epochs, trainable=mask)
