"""Inner maximisation: norm-ball projections, steepest-ascent steps and PGD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Batch, Network, forward, loss_and_grads, penultimate_grad_input

NORMS = ("l2", "linf")
DEFAULT_STEP_SCALE = 2.5


@dataclass(frozen=True)
class PerturbationConstraint:
    norm: str
    eps: float

    def __post_init__(self):
        norm = self.norm.lower()
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.eps >= 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        object.__setattr__(self, "norm", norm)
        object.__setattr__(self, "eps", float(self.eps))


@dataclass(frozen=True)
class AttackConfig:
    constraint: PerturbationConstraint
    steps: int = 20
    step_scale: float = DEFAULT_STEP_SCALE
    init: str = "zero"
    allow_any_scale: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.init != "zero":
            raise ValueError("only zero initialisation is supported")
        if not self.allow_any_scale and not 1.5 < self.step_scale < 4:
            raise ValueError(f"step_scale {self.step_scale} outside (1.5, 4); "
                             "pass allow_any_scale=True to override")

    @property
    def is_natural(self) -> bool:
        return self.steps == 0 or self.constraint.eps == 0

    @property
    def step_size(self) -> float:
        if self.steps == 0:
            return 0.0
        return self.step_scale * self.constraint.eps / self.steps


def _norms(delta, norm, batched):
    flat = delta.reshape(delta.shape[0], -1) if batched else delta.reshape(1, -1)
    if norm == "l2":
        return np.sqrt((flat * flat).sum(axis=1))
    return np.abs(flat).max(axis=1, initial=0.0)


def _expand(values, delta, batched):
    if batched:
        return values.reshape((-1,) + (1,) * (delta.ndim - 1))
    return values[0]


def project(delta, constraint: PerturbationConstraint, batched: bool = False) -> np.ndarray:
    """Euclidean projection onto ``{d : ||d||_p <= eps}``.

    With ``batched=True`` the leading axis indexes examples and each one is
    projected onto its own ball.
    """
    delta = np.asarray(delta, dtype=np.float64)
    eps = constraint.eps
    if eps == 0:
        return np.zeros_like(delta)
    if constraint.norm == "linf":
        return np.clip(delta, -eps, eps)
    norms = _norms(delta, "l2", batched)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > eps, eps / norms, 1.0)
    out = delta * _expand(scale, delta, batched)
    # rounding in eps/norm can overshoot the radius by an ulp
    over = _norms(out, "l2", batched) > eps
    if np.any(over):
        shrink = np.where(over, np.nextafter(1.0, 0.0), 1.0)
        out = out * _expand(shrink, out, batched)
    return out


def ascent_step(grad, constraint: PerturbationConstraint, alpha: float,
                batched: bool = False) -> np.ndarray:
    """Maximiser of ``<g, v>`` over ``||v||_p <= alpha``.

    L2 gives ``alpha * g / ||g||`` (zero for a zero gradient); Linf gives
    ``alpha * sign(g)`` with ``sign(0) = 0``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if alpha < 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if constraint.norm == "linf":
        return alpha * np.sign(grad)
    norms = _norms(grad, "l2", batched)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(norms > 0, alpha / norms, 0.0)
    return grad * _expand(inv, grad, batched)


def pgd(grad_fn, shape, cfg: AttackConfig, *, batched=False, clip=None, callback=None) -> np.ndarray:
    """Projected gradient ascent from zero.

    ``grad_fn(delta)`` returns the ascent gradient at ``delta``.  ``clip``,
    if given, maps a feasible delta to one that also keeps the input in its
    valid box (it may only shrink the perturbation).  ``callback(delta)`` sees
    every iterate.
    """
    delta = np.zeros(shape)
    if cfg.steps == 0 or cfg.constraint.eps == 0:
        return delta
    alpha = cfg.step_size
    for _ in range(cfg.steps):
        step = ascent_step(grad_fn(delta), cfg.constraint, alpha, batched=batched)
        delta = project(delta + step, cfg.constraint, batched=batched)
        if clip is not None:
            delta = clip(delta)
        if callback is not None:
            callback(delta)
    return delta


def _pixel_clip(x, low=0.0, high=1.0):
    # only entries that leave the box are replaced, so the perturbation never
    # grows through the rounding of (x + delta) - x
    def clip(delta):
        moved = x + delta
        delta = np.where(moved < low, low - x, delta)
        return np.where(moved > high, high - x, delta)
    return clip


def pgd_attack(net: Network, batch: Batch, cfg: AttackConfig, *, pixel_range=(0.0, 1.0),
               callback=None) -> np.ndarray:
    """Per-example PGD(k) perturbation maximising the cross-entropy.

    Each example has its own ball; gradients are those of the summed loss so
    examples never mix.  ``pixel_range=None`` disables the clamp of
    ``x + delta``.
    """
    x, y = batch.inputs, batch.labels

    def grad_fn(delta):
        return loss_and_grads(net, x + delta, y, params=False, inputs=True, reduction="sum")[2]

    clip = None if pixel_range is None else _pixel_clip(x, *pixel_range)
    return pgd(grad_fn, x.shape, cfg, batched=True, clip=clip, callback=callback)


def gaussian_perturb(shape, constraint: PerturbationConstraint, rng: np.random.Generator,
                     batched: bool = False) -> np.ndarray:
    """Standard-normal noise projected onto the L2 ball."""
    if constraint.norm != "l2":
        raise ValueError("gaussian perturbations are only defined for an L2 constraint")
    noise = rng.standard_normal(shape)
    return project(noise, constraint, batched=batched)


def example_rngs(seed: int, keys) -> list[np.random.Generator]:
    """Independent generators derived from ``(seed, *key)`` for each key.

    Streams depend only on the key, so serial and parallel code agree.
    """
    out = []
    for key in keys:
        key = key if isinstance(key, tuple) else (key,)
        out.append(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))))
    return out


def gaussian_batch(shape, constraint, seed: int, keys) -> np.ndarray:
    rngs = example_rngs(seed, keys)
    return np.stack([gaussian_perturb(shape[1:], constraint, rng) for rng in rngs])


def feature_visualize(net: Network, seed_image, class_index: int, steps: int, alpha: float,
                      *, return_trace: bool = False, max_halvings: int = 30):
    """Input-space ascent on ``<head.weight[class_index], penultimate(x)>``.

    Steps are L2-normalised gradient moves of length ``alpha``, clamped to
    [0, 1].  A step that lowers the objective is retried at half the length,
    so the objective trace never decreases.
    """
    num_labels = net.spec.num_labels
    if not 0 <= class_index < num_labels:
        raise ValueError(f"class_index {class_index} not in [0, {num_labels})")
    x = np.array(seed_image, dtype=np.float64)
    direction = net.params["head.weight"][class_index]

    def objective(img):
        value, grad = penultimate_grad_input(net, img[None], direction)
        return value[0], grad[0]

    value, grad = objective(x)
    trace = [value]
    step = float(alpha)
    for _ in range(steps):
        norm = np.linalg.norm(grad)
        if norm == 0:
            trace.append(value)
            continue
        for _ in range(max_halvings):
            candidate = np.clip(x + step * grad / norm, 0.0, 1.0)
            new_value, new_grad = objective(candidate)
            if new_value >= value:
                x, value, grad = candidate, new_value, new_grad
                break
            step /= 2
        trace.append(value)
    return (x, trace) if return_trace else x


def robust_accuracy(net: Network, inputs, labels, cfg: AttackConfig, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(labels), batch_size):
        batch = Batch(inputs[start:start + batch_size], labels[start:start + batch_size])
        delta = pgd_attack(net, batch, cfg)
        logits, _ = forward(net, batch.inputs + delta)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return correct / len(labels)
