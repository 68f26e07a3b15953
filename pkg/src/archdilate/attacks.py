"""Adversarial example generation inside an l_p ball: FGSM, PGD and FreeAT replay."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import standard_loss
from .tensor import ShapeError, Tensor

Forward = Callable[[Tensor], Tensor]


@dataclass
class AttackBudget:
    epsilon: float = 8 / 255
    steps: int = 7
    step_size: float = 2 / 255
    p: float = np.inf
    clamp: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.p not in (np.inf, 2):
            raise ValueError(f"unsupported norm order {self.p}; use inf or 2")


def project_ball(x_adv: np.ndarray, x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """Project onto B_p(x, eps), then clamp to the valid pixel range."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ShapeError(f"project_ball: shapes {x_adv.shape} and {x.shape} differ")
    eps = budget.epsilon
    if budget.p == np.inf:
        out = np.clip(x_adv, x - eps, x + eps)
        # x + eps can round so that (x + eps) - x > eps; pull those back one ulp
        out = np.where(out - x > eps, np.nextafter(out, -np.inf), out)
        out = np.where(x - out > eps, np.nextafter(out, np.inf), out)
    else:
        d = (x_adv - x).reshape(len(x), -1)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        factor = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
        out = x + (d * factor).reshape(x.shape)
    return np.clip(out, *budget.clamp)


def input_gradient(forward: Forward, x: np.ndarray, y, loss_fn=standard_loss) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = loss_fn(forward(xt), y)
    return T.grad(loss, [xt])[0]


def _ascent_direction(g: np.ndarray, p) -> np.ndarray:
    if p == np.inf:
        return np.sign(g)  # sign(0) = 0
    flat = g.reshape(len(g), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return (flat / np.where(norms > 0, norms, 1.0)).reshape(g.shape)


def fgsm(forward: Forward, x, y, budget: AttackBudget, loss_fn=standard_loss) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if budget.epsilon == 0:
        return np.clip(x, *budget.clamp)
    g = input_gradient(forward, x, y, loss_fn)
    return project_ball(x + budget.epsilon * _ascent_direction(g, budget.p), x, budget)


def random_start(x: np.ndarray, budget: AttackBudget, rng: np.random.Generator) -> np.ndarray:
    if budget.p == np.inf:
        noise = rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape)
    else:
        d = rng.standard_normal(x.shape).reshape(len(x), -1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = budget.epsilon * rng.uniform(0, 1, size=(len(x), 1)) ** (1.0 / d.shape[1])
        noise = (d * r).reshape(x.shape)
    return project_ball(x + noise, x, budget)


def pgd(forward: Forward, x, y, budget: AttackBudget,
        rng: np.random.Generator | None = None, loss_fn=standard_loss) -> np.ndarray:
    """``steps`` iterations of signed-gradient ascent projected back onto the ball."""
    x = np.asarray(x, dtype=np.float64)
    if budget.epsilon == 0:
        return np.clip(x, *budget.clamp)
    if budget.random_start:
        if rng is None:
            raise ValueError("pgd: random_start requires an rng")
        x_adv = random_start(x, budget, rng)
    else:
        x_adv = x.copy()
    for _ in range(budget.steps):
        g = input_gradient(forward, x_adv, y, loss_fn)
        x_adv = project_ball(x_adv + budget.step_size * _ascent_direction(g, budget.p), x, budget)
    return x_adv


def free_at_epoch(params: Sequence[Tensor], loss_fn: Callable[[Tensor, np.ndarray, np.ndarray], Tensor],
                  batches, replay: int, budget: AttackBudget,
                  weight_update_fn: Callable[[list[np.ndarray]], None],
                  delta: np.ndarray | None = None,
                  on_replay: Callable[[Tensor], None] | None = None) -> np.ndarray:
    """One epoch of free adversarial training.

    ``loss_fn(x_adv, x_clean, y)`` must return the scalar training loss evaluated
    on ``x_adv``. Each minibatch is replayed ``replay`` times; every replay does
    a single backward pass that yields both the weight gradients (handed to
    ``weight_update_fn``) and the input gradient, which advances the persistent
    perturbation by one signed step of size epsilon. Returns the perturbation.
    """
    if replay < 1:
        raise ValueError(f"replay must be >= 1, got {replay}")
    params = list(params)
    for x, y in batches:
        x = np.asarray(x, dtype=np.float64)
        if delta is None:
            delta = np.zeros_like(x)
        elif delta.shape != x.shape:
            raise ShapeError(f"free_at_epoch: batch shape {x.shape} differs from perturbation "
                             f"buffer {delta.shape}")
        for _ in range(replay):
            x_adv = project_ball(x + delta, x, budget)
            xt = Tensor(x_adv, requires_grad=True)
            loss = loss_fn(xt, x, y)
            *gw, gx = T.grad(loss, params + [xt])
            if on_replay is not None:
                on_replay(loss)
            weight_update_fn(gw)
            step = budget.epsilon * _ascent_direction(gx, budget.p)
            delta = project_ball(x_adv + step, x, budget) - x
    return delta
