"""Augmented-Lagrangian alternation for the constrained architecture/weight search."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attacks import AttackBudget, free_at_epoch, pgd
from .flops import calibrate_gamma, dilation_flops, flops_scaled_loss
from .nn import SGD, Backbone, standard_loss
from .supernet import HybridModel, discretize, sample_channel_masks
from .tensor import NumericalError, Tensor


class DivergenceError(NumericalError):
    def __init__(self, msg: str, state: "AdmmState | None" = None):
        if state is not None:
            msg = f"{msg}; state: {state.dump()}"
        super().__init__(msg)
        self.state = state


@dataclass
class AdmmState:
    lambda1: float = 0.0
    lambda2: float = 0.0
    rho: float = 1.0
    eta1: float = 3e-4
    eta2: float = 0.025
    c1_history: list[float] = field(default_factory=list)
    c2_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    def dump(self) -> str:
        d = asdict(self)
        d["c1_history"] = d["c1_history"][-5:]
        d["c2_history"] = d["c2_history"][-5:]
        return repr(d)


def augmented_lagrangian(objective, c, lam: float, rho: float):
    """objective + lam * c + (rho / 2) * max(0, c)^2 for floats or graph tensors."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    if isinstance(objective, Tensor) or isinstance(c, Tensor):
        c = T.as_tensor(c)
        pos = T.relu(c)
        return T.as_tensor(objective) + T.scale(c, lam) + T.scale(T.mul(pos, pos), rho / 2)
    return objective + lam * c + 0.5 * rho * max(0.0, c) ** 2


def multiplier_update(lam: float, c: float, rho: float) -> float:
    """lam + rho * c, clamped at zero (inequality constraint)."""
    return max(0.0, lam + rho * float(c))


def solve_toy(target: float = 2.0, bound: float = 1.0, u0: float = 0.0, rho: float = 1.0,
              lr: float = 0.05, iters: int = 5000, tol: float = 1e-3):
    """min (u - target)^2 s.t. u - bound <= 0 with the same alternating updates.

    Returns (u, lambda, iterations used, lambda trace, constraint trace).
    """
    u, lam = float(u0), 0.0
    lams, cs = [], []
    for it in range(1, iters + 1):
        ut = Tensor(u, requires_grad=True)
        c = T.sub(ut, bound)
        obj = T.mul(T.sub(ut, target), T.sub(ut, target))
        (g,) = T.grad(augmented_lagrangian(obj, c, lam, rho), [ut])
        u -= lr * float(g)
        c_val = u - bound
        lam = multiplier_update(lam, c_val, rho)
        lams.append(lam)
        cs.append(c_val)
        if abs(u - bound) < tol and abs(lam - 2 * (target - bound)) < tol:
            return u, lam, it, lams, cs
    return u, lam, iters, lams, cs


def _split(logits: Tensor, n: int) -> tuple[Tensor, Tensor]:
    total = logits.shape[0]
    return T.take(logits, np.arange(n), axis=0), T.take(logits, np.arange(n, total), axis=0)


def reference_loss(backbone: Backbone, x_adv: np.ndarray, x: np.ndarray, y) -> float:
    """Clean standard loss of the backbone, evaluated exactly as the hybrid's clean half."""
    with T.no_grad():
        logits = backbone.logits(np.concatenate([x_adv, x]))
        return float(standard_loss(_split(logits, len(x_adv))[1], y).data)


def constraint_value(hybrid: HybridModel, backbone: Backbone, x, y) -> Tensor:
    """L_std(hybrid) - L_std(backbone) on the same clean batch."""
    with T.no_grad():
        ref = float(standard_loss(backbone.logits(x), y).data)
    return T.sub(standard_loss(hybrid.logits(x), y), ref)


def hybrid_losses(hybrid: HybridModel, x_adv, x: np.ndarray, y) -> tuple[Tensor, Tensor]:
    """(adversarial loss, clean loss) from one forward over the stacked batch."""
    xa = T.as_tensor(x_adv)
    stacked = T.concat([xa, Tensor(x)], axis=0)
    adv_logits, clean_logits = _split(hybrid.logits(stacked), len(x))
    return standard_loss(adv_logits, y), standard_loss(clean_logits, y)


@dataclass
class FlopsTerm:
    enabled: bool = True
    gamma: float | None = None  # None: calibrate at search start
    tau: float = 1.0
    mode: str = "pow"


def arch_objective(hybrid: HybridModel, state: AdmmState, x_adv, x, y, ref: float,
                   flops: FlopsTerm) -> tuple[Tensor, dict]:
    adv, std = hybrid_losses(hybrid, x_adv, x, y)
    c1 = T.sub(std, ref)
    if flops.enabled:
        total = dilation_flops(hybrid.dilation)
        obj = flops_scaled_loss(total, adv, flops.gamma, flops.tau, flops.mode)
        ef = float(total.data)
    else:
        obj, ef = adv, float(dilation_flops(hybrid.dilation).data)
    lag = augmented_lagrangian(obj, c1, state.lambda1, state.rho)
    return lag, {"adv": float(adv.data), "std": float(std.data), "c": float(c1.data),
                 "objective": float(obj.data), "flops": ef}


def arch_step(hybrid: HybridModel, backbone: Backbone, state: AdmmState, x_adv, x, y,
              flops: FlopsTerm) -> dict:
    """alpha, beta <- minus eta1 * grad L(alpha, lambda1); then lambda1 <- max(0, lambda1 + rho c1)."""
    ref = reference_loss(backbone, x_adv, x, y)
    params = hybrid.dilation.arch_parameters()
    lag, info = arch_objective(hybrid, state, x_adv, x, y, ref, flops)
    grads = T.grad(lag, params)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("arch_step: non-finite gradient", state)
    for p, g in zip(params, grads):
        p.data = p.data - state.eta1 * g
    state.lambda1 = multiplier_update(state.lambda1, info["c"], state.rho)
    state.c1_history.append(info["c"])
    return info


def weight_objective(hybrid: HybridModel, state: AdmmState, x_adv, x, y, ref: float) -> tuple[Tensor, dict]:
    adv, std = hybrid_losses(hybrid, x_adv, x, y)
    c2 = T.sub(std, ref)
    lag = augmented_lagrangian(adv, c2, state.lambda2, state.rho)
    return lag, {"adv": float(adv.data), "std": float(std.data), "c": float(c2.data)}


def weight_step(hybrid: HybridModel, backbone: Backbone, state: AdmmState, optimizer: SGD,
                x_adv, x, y) -> dict:
    """theta_d <- minus eta2 * grad L(theta_d, lambda2); then lambda2 <- max(0, lambda2 + rho c2)."""
    ref = reference_loss(backbone, np.asarray(x_adv), x, y)
    lag, info = weight_objective(hybrid, state, x_adv, x, y, ref)
    grads = T.grad(lag, optimizer.params)
    _apply_weight_update(optimizer, grads, state, info["c"])
    return info


def _apply_weight_update(optimizer: SGD, grads, state: AdmmState, c: float) -> None:
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("weight_step: non-finite gradient", state)
    optimizer.step(grads)
    state.lambda2 = multiplier_update(state.lambda2, c, state.rho)
    state.c2_history.append(c)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * epoch / epochs))


METRIC_COLUMNS = ("epoch", "std_train_loss", "adv_train_loss", "std_valid_loss", "adv_valid_loss",
                  "c1", "c2", "lambda1", "lambda2", "expected_flops")


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator | None,
                    drop_last: bool = True):
    n = len(x)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if (drop_last and n >= batch_size) else n
    for s in range(0, stop, batch_size):
        idx = order[s: s + batch_size]
        yield x[idx], y[idx]


@dataclass
class SearchSettings:
    epochs: int = 10
    batch_size: int = 32
    free_replay: int = 8
    momentum: float = 0.9
    weight_decay: float = 3e-4
    arch_attack_steps: int = 1
    cotrain_backbone: bool = False
    backbone_lr: float = 0.01
    grad_clip: float | None = 5.0
    seed: int = 0


def search(hybrid: HybridModel, train: tuple[np.ndarray, np.ndarray], valid: tuple[np.ndarray, np.ndarray],
           state: AdmmState, budget: AttackBudget, flops: FlopsTerm, settings: SearchSettings,
           on_epoch: Callable[[dict], None] | None = None):
    """Alternate FreeAT weight steps (train half) with arch steps (valid half).

    Returns (genotype, metrics rows). The backbone stays frozen unless
    ``settings.cotrain_backbone``.
    """
    backbone, dilation = hybrid.backbone, hybrid.dilation
    if flops.enabled and flops.gamma is None:
        with T.no_grad():
            flops.gamma = calibrate_gamma(float(dilation_flops(dilation).data), flops.tau, flops.mode)
    opt = SGD(dilation.parameters(), lr=state.eta2, momentum=settings.momentum,
              weight_decay=settings.weight_decay, grad_clip=settings.grad_clip)
    bb_opt = SGD(backbone.parameters(), lr=settings.backbone_lr, momentum=settings.momentum) \
        if settings.cotrain_backbone else None
    rng = np.random.default_rng(settings.seed)
    arch_budget = AttackBudget(budget.epsilon, settings.arch_attack_steps,
                               budget.epsilon if settings.arch_attack_steps == 1 else budget.step_size,
                               budget.p, budget.clamp, random_start=False)
    rows = []
    delta = None
    for epoch in range(settings.epochs):
        opt.lr = cosine_lr(state.eta2, epoch, settings.epochs)
        for arch in {id(a): a for a in dilation.archs}.values():
            if arch.channel_ratio < 1:
                sample_channel_masks(arch, dilation.channel_counts(), seed=settings.seed * 100003 + epoch)
        tr, va = [], []
        valid_batches = iterate_batches(*valid, settings.batch_size, rng)
        for xb, yb in iterate_batches(*train, settings.batch_size, rng):
            holder = {}

            def loss_fn(xt, x_clean, y, _holder=holder):
                ref = reference_loss(backbone, xt.data, x_clean, y)
                lag, info = weight_objective(hybrid, state, xt, x_clean, y, ref)
                _holder.update(info)
                tr.append(info)
                return lag

            def update(grads, _holder=holder):
                _apply_weight_update(opt, grads, state, _holder["c"])
                if bb_opt is not None:
                    bb_opt.step(T.grad(standard_loss(backbone.logits(xb), yb), bb_opt.params))

            delta = free_at_epoch(opt.params, loss_fn, [(xb, yb)], settings.free_replay, budget,
                                  update, delta)
            xv, yv = next(valid_batches, (None, None))
            if xv is None:
                continue
            fwd = hybrid.logits
            xv_adv = pgd(fwd, xv, yv, arch_budget)
            va.append(arch_step(hybrid, backbone, state, xv_adv, xv, yv, flops))
            if not np.isfinite(va[-1]["objective"]):
                raise DivergenceError("search: non-finite architecture objective", state)
        row = _epoch_row(epoch, tr, va, state, dilation)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    genotypes = [discretize(a, cells_per_block=dilation.cells_per_block) for a in dilation.archs]
    return (genotypes[0] if len(genotypes) == 1 else genotypes), rows


def _mean(xs, key):
    vals = [d[key] for d in xs]
    return float(np.mean(vals)) if vals else float("nan")


def _epoch_row(epoch: int, tr: list[dict], va: list[dict], state: AdmmState, dilation) -> dict:
    for d in tr + va:
        if not all(np.isfinite(v) for v in d.values()):
            raise DivergenceError(f"epoch {epoch}: non-finite loss", state)
    with T.no_grad():
        ef = float(dilation_flops(dilation).data)
    return {
        "epoch": epoch,
        "std_train_loss": _mean(tr, "std"),
        "adv_train_loss": _mean(tr, "adv"),
        "std_valid_loss": _mean(va, "std"),
        "adv_valid_loss": _mean(va, "adv"),
        "c1": _mean(va, "c"),
        "c2": _mean(tr, "c"),
        "lambda1": state.lambda1,
        "lambda2": state.lambda2,
        "expected_flops": ef,
    }
