"""Exact standard/adversarial error bounds on finite labeled domains.

Hypotheses are real score functions given by their values on the domain
points; expectations are exact weighted sums and adversarial maxima are
exhaustive scans over explicit neighborhoods.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericalError

EXP_LIMIT = 700.0
TOL = 1e-12


@dataclass
class FiniteHypothesis:
    domain: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise ValueError("hypothesis domain is empty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("hypothesis values must be finite")
        if len(self.domain) != len(self.values):
            raise ValueError("domain and values differ in length")


class LabeledDomain:
    """Points with labels in {-1, +1}, probability weights and explicit neighborhoods.

    ``neighborhoods[i]`` lists the indices of B_p(x_i, eps) inside the domain and
    must contain ``i`` itself.
    """

    def __init__(self, points, labels, weights, neighborhoods: Sequence[Sequence[int]]):
        self.points = np.asarray(points)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        n = len(self.labels)
        if n == 0:
            raise ValueError("domain must be non-empty")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if self.weights.shape != (n,) or np.any(self.weights < 0):
            raise ValueError("weights must be a non-negative vector, one per point")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")
        if len(neighborhoods) != n:
            raise ValueError("one neighborhood per point required")
        width = max(len(nb) for nb in neighborhoods)
        # pad ragged neighborhoods with the center point; maxima are unaffected
        self.neighbors = np.empty((n, width), dtype=np.int64)
        for i, nb in enumerate(neighborhoods):
            nb = np.asarray(nb, dtype=np.int64)
            if i not in nb:
                raise ValueError(f"neighborhood of point {i} does not contain the point")
            if nb.min() < 0 or nb.max() >= n:
                raise ValueError(f"neighborhood of point {i} leaves the domain")
            self.neighbors[i, : len(nb)] = nb
            self.neighbors[i, len(nb):] = i

    def __len__(self):
        return len(self.labels)

    @classmethod
    def index_balls(cls, labels, weights=None, radius: int = 1) -> "LabeledDomain":
        """Points 0..n-1 with B(i) = {j : |i - j| <= radius}."""
        n = len(labels)
        weights = np.full(n, 1.0 / n) if weights is None else weights
        nbs = [list(range(max(0, i - radius), min(n, i + radius + 1))) for i in range(n)]
        return cls(np.arange(n), labels, weights, nbs)

    @classmethod
    def linf_balls(cls, coords, labels, eps: float, weights=None) -> "LabeledDomain":
        """Embedded points with B(i) = {j : ||x_i - x_j||_inf <= eps}."""
        coords = np.asarray(coords, dtype=np.float64).reshape(len(labels), -1)
        n = len(labels)
        weights = np.full(n, 1.0 / n) if weights is None else weights
        dist = np.abs(coords[:, None, :] - coords[None, :, :]).max(axis=2)
        nbs = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
        return cls(coords, labels, weights, nbs)


def _vals(h) -> np.ndarray:
    return h.values if isinstance(h, FiniteHypothesis) else np.asarray(h, dtype=np.float64)


def _exp(z: np.ndarray) -> np.ndarray:
    if np.any(z > EXP_LIMIT):
        raise NumericalError(f"exponent {float(z.max())} exceeds the double-precision limit {EXP_LIMIT}")
    return np.exp(z)


def _prob(p) -> float:
    # weights sum to 1 only up to rounding; keep probabilities inside [0, 1]
    return min(1.0, float(p))


def std_error(h, dom: LabeledDomain) -> float:
    """sum_x w(x) * 1{y h(x) <= 0}  (a zero score counts as an error)."""
    v = _vals(h)
    return _prob(np.sum(dom.weights * (dom.labels * v <= 0)))


def adv_error(h, dom: LabeledDomain) -> float:
    """sum_x w(x) * 1{exists x' in B(x): y h(x') <= 0}."""
    v = _vals(h)
    bad = (dom.labels[:, None] * v[dom.neighbors] <= 0).any(axis=1)
    return _prob(np.sum(dom.weights * bad))


def exp_surrogate(h, dom: LabeledDomain) -> float:
    """sum_x w(x) * exp(-y h(x)), an upper bound on the standard error."""
    v = _vals(h)
    return float(np.sum(dom.weights * _exp(-dom.labels * v)))


def adv_exp_surrogate(h, dom: LabeledDomain) -> float:
    """sum_x w(x) * max_{x' in B(x)} exp(-y h(x'))."""
    v = _vals(h)
    return float(np.sum(dom.weights * _exp(-dom.labels[:, None] * v[dom.neighbors]).max(axis=1)))


@dataclass
class BoundCheck:
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + TOL

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.margin, self.holds))


def check_surrogate(h, dom: LabeledDomain) -> BoundCheck:
    return BoundCheck(std_error(h, dom), exp_surrogate(h, dom))


def check_adv_surrogate(h, dom: LabeledDomain) -> BoundCheck:
    return BoundCheck(adv_error(h, dom), adv_exp_surrogate(h, dom))


def check_theorem1(h_b, h_d, dom: LabeledDomain) -> BoundCheck:
    """R_std(h_b + h_d) <= R_std(h_b) + E[exp(-h_b h_d)]."""
    b, d = _vals(h_b), _vals(h_d)
    lhs = std_error(b + d, dom)
    rhs = std_error(b, dom) + float(np.sum(dom.weights * _exp(-b * d)))
    return BoundCheck(lhs, rhs)


def check_lemma1(h, dom: LabeledDomain) -> BoundCheck:
    """E[max_{x'} exp(-y h(x'))] <= E[max_{x'} exp(-y h(x)) exp(-h(x) h(x'))]."""
    v = _vals(h)
    y = dom.labels
    nb = v[dom.neighbors]
    lhs = float(np.sum(dom.weights * _exp(-y[:, None] * nb).max(axis=1)))
    inner = _exp(-y * v)[:, None] * _exp(-v[:, None] * nb)
    rhs = float(np.sum(dom.weights * inner.max(axis=1)))
    return BoundCheck(lhs, rhs)


def check_theorem2(h_b, h_d, dom: LabeledDomain) -> BoundCheck:
    """R_adv(h_b + h_d) <= R_std(h_b)
    + E[max_{x'} exp(-y h_b(x)) (exp(-h_b(x) h_b(x')) exp(-y h_d(x')) - 1)]."""
    b, d = _vals(h_b), _vals(h_d)
    y = dom.labels
    nb_b, nb_d = b[dom.neighbors], d[dom.neighbors]
    lhs = adv_error(b + d, dom)
    term = _exp(-y * b)[:, None] * (_exp(-b[:, None] * nb_b) * _exp(-y[:, None] * nb_d) - 1.0)
    rhs = std_error(b, dom) + float(np.sum(dom.weights * term.max(axis=1)))
    return BoundCheck(lhs, rhs)


def network_as_hypothesis(logits_fn: Callable[[np.ndarray], np.ndarray], class_pair: tuple[int, int],
                          points: np.ndarray) -> FiniteHypothesis:
    """h(x) = logit_a(x) - logit_b(x) on the given points."""
    a, b = class_pair
    logits = np.asarray(logits_fn(points), dtype=np.float64)
    return FiniteHypothesis(np.arange(len(points)), logits[:, a] - logits[:, b])


@dataclass
class TrialSummary:
    name: str
    trials: int
    held: int
    worst_violation: float  # max(lhs - rhs); <= 0 means every trial held

    @property
    def passed(self) -> bool:
        return self.held == self.trials


def random_trials(trials: int = 10_000, points: int = 64, radius: int = 2, value_range: float = 3.0,
                  seed: int = 0) -> list[TrialSummary]:
    """Randomized exhaustive checks of every inequality on index-ball domains."""
    rng = np.random.default_rng(seed)
    checks = {
        "exp_surrogate": lambda b, d, dom: check_surrogate(b, dom),
        "adv_exp_surrogate": lambda b, d, dom: check_adv_surrogate(b, dom),
        "theorem1": check_theorem1,
        "lemma1": lambda b, d, dom: check_lemma1(b, dom),
        "theorem2": check_theorem2,
    }
    held = {k: 0 for k in checks}
    worst = {k: -np.inf for k in checks}
    for _ in range(trials):
        labels = rng.choice([-1.0, 1.0], size=points)
        dom = LabeledDomain.index_balls(labels, radius=radius)
        hb = rng.uniform(-value_range, value_range, points)
        hd = rng.uniform(-value_range, value_range, points)
        for name, fn in checks.items():
            res = fn(hb, hd, dom)
            held[name] += res.holds
            worst[name] = max(worst[name], res.lhs - res.rhs)
    return [TrialSummary(k, trials, held[k], float(worst[k])) for k in checks]
