"""Backbone network, parameter containers and the standard (clean) loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """Named-parameter container. Subclasses fill ``self.params``."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing tensors in state: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag


@dataclass
class BackboneSpec:
    in_channels: int = 1
    height: int = 16
    width: int = 16
    num_classes: int = 2
    num_blocks: int = 3
    layers_per_block: int = 2
    stem_channels: int = 8
    channel_multiplier: int = 2

    def validate(self) -> None:
        for name in ("in_channels", "height", "width", "num_classes", "num_blocks",
                     "layers_per_block", "stem_channels", "channel_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneSpec.{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError("BackboneSpec.num_classes must be at least 2")
        if min(self.height, self.width) < 2 ** (self.num_blocks - 1):
            raise ValueError(f"input {self.height}x{self.width} too small for {self.num_blocks} blocks")

    def block_channels(self) -> list[int]:
        return [self.stem_channels * self.channel_multiplier ** l for l in range(self.num_blocks)]

    def block_resolutions(self) -> list[tuple[int, int]]:
        res, out = (self.height, self.width), []
        for l in range(self.num_blocks):
            if l > 0:
                res = ((res[0] - 1) // 2 + 1, (res[1] - 1) // 2 + 1)
            out.append(res)
        return out


class Backbone(Module):
    """Stem conv, ``num_blocks`` resolution blocks of 3x3 conv+ReLU, GAP + linear head.

    The first conv of every block after the first has stride 2.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        c_in = spec.in_channels
        c0 = spec.stem_channels
        self.params["stem.w"] = Tensor(he_normal(rng, (c0, c_in, 3, 3), c_in * 9), True)
        self.params["stem.b"] = Tensor(np.zeros((1, c0, 1, 1)), True)
        prev = c0
        for l, ch in enumerate(spec.block_channels()):
            for i in range(spec.layers_per_block):
                self.params[f"block{l}.conv{i}.w"] = Tensor(he_normal(rng, (ch, prev, 3, 3), prev * 9), True)
                self.params[f"block{l}.conv{i}.b"] = Tensor(np.zeros((1, ch, 1, 1)), True)
                prev = ch
        self.params["head.w"] = Tensor(rng.standard_normal((prev, spec.num_classes)) / np.sqrt(prev), True)
        self.params["head.b"] = Tensor(np.zeros((1, spec.num_classes)), True)

    def _check_input(self, x: Tensor) -> None:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeError(f"backbone expects (N, {s.in_channels}, {s.height}, {s.width}) input, "
                             f"got {x.shape}")

    def stem(self, x) -> Tensor:
        x = T.as_tensor(x)
        self._check_input(x)
        p = self.params
        return T.relu(T.conv2d(x, p["stem.w"], padding=1) + p["stem.b"])

    def block(self, l: int, z: Tensor) -> Tensor:
        p = self.params
        for i in range(self.spec.layers_per_block):
            stride = 2 if (l > 0 and i == 0) else 1
            z = T.relu(T.conv2d(z, p[f"block{l}.conv{i}.w"], stride=stride, padding=1)
                       + p[f"block{l}.conv{i}.b"])
        return z

    def head(self, z: Tensor) -> Tensor:
        p = self.params
        return T.matmul(T.global_avg_pool(z), p["head.w"]) + p["head.b"]

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        z = self.stem(x)
        outs = []
        for l in range(self.spec.num_blocks):
            z = self.block(l, z)
            outs.append(z)
        return self.head(z), outs

    def logits(self, x) -> Tensor:
        return self.forward(x)[0]


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    return Backbone(spec, seed)


def backbone_forward(backbone: Backbone, images) -> tuple[Tensor, list[Tensor]]:
    return backbone.forward(images)


def standard_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"standard_loss: logits {logits.shape} vs {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"standard_loss: label out of range [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    ll = T.log_softmax(logits, axis=1)
    return T.scale(T.sum(T.mul(ll, onehot)), -1.0 / labels.size)


def accuracy(logits: Tensor | np.ndarray, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else logits
    return float(np.mean(np.argmax(data, axis=1) == np.asarray(labels)))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale the gradient list so its global l2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(total):
        raise T.NumericalError("clip_grad_norm: non-finite gradient")
    if total <= max_norm:
        return grads
    return [g * (max_norm / total) for g in grads]


class SGD:
    """SGD with optional momentum and global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.buffers = [np.zeros(p.shape) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if self.grad_clip:
            grads = clip_grad_norm(grads, self.grad_clip)
        for p, g, buf in zip(self.params, grads, self.buffers):
            if not np.all(np.isfinite(g)):
                raise T.NumericalError("SGD.step: non-finite gradient")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf *= self.momentum
                buf += g
                g = buf
            p.data = p.data - self.lr * g
