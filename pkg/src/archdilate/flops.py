"""Multiply-add counts for cell ops and the softmax expectation over the relaxed cell."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Backbone
from .supernet import OP_SPECS, CellArch, CellGeometry, DilationNet, Genotype
from .tensor import Tensor


def _conv_out(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def op_flops(op: str, shape, selected: int | None = None, *, out_channels: int | None = None,
             stride: int = 1, padding: int | None = None) -> int:
    """Multiply-adds of one op applied to a (C, H, W) input.

    ``selected`` is the number of channels the op actually processes (partial
    channel connections); it defaults to C. Candidate cell ops keep the spatial
    size. Plain convolutions are named ``conv_KxK`` and take ``out_channels``,
    ``stride`` and ``padding``. Pooling, identity and zero cost nothing.
    """
    c, h, w = (int(s) for s in shape)
    cin = c if selected is None else int(selected)
    m = re.fullmatch(r"conv_(\d+)x\1", op)
    if m:
        k = int(m.group(1))
        pad = k // 2 if padding is None else padding
        ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
        cout = cin if out_channels is None else out_channels
        return ho * wo * cout * k * k * cin
    if op not in OP_SPECS:
        raise ValueError(f"unknown op kind {op!r}")
    kind, k, _ = OP_SPECS[op]
    if kind == "sep":
        # depthwise k x k (one input channel per output) then pointwise 1x1
        return h * w * cin * k * k + h * w * cin * cin
    return 0


def op_cost_vector(op_set, geom: CellGeometry, selected: int | None = None) -> np.ndarray:
    return np.array([op_flops(op, (geom.channels, geom.height, geom.width), selected)
                     for op in op_set], dtype=np.float64)


def fixed_cell_flops(geom: CellGeometry, num_nodes: int) -> int:
    """Input preprocessing (two 1x1 convs) plus the output 1x1 projection."""
    pre = sum(geom.hw * geom.channels * cin for cin in geom.in_channels)
    return pre + geom.hw * geom.channels * num_nodes * geom.channels


def expected_node_flops(arch: CellArch, j: int, costs: np.ndarray, weights=None) -> Tensor:
    """sum_{i<j} softmax(beta)_{ij} * sum_o softmax(alpha)_{ij,o} * cost_{ij,o}.

    ``costs`` is an (edges, ops) array (or an (ops,) vector shared by all edges).
    """
    a, b = weights if weights is not None else arch.weights()
    costs = np.broadcast_to(np.asarray(costs, dtype=np.float64), arch.alpha.shape)
    es = arch.node_edges(j)
    per_edge = T.sum(T.mul(T.take(a, es, axis=0), costs[es]), axis=1)
    return T.sum(T.mul(b[j], per_edge))


def expected_cell_flops(arch: CellArch, costs: np.ndarray, weights=None) -> Tensor:
    w = weights if weights is not None else arch.weights()
    total = None
    for j in range(arch.num_nodes):
        f = expected_node_flops(arch, j, costs, w)
        total = f if total is None else total + f
    return total


def dilation_flops(dilation: DilationNet) -> Tensor:
    """Expected multiply-adds of the whole relaxed dilation network (differentiable)."""
    if dilation.archs is None:
        return Tensor(float(discrete_dilation_flops(dilation)))
    fixed = 0.0
    per_arch: dict[int, np.ndarray] = {}
    for l, row in enumerate(dilation.geometries):
        arch = dilation._arch(l)
        key = id(arch)
        for g in row:
            fixed += fixed_cell_flops(g, arch.num_nodes)
            vec = op_cost_vector(arch.op_set, g, arch.selected_channels(g.channels))
            per_arch[key] = per_arch.get(key, 0.0) + vec
    total: Tensor = Tensor(fixed)
    for arch in {id(a): a for a in dilation.archs}.values():
        total = total + expected_cell_flops(arch, per_arch[id(arch)])
    return total


def genotype_flops(genotype: Genotype, geometries: list[list[CellGeometry]]) -> int:
    """Exact multiply-adds of a discrete dilation network (full channels)."""
    total = 0
    for row in geometries:
        for g in row:
            total += fixed_cell_flops(g, len(genotype.nodes))
            for pairs in genotype.nodes:
                for _, op in pairs:
                    total += op_flops(op, (g.channels, g.height, g.width))
    return total


def discrete_dilation_flops(dilation: DilationNet) -> int:
    total = 0
    for l, row in enumerate(dilation.geometries):
        total += genotype_flops(dilation._genotype(l), [row])
    return total


def backbone_flops(backbone: Backbone) -> int:
    spec = backbone.spec
    h, w = spec.height, spec.width
    total = op_flops("conv_3x3", (spec.in_channels, h, w), out_channels=spec.stem_channels)
    prev = spec.stem_channels
    for l, ch in enumerate(spec.block_channels()):
        for i in range(spec.layers_per_block):
            stride = 2 if (l > 0 and i == 0) else 1
            total += op_flops("conv_3x3", (prev, h, w), out_channels=ch, stride=stride, padding=1)
            h, w = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
            prev = ch
    return total + prev * spec.num_classes


def flops_scale(total_flops, gamma: float, tau: float, mode: str = "pow"):
    """gamma * (log F)^tau  (mode "pow") or gamma * tau * log F  (mode "mul")."""
    f = T.as_tensor(total_flops)
    if np.any(f.data <= 1):
        raise ValueError(f"FLOPs must exceed 1 for the log scaling, got {float(f.data)}")
    lf = T.log(f)
    if mode == "pow":
        s = T.exp(T.scale(T.log(lf), tau)) if tau != 0 else Tensor(1.0)
    elif mode == "mul":
        s = T.scale(lf, tau)
    else:
        raise ValueError(f"unknown FLOPs scaling mode {mode!r}")
    return T.scale(s, gamma)


def flops_scaled_loss(total_flops, adv_valid_loss, gamma: float, tau: float,
                      mode: str = "pow") -> Tensor:
    return T.mul(flops_scale(total_flops, gamma, tau, mode), adv_valid_loss)


def calibrate_gamma(reference_flops: float, tau: float, mode: str = "pow") -> float:
    """gamma making the scale factor exactly 1 at ``reference_flops``."""
    if reference_flops <= 1:
        raise ValueError("reference FLOPs must exceed 1")
    lf = math.log(reference_flops)
    return 1.0 / (lf ** tau if mode == "pow" else tau * lf)


@dataclass
class FlopsReport:
    node_flops: list[float]
    cell_flops: list[float]
    dilation_total: float
    backbone_total: float
    gamma: float
    tau: float
    op_costs: dict[str, list[float]] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"node_{j}", v) for j, v in enumerate(self.node_flops)]
        out += [(f"cell_b{l}", v) for l, v in enumerate(self.cell_flops)]
        out += [("dilation_total", self.dilation_total), ("backbone_total", self.backbone_total),
                ("gamma", self.gamma), ("tau", self.tau)]
        return out


def flops_report(dilation: DilationNet, backbone: Backbone, gamma: float | None = None,
                 tau: float = 1.0, mode: str = "pow") -> FlopsReport:
    """Per-node expectations (first arch), per-block cell totals and network totals."""
    with T.no_grad():
        total = float(dilation_flops(dilation).data)
        nodes, cells, op_costs = [], [], {}
        for l, row in enumerate(dilation.geometries):
            if dilation.archs is not None:
                arch = dilation._arch(l)
                costs = sum(op_cost_vector(arch.op_set, g, arch.selected_channels(g.channels)) for g in row)
                block = sum(fixed_cell_flops(g, arch.num_nodes) for g in row)
                block += float(expected_cell_flops(arch, costs).data)
                if l == 0:
                    nodes = [float(expected_node_flops(arch, j, costs).data) for j in range(arch.num_nodes)]
                op_costs[f"b{l}"] = list(costs / len(row))
            else:
                block = genotype_flops(dilation._genotype(l), [row])
            cells.append(float(block))
    if gamma is None:
        gamma = calibrate_gamma(total, tau, mode)
    return FlopsReport(nodes, cells, total, float(backbone_flops(backbone)), gamma, tau, op_costs)
