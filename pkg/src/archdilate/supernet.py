"""Relaxed dilation cells, the hybrid backbone+dilation network and genotypes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Backbone, Module, he_normal
from .tensor import ShapeError, Tensor

OPS = (
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
    "avg_pool_3x3", "max_pool_3x3", "identity", "zero",
)

# name -> (kind, kernel, dilation)
OP_SPECS = {
    "sep_conv_3x3": ("sep", 3, 1),
    "sep_conv_5x5": ("sep", 5, 1),
    "dil_conv_3x3": ("sep", 3, 2),
    "dil_conv_5x5": ("sep", 5, 2),
    "avg_pool_3x3": ("avg", 3, 1),
    "max_pool_3x3": ("max", 3, 1),
    "identity": ("identity", 0, 0),
    "zero": ("zero", 0, 0),
}


def op_param_shapes(op: str, channels: int) -> dict[str, tuple[int, ...]]:
    kind, k, _ = OP_SPECS[op]
    if kind == "sep":
        return {"dw": (channels, 1, k, k), "pw": (channels, channels, 1, 1)}
    return {}


def init_op_params(op: str, channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    out = {}
    for name, shape in op_param_shapes(op, channels).items():
        fan_in = shape[1] * shape[2] * shape[3]
        out[name] = Tensor(he_normal(rng, shape, fan_in), True)
    return out


def apply_op(op: str, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Apply one candidate op; every op maps zeros to zeros."""
    kind, k, d = OP_SPECS[op]
    if kind == "sep":
        h = T.conv2d(T.relu(x), params["dw"], padding=d * (k // 2), dilation=d, groups=x.shape[1])
        return T.conv2d(h, params["pw"])
    if kind == "avg":
        return T.avg_pool2d(x, k, 1, k // 2)
    if kind == "max":
        return T.max_pool2d(x, k, 1, k // 2)
    if kind == "identity":
        return x
    return T.Tensor(np.zeros(x.shape))


def cell_edges(num_nodes: int) -> list[tuple[int, int]]:
    """(source state, node) pairs. States 0/1 are the cell inputs (prev-prev, prev);
    state ``j + 2`` is intermediate node ``j``."""
    return [(i, j) for j in range(num_nodes) for i in range(j + 2)]


class CellArch:
    """Architecture logits shared by the relaxed cells.

    ``alpha[e, o]`` weights op ``o`` on edge ``e``; ``beta[e]`` is the edge
    normalization logit, softmaxed over the edges entering the same node.
    ``masks`` maps a channel count to an (edges, channels) 0/1 array.
    """

    def __init__(self, num_nodes: int = 4, op_set=OPS, channel_ratio: float = 0.5):
        if num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        unknown = [o for o in op_set if o not in OP_SPECS]
        if unknown:
            raise ValueError(f"unknown ops {unknown}")
        if not 0 < channel_ratio <= 1:
            raise ValueError(f"channel_ratio must be in (0, 1], got {channel_ratio}")
        self.num_nodes = num_nodes
        self.op_set = tuple(op_set)
        self.channel_ratio = channel_ratio
        self.edges = cell_edges(num_nodes)
        self.alpha = Tensor(np.zeros((len(self.edges), len(self.op_set))), True)
        self.beta = Tensor(np.zeros(len(self.edges)), True)
        self.masks: dict[int, np.ndarray] = {}

    def node_edges(self, j: int) -> list[int]:
        return [e for e, (_, node) in enumerate(self.edges) if node == j]

    def selected_channels(self, channels: int) -> int:
        return int(round(self.channel_ratio * channels))

    def mask_for(self, channels: int) -> np.ndarray:
        if channels not in self.masks:
            k = self.selected_channels(channels)
            if k == 0:
                raise ValueError(f"channel_ratio {self.channel_ratio} selects no channel of {channels}")
            m = np.zeros((len(self.edges), channels))
            m[:, :k] = 1.0
            self.masks[channels] = m
        return self.masks[channels]

    def weights(self) -> tuple[Tensor, list[Tensor]]:
        """softmax(alpha) per edge and softmax(beta) per node, as graph tensors."""
        a = T.softmax(self.alpha, axis=1)
        b = [T.softmax(T.take(self.beta, self.node_edges(j)), axis=0) for j in range(self.num_nodes)]
        return a, b

    def parameters(self) -> list[Tensor]:
        return [self.alpha, self.beta]

    def state_dict(self, prefix: str = "arch") -> dict[str, np.ndarray]:
        out = {f"{prefix}.alpha": self.alpha.data.copy(), f"{prefix}.beta": self.beta.data.copy()}
        for c, m in self.masks.items():
            out[f"{prefix}.mask{c}"] = m.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "arch") -> None:
        self.alpha.data = np.array(state[f"{prefix}.alpha"], dtype=np.float64)
        self.beta.data = np.array(state[f"{prefix}.beta"], dtype=np.float64)
        tag = f"{prefix}.mask"
        self.masks = {int(k[len(tag):]): np.array(v) for k, v in state.items() if k.startswith(tag)}


def sample_channel_masks(arch: CellArch, channels, seed: int) -> dict[int, np.ndarray]:
    """Draw fresh per-edge masks selecting round(ratio * C) channels uniformly."""
    rng = np.random.default_rng(seed)
    out = {}
    for c in sorted(set(int(c) for c in np.atleast_1d(channels))):
        k = arch.selected_channels(c)
        if k == 0:
            raise ValueError(f"channel_ratio {arch.channel_ratio} selects no channel of {c}")
        m = np.zeros((len(arch.edges), c))
        for e in range(len(arch.edges)):
            m[e, np.sort(rng.choice(c, size=k, replace=False))] = 1.0
        out[c] = m
    arch.masks.update(out)
    return out


def mixed_op_forward(x: Tensor, op_weights: Tensor, mask: np.ndarray, op_set,
                     op_params: dict[str, dict[str, Tensor]]) -> Tensor:
    """(1 - S) * x + sum_o w_o * o(S * x), ops acting on the selected channels only."""
    mask = np.asarray(mask, dtype=np.float64)
    c = x.shape[1]
    if mask.shape != (c,):
        raise ShapeError(f"mixed_op: mask of shape {mask.shape} for {c} channels")
    if op_weights.shape != (len(op_set),):
        raise ShapeError(f"mixed_op: {op_weights.shape} weights for {len(op_set)} ops")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return x
    full = idx.size == c
    xs = x if full else T.take(x, idx, axis=1)
    acc = None
    for o, op in enumerate(op_set):
        if op == "zero":
            continue
        y = T.mul(T.take(op_weights, o), apply_op(op, xs, op_params.get(op, {})))
        acc = y if acc is None else acc + y
    if acc is None:
        acc = Tensor(np.zeros(xs.shape))
    if full:
        return acc
    keep = (1.0 - mask)[None, :, None, None]
    return T.mul(x, keep) + T.embed(acc, idx, c, axis=1)


def node_forward(edge_outputs: list[Tensor], beta_weights: Tensor) -> Tensor:
    """sum_i softmax(beta)_i * edge_output_i."""
    if not edge_outputs:
        raise ValueError("node_forward: no incoming edges")
    if beta_weights.shape != (len(edge_outputs),):
        raise ShapeError(f"node_forward: {beta_weights.shape} weights for {len(edge_outputs)} edges")
    acc = None
    for i, out in enumerate(edge_outputs):
        y = T.mul(T.take(beta_weights, i), out)
        acc = y if acc is None else acc + y
    return acc


@dataclass
class CellGeometry:
    channels: int
    height: int
    width: int
    in_channels: tuple[int, int]  # (prev-prev, prev)
    strides: tuple[int, int]

    @property
    def hw(self) -> int:
        return self.height * self.width


class _CellBase(Module):
    def __init__(self, geom: CellGeometry, num_nodes: int, rng: np.random.Generator, zero_proj: bool):
        super().__init__()
        self.geom = geom
        self.num_nodes = num_nodes
        c = geom.channels
        for side, cin in zip(("pre0", "pre1"), geom.in_channels):
            self.params[f"{side}.w"] = Tensor(he_normal(rng, (c, cin, 1, 1), cin), True)
        proj = np.zeros((c, num_nodes * c, 1, 1)) if zero_proj else he_normal(rng, (c, num_nodes * c, 1, 1), num_nodes * c)
        self.params["proj.w"] = Tensor(proj, True)

    def preprocess(self, s_prevprev: Tensor, s_prev: Tensor) -> tuple[Tensor, Tensor]:
        s0 = T.conv2d(T.relu(s_prevprev), self.params["pre0.w"], stride=self.geom.strides[0])
        s1 = T.conv2d(T.relu(s_prev), self.params["pre1.w"], stride=self.geom.strides[1])
        want = (self.geom.height, self.geom.width)
        if s0.shape[2:] != want or s1.shape[2:] != want:
            raise ShapeError(f"cell inputs preprocess to {s0.shape[2:]} and {s1.shape[2:]}, "
                             f"expected {want}")
        return s0, s1

    def project(self, nodes: list[Tensor]) -> Tensor:
        return T.conv2d(T.concat(nodes, axis=1), self.params["proj.w"])


class SearchCell(_CellBase):
    """Relaxed cell: every edge is a mixed op over ``arch.op_set``."""

    def __init__(self, arch: CellArch, geom: CellGeometry, rng: np.random.Generator,
                 zero_proj: bool = False):
        super().__init__(geom, arch.num_nodes, rng, zero_proj)
        self.arch = arch
        cs = arch.selected_channels(geom.channels)
        if cs == 0:
            raise ValueError(f"channel_ratio {arch.channel_ratio} selects no channel of {geom.channels}")
        self.selected = cs
        for e in range(len(arch.edges)):
            for op in arch.op_set:
                for name, t in init_op_params(op, cs, rng).items():
                    self.params[f"e{e}.{op}.{name}"] = t

    def edge_params(self, e: int) -> dict[str, dict[str, Tensor]]:
        out: dict[str, dict[str, Tensor]] = {}
        for op in self.arch.op_set:
            names = op_param_shapes(op, 1)
            out[op] = {n: self.params[f"e{e}.{op}.{n}"] for n in names}
        return out

    def forward(self, s_prev: Tensor, s_prevprev: Tensor, weights=None) -> Tensor:
        arch = self.arch
        a, b = weights if weights is not None else arch.weights()
        mask = arch.mask_for(self.geom.channels)
        states = list(self.preprocess(s_prevprev, s_prev))
        for j in range(arch.num_nodes):
            outs = []
            for e in arch.node_edges(j):
                src = arch.edges[e][0]
                outs.append(mixed_op_forward(states[src], T.take(a, e, axis=0), mask[e],
                                             arch.op_set, self.edge_params(e)))
            states.append(node_forward(outs, b[j]))
        return self.project(states[2:])


@dataclass
class Genotype:
    """Discrete cell: per node, two (input state, op) pairs."""

    nodes: list[list[tuple[int, str]]]
    cells_per_block: int = 6

    def __post_init__(self):
        for j, pairs in enumerate(self.nodes):
            if len(pairs) != 2:
                raise ValueError(f"node_{j}: expected 2 inputs, got {len(pairs)}")
            for src, op in pairs:
                if op == "zero":
                    raise ValueError(f"node_{j}: zero op is not allowed in a genotype")
                if op not in OP_SPECS:
                    raise ValueError(f"node_{j}: unknown op {op!r}")
                if not 0 <= src < j + 2:
                    raise ValueError(f"node_{j}: input {src} is not an earlier state")

    def role(self, block: int, position: int) -> str:
        return "reduction" if block > 0 and position == 0 else "normal"

    def to_text(self) -> str:
        lines = [f"node_{j}: " + ", ".join(f"({s}, {o})" for s, o in pairs)
                 for j, pairs in enumerate(self.nodes)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, cells_per_block: int = 6) -> "Genotype":
        import re
        nodes = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            m = re.fullmatch(r"node_(\d+):\s*\((\d+),\s*(\w+)\),\s*\((\d+),\s*(\w+)\)", line)
            if m is None or int(m.group(1)) != len(nodes):
                raise ValueError(f"malformed genotype line: {line!r}")
            nodes.append([(int(m.group(2)), m.group(3)), (int(m.group(4)), m.group(5))])
        return cls(nodes, cells_per_block)

    def to_dot(self) -> str:
        names = ["c_{k-2}", "c_{k-1}"] + [str(j) for j in range(len(self.nodes))]
        out = ["digraph cell {", "  rankdir=LR;",
               '  node [shape=box, style=filled, fillcolor="#dddddd"];']
        for n in names[:2]:
            out.append(f'  "{n}" [fillcolor="#a8d5ba"];')
        out.append('  "c_{k}" [fillcolor="#f4d58d"];')
        for j, pairs in enumerate(self.nodes):
            for src, op in pairs:
                out.append(f'  "{names[src]}" -> "{names[j + 2]}" [label="{op}"];')
            out.append(f'  "{names[j + 2]}" -> "c_{{k}}";')
        out.append("}")
        return "\n".join(out) + "\n"


def discretize(arch: CellArch, cells_per_block: int = 6) -> Genotype:
    """Keep the 2 best incoming edges per node and the best non-zero op on each.

    Edge score: softmax(beta)_edge * max_{o != zero} softmax(alpha)_{edge, o}.
    Ties prefer the earlier op in ``op_set`` and then the lower input index.
    """
    cand = [o for o, op in enumerate(arch.op_set) if op != "zero"]
    if not cand:
        raise ValueError("discretize: op set contains only the zero op")
    alpha = arch.alpha.data
    a = np.exp(alpha - alpha.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    nodes = []
    for j in range(arch.num_nodes):
        es = arch.node_edges(j)
        bl = arch.beta.data[es]
        b = np.exp(bl - bl.max())
        b /= b.sum()
        scored = []
        for k, e in enumerate(es):
            best = cand[int(np.argmax(alpha[e, cand]))]
            scored.append((-(b[k] * a[e, cand].max()), arch.edges[e][0], arch.op_set[best]))
        scored.sort(key=lambda t: (t[0], t[1]))
        keep = sorted(scored[:2], key=lambda t: t[1])
        if len(keep) < 2:
            raise ValueError(f"discretize: node_{j} has fewer than 2 incoming edges")
        nodes.append([(src, op) for _, src, op in keep])
    return Genotype(nodes, cells_per_block)


class DiscreteCell(_CellBase):
    """Cell built from a genotype; node = sum of its two chosen ops (full channels)."""

    def __init__(self, genotype: Genotype, geom: CellGeometry, rng: np.random.Generator,
                 zero_proj: bool = False):
        super().__init__(geom, len(genotype.nodes), rng, zero_proj)
        self.genotype = genotype
        for j, pairs in enumerate(genotype.nodes):
            for k, (_, op) in enumerate(pairs):
                for name, t in init_op_params(op, geom.channels, rng).items():
                    self.params[f"n{j}.{k}.{op}.{name}"] = t

    def forward(self, s_prev: Tensor, s_prevprev: Tensor, weights=None) -> Tensor:
        states = list(self.preprocess(s_prevprev, s_prev))
        for j, pairs in enumerate(self.genotype.nodes):
            acc = None
            for k, (src, op) in enumerate(pairs):
                p = {n: self.params[f"n{j}.{k}.{op}.{n}"] for n in op_param_shapes(op, 1)}
                y = apply_op(op, states[src], p)
                acc = y if acc is None else acc + y
            states.append(acc)
        return self.project(states[2:])


def block_geometries(backbone: Backbone, cells_per_block: int) -> list[list[CellGeometry]]:
    """Channel/resolution/stride layout for every cell, block by block.

    Block ``l`` consumes z^(l-1) and z^(l-2); z^(0) is the stem output and
    z^(-1) is taken to be z^(0).
    """
    spec = backbone.spec
    chans = [spec.stem_channels] + spec.block_channels()
    res = [(spec.height, spec.width)] + spec.block_resolutions()
    out = []
    for l in range(spec.num_blocks):
        c, (h, w) = chans[l + 1], res[l + 1]
        # (channels, height) of z^(l-1), z^(l-2) ; index 0 of chans/res is z^(0)
        src_prev = (chans[l], res[l][0])
        src_pp = (chans[max(l - 1, 0)], res[max(l - 1, 0)][0])
        geoms = []
        for k in range(cells_per_block):
            if k == 0:
                ins = (src_pp, src_prev)
            elif k == 1:
                ins = (src_prev, (c, h))
            else:
                ins = ((c, h), (c, h))
            strides = tuple(max(1, src_h // h) for _, src_h in ins)
            geoms.append(CellGeometry(c, h, w, (ins[0][0], ins[1][0]), strides))
        out.append(geoms)
    return out


class DilationNet(Module):
    """One stack of ``cells_per_block`` cells per backbone block.

    The last cell of every block has a zero-initialized output projection, so a
    fresh dilation network contributes exactly nothing to the hybrid.
    """

    def __init__(self, backbone: Backbone, cells_per_block: int, seed: int = 0, *,
                 arch: CellArch | list[CellArch] | None = None,
                 genotype: Genotype | list[Genotype] | None = None):
        super().__init__()
        if (arch is None) == (genotype is None):
            raise ValueError("DilationNet needs exactly one of arch or genotype")
        if cells_per_block < 1:
            raise ValueError("cells_per_block must be >= 1")
        rng = np.random.default_rng(seed)
        nb = backbone.spec.num_blocks
        self.cells_per_block = cells_per_block
        self.archs = None
        self.genotypes = None
        if arch is not None:
            self.archs = arch if isinstance(arch, list) else [arch]
            if len(self.archs) not in (1, nb):
                raise ValueError(f"need 1 shared or {nb} per-block archs, got {len(self.archs)}")
        else:
            self.genotypes = genotype if isinstance(genotype, list) else [genotype]
            if len(self.genotypes) not in (1, nb):
                raise ValueError(f"need 1 shared or {nb} per-block genotypes")
        self.geometries = block_geometries(backbone, cells_per_block)
        self.cells: list[list[_CellBase]] = []
        for l, geoms in enumerate(self.geometries):
            row = []
            for k, g in enumerate(geoms):
                last = k == cells_per_block - 1
                if self.archs is not None:
                    cell = SearchCell(self._arch(l), g, rng, zero_proj=last)
                else:
                    cell = DiscreteCell(self._genotype(l), g, rng, zero_proj=last)
                for name, t in cell.params.items():
                    self.params[f"b{l}.c{k}.{name}"] = t
                row.append(cell)
            self.cells.append(row)

    def _arch(self, l: int) -> CellArch:
        return self.archs[l if len(self.archs) > 1 else 0]

    def _genotype(self, l: int) -> Genotype:
        return self.genotypes[l if len(self.genotypes) > 1 else 0]

    def arch_parameters(self) -> list[Tensor]:
        return [p for a in (self.archs or []) for p in a.parameters()]

    def channel_counts(self) -> list[int]:
        return sorted({g.channels for row in self.geometries for g in row})

    def block_forward(self, l: int, z_prev: Tensor, z_prevprev: Tensor, weights=None) -> Tensor:
        s_pp, s_p = z_prevprev, z_prev
        for cell in self.cells[l]:
            out = cell.forward(s_p, s_pp, weights)
            s_pp, s_p = s_p, out
        return s_p


class HybridModel:
    """Backbone blocks summed element-wise with dilation cells block by block."""

    def __init__(self, backbone: Backbone, dilation: DilationNet):
        self.backbone = backbone
        self.dilation = dilation

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        bb, dil = self.backbone, self.dilation
        z0 = bb.stem(x)
        zs = [z0, z0]  # z^(-1) := z^(0)
        shared = None
        if dil.archs is not None and len(dil.archs) == 1:
            shared = dil.archs[0].weights()
        outs = []
        for l in range(bb.spec.num_blocks):
            zb = bb.block(l, zs[-1])
            w = shared if shared is not None else (dil._arch(l).weights() if dil.archs else None)
            zd = dil.block_forward(l, zs[-1], zs[-2], w)
            if zb.shape != zd.shape:
                raise ShapeError(f"block {l}: backbone output {zb.shape} vs dilation output {zd.shape}")
            z = zb + zd
            zs.append(z)
            outs.append(z)
        return bb.head(outs[-1]), outs

    def logits(self, x) -> Tensor:
        return self.forward(x)[0]

    def weight_parameters(self) -> list[Tensor]:
        return self.dilation.parameters()


def hybrid_forward(backbone: Backbone, dilation: DilationNet, images) -> tuple[Tensor, list[Tensor]]:
    return HybridModel(backbone, dilation).forward(images)


def cell_forward(cell: _CellBase, z_prev: Tensor, z_prevprev: Tensor) -> Tensor:
    return cell.forward(z_prev, z_prevprev)
