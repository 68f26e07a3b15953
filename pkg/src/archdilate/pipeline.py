"""Run orchestration: pretrain, search, retrain, evaluate, and their persistence."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .admm import (METRIC_COLUMNS, AdmmState, DivergenceError, FlopsTerm, SearchSettings,
                   augmented_lagrangian, cosine_lr, iterate_batches, multiplier_update, search)
from .attacks import AttackBudget, fgsm, pgd
from .config import RunConfig
from .data import DataError, SynthSpec, load_idx, select_classes, split_search_data, synth_dataset
from .nn import SGD, Backbone, BackboneSpec, accuracy, standard_loss
from .supernet import CellArch, DilationNet, Genotype, HybridModel
from .tensor import ShapeError

Dataset = tuple[np.ndarray, np.ndarray]

PRETRAIN_COLUMNS = ("epoch", "train_loss", "train_acc", "valid_acc")
RETRAIN_COLUMNS = ("epoch", "adv_train_loss", "std_train_loss", "c", "lambda", "valid_nat_acc", "valid_pgd_acc")
EVAL_COLUMNS = ("attack", "epsilon", "steps", "accuracy")


# ---------------------------------------------------------------- csv


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Append-only CSV with a fixed header; every row is flushed as it arrives."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row[c]) for c in self.columns])


def write_csv(path, columns, rows) -> None:
    w = MetricsWriter(path, columns)
    for r in rows:
        w(r)


def rows_to_csv_text(columns, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- data


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        spec = SynthSpec(d.num_train, d.num_valid, d.height, d.width, d.num_classes, d.margin, d.noise)
        return synth_dataset(spec, cfg.seed)
    if d.source == "idx":
        train = select_classes(*load_idx(d.train_images, d.train_labels), d.classes)
        if d.test_images:
            valid = select_classes(*load_idx(d.test_images, d.test_labels), d.classes)
        else:
            train, valid = split_search_data(train, cfg.seed)
        if d.num_train:
            train = (train[0][: d.num_train], train[1][: d.num_train])
        if d.num_valid:
            valid = (valid[0][: d.num_valid], valid[1][: d.num_valid])
        if len(train[0]) == 0 or len(valid[0]) == 0:
            raise DataError(f"no examples of classes {d.classes} in the IDX files")
        return train, valid
    raise DataError(f"unknown data.source {d.source!r}")


def attack_budget(cfg: RunConfig, steps: int | None = None, step_size: float | None = None) -> AttackBudget:
    a = cfg.attack
    p = np.inf if a.norm == "inf" else float(a.norm)
    return AttackBudget(a.epsilon, a.steps if steps is None else steps,
                        a.step_size if step_size is None else step_size, p, (0.0, 1.0), a.random_start)


def backbone_spec(cfg: RunConfig, image_shape) -> BackboneSpec:
    c, h, w = image_shape
    b = cfg.backbone
    spec = BackboneSpec(in_channels=c, height=h, width=w, num_classes=cfg.data.num_classes,
                        num_blocks=b.num_blocks, layers_per_block=b.layers_per_block,
                        stem_channels=b.stem_channels, channel_multiplier=b.channel_multiplier)
    spec.validate()
    return spec


# ---------------------------------------------------------------- training


def _epoch_accuracy(logits_fn, x, y, batch_size) -> float:
    correct = 0
    with T.no_grad():
        for xb, yb in iterate_batches(x, y, batch_size, None, drop_last=False):
            correct += int(np.sum(np.argmax(logits_fn(xb).data, axis=1) == yb))
    return correct / len(x)


def pretrain_backbone(cfg: RunConfig, train: Dataset, valid: Dataset, *, adversarial: bool = False,
                      on_epoch: Callable[[dict], None] | None = None) -> tuple[Backbone, list[dict]]:
    """Standard (or PGD adversarial, for the baseline) training of the backbone alone."""
    spec = backbone_spec(cfg, train[0].shape[1:])
    net = Backbone(spec, seed=cfg.seed)
    b = cfg.backbone
    epochs = cfg.baseline.epochs if adversarial else b.epochs
    base_lr = cfg.baseline.lr if adversarial else b.lr
    opt = SGD(net.parameters(), lr=base_lr, momentum=b.momentum, weight_decay=b.weight_decay)
    budget = attack_budget(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    for epoch in range(epochs):
        opt.lr = cosine_lr(base_lr, epoch, epochs)
        losses, accs = [], []
        for xb, yb in iterate_batches(*train, b.batch_size, rng):
            if adversarial:
                xb = pgd(net.logits, xb, yb, budget, rng)
            logits = net.logits(xb)
            loss = standard_loss(logits, yb)
            opt.step(T.grad(loss, opt.params))
            losses.append(float(loss.data))
            accs.append(accuracy(logits, yb))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_acc": float(np.mean(accs)),
               "valid_acc": _epoch_accuracy(net.logits, *valid, b.batch_size)}
        if not np.isfinite(row["train_loss"]):
            raise DivergenceError(f"backbone training diverged at epoch {epoch}")
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return net, rows


def make_archs(cfg: RunConfig) -> list[CellArch]:
    s = cfg.search
    n = cfg.backbone.num_blocks if s.per_block else 1
    return [CellArch(s.nodes, s.ops, s.channel_ratio) for _ in range(n)]


def run_search(cfg: RunConfig, backbone: Backbone, train: Dataset,
               on_epoch: Callable[[dict], None] | None = None):
    """Constrained search on a split training set. Returns (genotypes, rows, hybrid)."""
    s, a = cfg.search, cfg.admm
    weight_half, arch_half = split_search_data(train, cfg.seed)
    dilation = DilationNet(backbone, s.cells_per_block, seed=cfg.seed, arch=make_archs(cfg))
    hybrid = HybridModel(backbone, dilation)
    state = AdmmState(rho=a.rho, eta1=a.eta1, eta2=a.eta2)
    flops = FlopsTerm(cfg.flops.enabled, cfg.flops.gamma or None, cfg.flops.tau, cfg.flops.mode)
    settings = SearchSettings(epochs=s.epochs, batch_size=s.batch_size, free_replay=s.free_replay,
                              momentum=a.momentum, weight_decay=a.weight_decay,
                              arch_attack_steps=s.arch_attack_steps, cotrain_backbone=s.cotrain_backbone,
                              backbone_lr=cfg.backbone.lr, grad_clip=a.grad_clip or None,
                              seed=cfg.seed)
    geno, rows = search(hybrid, weight_half, arch_half, state, attack_budget(cfg), flops, settings, on_epoch)
    genotypes = geno if isinstance(geno, list) else [geno]
    return genotypes, rows, hybrid


def build_hybrid(cfg: RunConfig, backbone: Backbone, genotypes: list[Genotype]) -> HybridModel:
    try:
        dil = DilationNet(backbone, cfg.retrain.cells_per_block, seed=cfg.seed + 7, genotype=list(genotypes))
        hybrid = HybridModel(backbone, dil)
        with T.no_grad():
            hybrid.logits(np.zeros((1, backbone.spec.in_channels, backbone.spec.height, backbone.spec.width)))
    except ValueError as exc:
        raise ShapeError(f"genotype incompatible with backbone: {exc}") from exc
    return hybrid


def retrain(cfg: RunConfig, backbone: Backbone, genotypes: list[Genotype], train: Dataset, valid: Dataset,
            on_epoch: Callable[[dict], None] | None = None) -> tuple[HybridModel, list[dict]]:
    """PGD adversarial training of a discrete dilation network on the full training set.

    The backbone stays frozen. With ``retrain.constraint`` the standard-loss gap
    to the backbone is kept non-positive through the augmented Lagrangian.
    """
    r = cfg.retrain
    hybrid = build_hybrid(cfg, backbone, genotypes)
    opt = SGD(hybrid.weight_parameters(), lr=r.lr, momentum=r.momentum, weight_decay=r.weight_decay,
              grad_clip=r.grad_clip or None)
    budget = attack_budget(cfg)
    eval_budget = attack_budget(cfg, steps=cfg.eval.pgd_steps[0] if cfg.eval.pgd_steps else 10,
                                step_size=cfg.eval.step_size or None)
    rng = np.random.default_rng(cfg.seed + 2)
    lam = 0.0
    rows = []
    monitor = valid if r.eval_samples <= 0 else (valid[0][:r.eval_samples], valid[1][:r.eval_samples])
    for epoch in range(r.epochs):
        opt.lr = cosine_lr(r.lr, epoch, r.epochs)
        adv_l, std_l, cs = [], [], []
        for xb, yb in iterate_batches(*train, r.batch_size, rng):
            xa = pgd(hybrid.logits, xb, yb, budget, rng)
            with T.no_grad():
                ref = float(standard_loss(backbone.logits(xb), yb).data)
            logits = hybrid.logits(np.concatenate([xa, xb]))
            n = len(xb)
            adv = standard_loss(T.take(logits, np.arange(n), axis=0), yb)
            std = standard_loss(T.take(logits, np.arange(n, 2 * n), axis=0), yb)
            c = T.sub(std, ref)
            loss = augmented_lagrangian(adv, c, lam, cfg.admm.rho) if r.constraint else adv
            grads = T.grad(loss, opt.params)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"retrain: non-finite gradient at epoch {epoch}")
            opt.step(grads)
            if r.constraint:
                lam = multiplier_update(lam, float(c.data), cfg.admm.rho)
            adv_l.append(float(adv.data))
            std_l.append(float(std.data))
            cs.append(float(c.data))
        row = {"epoch": epoch, "adv_train_loss": float(np.mean(adv_l)), "std_train_loss": float(np.mean(std_l)),
               "c": float(np.mean(cs)), "lambda": lam,
               "valid_nat_acc": _epoch_accuracy(hybrid.logits, *monitor, cfg.eval.batch_size),
               "valid_pgd_acc": attack_accuracy(hybrid.logits, monitor, eval_budget, cfg.eval.batch_size,
                                                np.random.default_rng(cfg.seed + 3))}
        if not np.isfinite(row["adv_train_loss"]):
            raise DivergenceError(f"retrain diverged at epoch {epoch}")
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return hybrid, rows


# ---------------------------------------------------------------- evaluation


def attack_accuracy(logits_fn, data: Dataset, budget: AttackBudget | None, batch_size: int,
                    rng: np.random.Generator | None = None, single_step: bool = False) -> float:
    x, y = data
    correct = 0
    for xb, yb in iterate_batches(x, y, batch_size, None, drop_last=False):
        if budget is not None:
            xb = fgsm(logits_fn, xb, yb, budget) if single_step else pgd(logits_fn, xb, yb, budget, rng)
        with T.no_grad():
            correct += int(np.sum(np.argmax(logits_fn(xb).data, axis=1) == yb))
    return correct / len(x)


def evaluate(logits_fn, valid: Dataset, cfg: RunConfig) -> list[dict]:
    """Accuracy under natural inputs, FGSM and PGD-k for every configured k."""
    eps = cfg.attack.epsilon
    bs = cfg.eval.batch_size
    step = cfg.eval.step_size or cfg.attack.step_size
    rows = [{"attack": "natural", "epsilon": 0.0, "steps": 0,
             "accuracy": attack_accuracy(logits_fn, valid, None, bs)}]
    rows.append({"attack": "fgsm", "epsilon": eps, "steps": 1,
                 "accuracy": attack_accuracy(logits_fn, valid, attack_budget(cfg, 1, max(eps, 1e-12)), bs,
                                             single_step=True)})
    for k in cfg.eval.pgd_steps:
        rng = np.random.default_rng(cfg.seed + 3)
        rows.append({"attack": f"pgd{k}", "epsilon": eps, "steps": k,
                     "accuracy": attack_accuracy(logits_fn, valid, attack_budget(cfg, k, step), bs, rng)})
    return rows


# ---------------------------------------------------------------- persistence


def genotypes_to_text(genotypes: list[Genotype]) -> str:
    if len(genotypes) == 1:
        return genotypes[0].to_text()
    return "".join(f"# block {l}\n{g.to_text()}" for l, g in enumerate(genotypes))


def genotypes_from_text(text: str, cells_per_block: int = 6) -> list[Genotype]:
    chunks, cur = [], []
    for line in text.splitlines():
        if line.strip().startswith("# block"):
            if cur:
                chunks.append("\n".join(cur))
            cur = []
        else:
            cur.append(line)
    if cur and any(s.strip() for s in cur):
        chunks.append("\n".join(cur))
    if not chunks:
        raise DataError("genotype text is empty")
    try:
        return [Genotype.from_text(c, cells_per_block) for c in chunks]
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _backbone_tensors(backbone: Backbone) -> dict[str, np.ndarray]:
    spec = backbone.spec
    out = {"meta.image_shape": np.array([spec.in_channels, spec.height, spec.width], dtype=np.float64)}
    out.update({f"backbone.{k}": v for k, v in backbone.state_dict().items()})
    return out


def save_backbone(path, backbone: Backbone, cfg: RunConfig) -> None:
    ckpt_io.save(path, ckpt_io.Checkpoint(_backbone_tensors(backbone), "", cfg.to_text()))


def _spec_from_checkpoint(ck: ckpt_io.Checkpoint, fallback: RunConfig) -> tuple[BackboneSpec, RunConfig]:
    cfg = RunConfig.from_text(ck.config_text) if ck.config_text else fallback
    shape = ck.tensors.get("meta.image_shape")
    if shape is None or "backbone.stem.w" not in ck.tensors:
        raise ckpt_io.CheckpointError("checkpoint holds no backbone")
    return backbone_spec(cfg, tuple(int(v) for v in shape)), cfg


def load_backbone(path, fallback: RunConfig) -> Backbone:
    ck = ckpt_io.load(path)
    spec, _ = _spec_from_checkpoint(ck, fallback)
    net = Backbone(spec)
    try:
        net.load_state_dict(ck.subset("backbone."))
    except (KeyError, ValueError) as exc:
        raise ckpt_io.CheckpointError(f"{path}: {exc}") from exc
    return net


def save_hybrid(path, hybrid: HybridModel, genotypes: list[Genotype], cfg: RunConfig) -> None:
    tensors = _backbone_tensors(hybrid.backbone)
    tensors.update({f"dilation.{k}": v for k, v in hybrid.dilation.state_dict().items()})
    ckpt_io.save(path, ckpt_io.Checkpoint(tensors, genotypes_to_text(genotypes), cfg.to_text()))


def load_model(path, fallback: RunConfig):
    """Backbone-only or hybrid model from a checkpoint; returns (logits_fn, model)."""
    ck = ckpt_io.load(path)
    spec, cfg = _spec_from_checkpoint(ck, fallback)
    backbone = Backbone(spec)
    try:
        backbone.load_state_dict(ck.subset("backbone."))
        if not ck.genotype_text:
            return backbone.logits, backbone
        genotypes = genotypes_from_text(ck.genotype_text, cfg.retrain.cells_per_block)
        hybrid = build_hybrid(cfg, backbone, genotypes)
        hybrid.dilation.load_state_dict(ck.subset("dilation."))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise ckpt_io.CheckpointError(f"{path}: {exc}") from exc
    return hybrid.logits, hybrid


def save_search(path, hybrid: HybridModel, genotypes: list[Genotype], cfg: RunConfig) -> None:
    tensors = _backbone_tensors(hybrid.backbone)
    for l, arch in enumerate(hybrid.dilation.archs):
        tensors.update(arch.state_dict(prefix=f"arch{l}"))
    ckpt_io.save(path, ckpt_io.Checkpoint(tensors, genotypes_to_text(genotypes), cfg.to_text()))


def load_search_archs(path, fallback: RunConfig) -> tuple[Backbone, list[CellArch], RunConfig]:
    ck = ckpt_io.load(path)
    spec, cfg = _spec_from_checkpoint(ck, fallback)
    backbone = Backbone(spec)
    backbone.load_state_dict(ck.subset("backbone."))
    archs = make_archs(cfg)
    try:
        for l, arch in enumerate(archs):
            arch.load_state_dict(ck.tensors, prefix=f"arch{l}")
    except KeyError as exc:
        raise ckpt_io.CheckpointError(f"{path}: missing architecture tensor {exc}") from exc
    return backbone, archs, cfg


MetricColumns = {"pretrain": PRETRAIN_COLUMNS, "search": METRIC_COLUMNS, "retrain": RETRAIN_COLUMNS,
                 "eval": EVAL_COLUMNS}
