"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bounds as B
from . import pipeline as P
from . import plotting
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import DataError
from .flops import flops_report
from .supernet import DilationNet, discretize
from .tensor import NumericalError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="config file of 'key = value' lines")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override one config key (repeatable)")
    p.add_argument("--deterministic", action="store_true", help="force sequential, reproducible execution")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="archdilate", description="Architecture dilation for adversarial robustness.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain-backbone", help="train the backbone (standard, or adversarial baseline)")
    _common(p)
    p.add_argument("--adversarial", action="store_true", help="PGD adversarial training (baseline)")

    p = sub.add_parser("search", help="constrained dilation architecture search")
    _common(p)
    p.add_argument("--backbone", metavar="PATH", help="backbone checkpoint (default OUT/backbone.ckpt)")
    p.add_argument("--cotrain-backbone", action="store_true", help="train the backbone jointly (ablation)")

    p = sub.add_parser("retrain", help="adversarially retrain a discrete dilation network")
    _common(p)
    p.add_argument("--backbone", metavar="PATH")
    p.add_argument("--genotype", metavar="PATH", help="genotype text (default OUT/genotype.txt)")

    p = sub.add_parser("evaluate", help="natural / FGSM / PGD-k accuracy table")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (default OUT/hybrid.ckpt)")
    p.add_argument("--name", default="eval", help="basename of the report files")

    p = sub.add_parser("verify-bounds", help="randomized exhaustive checks of the error bounds")
    _common(p)

    p = sub.add_parser("flops-report", help="expected FLOPs per node, cell and network")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="search checkpoint (default OUT/search.ckpt)")
    p.add_argument("--genotype", metavar="PATH", help="report a discrete genotype instead")
    p.add_argument("--backbone", metavar="PATH")

    p = sub.add_parser("export-genotype", help="write the searched genotype as text or DOT")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="search checkpoint (default OUT/search.ckpt)")
    p.add_argument("--format", choices=("text", "dot"), default="text")
    p.add_argument("--out", metavar="PATH", help="output file (default OUT/genotype.txt or .dot)")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.overrides)
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "cotrain_backbone", False):
        cfg.search.cotrain_backbone = True
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _progress(args, writer, keys):
    def cb(row):
        writer(row)
        _log(args, "  " + " ".join(f"{k}={row[k]:.4g}" if isinstance(row[k], float) else f"{k}={row[k]}"
                                   for k in keys))
    return cb


def cmd_pretrain(args, cfg):
    out = _out(cfg)
    train, valid = P.load_data(cfg)
    tag = "backbone_at" if args.adversarial else "backbone"
    writer = P.MetricsWriter(out / f"{tag}_metrics.csv", P.PRETRAIN_COLUMNS)
    net, rows = P.pretrain_backbone(cfg, train, valid, adversarial=args.adversarial,
                                    on_epoch=_progress(args, writer, P.PRETRAIN_COLUMNS))
    P.save_backbone(out / f"{tag}.ckpt", net, cfg)
    plotting.plot_curves(rows, ("train_loss", "train_acc", "valid_acc"), out / f"{tag}_curves.png", tag)
    cfg.save(out / f"{tag}_config.txt")
    _log(args, f"wrote {out / f'{tag}.ckpt'}")


def cmd_search(args, cfg):
    out = _out(cfg)
    backbone = P.load_backbone(args.backbone or out / "backbone.ckpt", cfg)
    train, _ = P.load_data(cfg)
    writer = P.MetricsWriter(out / "search_metrics.csv", P.METRIC_COLUMNS)
    genotypes, rows, hybrid = P.run_search(cfg, backbone, train,
                                           on_epoch=_progress(args, writer, ("epoch", "adv_valid_loss", "c1",
                                                                             "lambda1", "expected_flops")))
    text = P.genotypes_to_text(genotypes)
    (out / "genotype.txt").write_text(text)
    P.save_search(out / "search.ckpt", hybrid, genotypes, cfg)
    plotting.plot_search(rows, out / "search_curves.png")
    cfg.save(out / "search_config.txt")
    _log(args, text.rstrip())


def cmd_retrain(args, cfg):
    out = _out(cfg)
    backbone = P.load_backbone(args.backbone or out / "backbone.ckpt", cfg)
    gpath = Path(args.genotype or out / "genotype.txt")
    if not gpath.exists():
        raise DataError(f"no such genotype file: {gpath}")
    genotypes = P.genotypes_from_text(gpath.read_text(), cfg.retrain.cells_per_block)
    train, valid = P.load_data(cfg)
    writer = P.MetricsWriter(out / "retrain_metrics.csv", P.RETRAIN_COLUMNS)
    hybrid, rows = P.retrain(cfg, backbone, genotypes, train, valid,
                             on_epoch=_progress(args, writer, P.RETRAIN_COLUMNS))
    P.save_hybrid(out / "hybrid.ckpt", hybrid, genotypes, cfg)
    if rows:
        plotting.plot_curves(rows, ("adv_train_loss", "std_train_loss", "valid_nat_acc", "valid_pgd_acc"),
                             out / "retrain_curves.png", "retrain")
    cfg.save(out / "retrain_config.txt")
    _log(args, f"wrote {out / 'hybrid.ckpt'}")


def cmd_evaluate(args, cfg):
    out = _out(cfg)
    logits_fn, _ = P.load_model(args.checkpoint or out / "hybrid.ckpt", cfg)
    _, valid = P.load_data(cfg)
    rows = P.evaluate(logits_fn, valid, cfg)
    P.write_csv(out / f"{args.name}.csv", P.EVAL_COLUMNS, rows)
    plotting.plot_accuracy(rows, out / f"{args.name}_accuracy.png")
    for r in rows:
        _log(args, f"{r['attack']:>8s}  eps={r['epsilon']:.4g}  steps={r['steps']:>3d}  acc={r['accuracy']:.4f}")


def cmd_verify_bounds(args, cfg):
    out = _out(cfg)
    b = cfg.bounds
    summaries = B.random_trials(b.trials, b.points, b.radius, b.value_range, cfg.seed)
    rows = [{"inequality": s.name, "trials": s.trials, "held": s.held,
             "worst_violation": s.worst_violation, "passed": s.passed} for s in summaries]
    P.write_csv(out / "bounds.csv", ("inequality", "trials", "held", "worst_violation", "passed"), rows)
    plotting.plot_bounds(summaries, out / "bounds_margins.png")
    for s in summaries:
        _log(args, f"{s.name:>18s}  held {s.held}/{s.trials}  worst lhs-rhs {s.worst_violation:.3e}  "
                   f"{'PASS' if s.passed else 'FAIL'}")


def cmd_flops_report(args, cfg):
    out = _out(cfg)
    if args.genotype:
        backbone = P.load_backbone(args.backbone or out / "backbone.ckpt", cfg)
        genotypes = P.genotypes_from_text(Path(args.genotype).read_text(), cfg.retrain.cells_per_block)
        dil = DilationNet(backbone, cfg.retrain.cells_per_block, cfg.seed, genotype=genotypes)
    else:
        backbone, archs, scfg = P.load_search_archs(args.checkpoint or out / "search.ckpt", cfg)
        dil = DilationNet(backbone, scfg.search.cells_per_block, cfg.seed, arch=archs)
    rep = flops_report(dil, backbone, cfg.flops.gamma or None, cfg.flops.tau, cfg.flops.mode)
    rows = [{"quantity": k, "value": float(v)} for k, v in rep.rows()]
    P.write_csv(out / "flops_report.csv", ("quantity", "value"), rows)
    plotting.plot_flops(rep.rows(), out / "flops_report.png")
    for k, v in rep.rows():
        _log(args, f"{k:>16s}  {v:.6g}")


def cmd_export_genotype(args, cfg):
    out = _out(cfg)
    _, archs, scfg = P.load_search_archs(args.checkpoint or out / "search.ckpt", cfg)
    genotypes = [discretize(a, scfg.retrain.cells_per_block) for a in archs]
    if args.format == "text":
        text = P.genotypes_to_text(genotypes)
    else:
        text = "".join(g.to_dot() for g in genotypes)
    path = Path(args.out or out / f"genotype.{'txt' if args.format == 'text' else 'dot'}")
    path.write_text(text)
    _log(args, text.rstrip())


COMMANDS = {
    "pretrain-backbone": cmd_pretrain,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "verify-bounds": cmd_verify_bounds,
    "flops-report": cmd_flops_report,
    "export-genotype": cmd_export_genotype,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"archdilate: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        # overflow is detected by explicit finiteness checks; keep stderr to one line
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        return _fail("usage error", exc, EXIT_USAGE)
    except NumericalError as exc:
        return _fail("numerical divergence", exc, EXIT_NUMERIC)
    except (DataError, CheckpointError, ShapeError, OSError, KeyError, ValueError) as exc:
        return _fail("data error", exc, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
