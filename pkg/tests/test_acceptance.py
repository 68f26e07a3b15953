"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are printed in the
terminal summary. Criteria 7 and 8 share one 3-seed desk-scale run (about 25
minutes on one CPU core).
"""
import time
from pathlib import Path

import numpy as np
import pytest

from archdilate import pipeline as P
from archdilate import tensor as T
from archdilate.admm import AdmmState, FlopsTerm, arch_objective, reference_loss, solve_toy
from archdilate.attacks import AttackBudget, fgsm, pgd
from archdilate.bounds import random_trials
from archdilate.cli import main
from archdilate.config import RunConfig
from archdilate.flops import calibrate_gamma, dilation_flops, discrete_dilation_flops, expected_cell_flops
from archdilate.nn import Backbone, BackboneSpec, standard_loss
from archdilate.supernet import OPS, CellArch, DilationNet, HybridModel
from archdilate.tensor import Tensor

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- 1

def _micro_case(r):
    spec = BackboneSpec(height=4, width=4, num_blocks=int(r.integers(1, 3)), layers_per_block=1,
                        stem_channels=2)
    bb = Backbone(spec, seed=int(r.integers(1 << 30)))
    ops = tuple(r.choice(list(OPS), size=3, replace=False))
    arch = CellArch(2, ops, channel_ratio=float(r.choice([0.5, 1.0])))
    dil = DilationNet(bb, 1, seed=int(r.integers(1 << 30)), arch=arch)
    for p in dil.parameters():
        p.data = p.data + r.normal(scale=0.3, size=p.shape)
    arch.alpha.data = r.normal(size=arch.alpha.shape)
    arch.beta.data = r.normal(size=arch.beta.shape)
    for c in dil.channel_counts():
        m = np.zeros((len(arch.edges), c))
        for e in range(len(arch.edges)):
            m[e, r.choice(c, size=arch.selected_channels(c), replace=False)] = 1.0
        arch.masks[c] = m
    return HybridModel(bb, dil), arch


def _central_diff(f, x, coords, h=1e-5):
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out[k] = (f(xp) - f(xm)) / (2 * h)
    return out


# per-entry |g - fd| <= RTOL |fd| + ATOL; ATOL is the central-difference noise floor at h = 1e-5
RTOL, ATOL = 1e-5, 1e-9


def test_criterion_1_gradients_match_finite_differences(record):
    r = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for _ in range(200):
        hybrid, arch = _micro_case(r)
        x = r.uniform(size=(2, 1, 4, 4))
        y = np.array([0, 1])
        xa = np.clip(x + 0.05 * np.sign(r.normal(size=x.shape)), 0, 1)
        ref = reference_loss(hybrid.backbone, xa, x, y)
        state = AdmmState(lambda1=float(r.uniform(0, 2)), rho=float(r.uniform(0.5, 2)))
        flops = FlopsTerm(gamma=float(r.uniform(0.1, 2.0)), tau=float(r.uniform(0.5, 2.0)))
        weights = [n for n in hybrid.dilation.params if n.endswith("proj.w") or n.endswith(".dw")]
        w = hybrid.dilation.params[weights[int(r.integers(len(weights)))]]
        targets = [arch.alpha, arch.beta, w]
        coords = [np.arange(arch.alpha.data.size), np.arange(arch.beta.data.size),
                  r.choice(w.data.size, size=min(6, w.data.size), replace=False)]

        def objective():
            return arch_objective(hybrid, state, xa, x, y, ref, flops)[0]

        grads = T.grad(objective(), targets)
        for t, g, idx in zip(targets, grads, coords):
            orig = t.data.copy()

            def f(v, t=t, orig=orig):
                t.data = v
                with T.no_grad():
                    out = float(objective().data)
                t.data = orig
                return out
            fd = _central_diff(f, orig, idx)
            ratio = np.abs(g.flat[idx] - fd) / (RTOL * np.abs(fd) + ATOL)
            worst = max(worst, float(ratio.max()))
            checked += len(idx)
    elapsed = time.perf_counter() - start
    ok = worst <= 1.0 and elapsed < 120
    record(1, ok, f"200 micro networks, {checked} partials, worst error/tolerance {worst:.2f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_attack_invariants(record):
    r = np.random.default_rng(7)
    ball_ok = clamp_ok = fgsm_ok = True
    for i in range(1000):
        d = int(r.integers(2, 10))
        w1, w2 = Tensor(r.normal(size=(d, 5))), Tensor(r.normal(size=(5, 3)))
        fwd = lambda xt, w1=w1, w2=w2: T.matmul(T.relu(T.matmul(xt, w1)), w2)  # noqa: E731
        x = r.uniform(size=(int(r.integers(1, 5)), d))
        y = r.integers(0, 3, len(x))
        eps = float(r.choice([0.0, r.uniform(0, 0.5)]))
        budget = AttackBudget(epsilon=eps, steps=int(r.integers(1, 8)), step_size=float(r.uniform(1e-3, 0.2)),
                              random_start=bool(r.integers(2)))
        out = pgd(fwd, x, y, budget, rng=np.random.default_rng(i))
        ball_ok &= bool(np.all(np.abs(out - x) <= eps))
        clamp_ok &= bool(np.all((out >= 0.0) & (out <= 1.0)))
        if eps > 0:
            one = AttackBudget(epsilon=eps, steps=1, step_size=eps)
            fgsm_ok &= bool(np.array_equal(pgd(fwd, x, y, one), fgsm(fwd, x, y, one)))

    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    c = np.array([0.3, 0.8])
    x0 = np.array([[0.5, 0.5]])
    eps = 0.05

    def quad(xt, _y):
        dlt = T.sub(xt, c)
        return T.scale(T.sum(T.mul(T.matmul(dlt, Tensor(a)), dlt)), 0.5)

    x20 = pgd(lambda t: t, x0, None, AttackBudget(epsilon=eps, steps=20, step_size=0.01), loss_fn=quad)
    grid = np.linspace(-eps, eps, 201)
    best = max(0.5 * (x0[0] + [u, v] - c) @ a @ (x0[0] + [u, v] - c) for u in grid for v in grid)
    got = 0.5 * (x20[0] - c) @ a @ (x20[0] - c)
    gap = abs(got - best)
    ok = ball_ok and clamp_ok and fgsm_ok and gap <= 1e-6
    record(2, ok, f"1000 runs: ball {ball_ok}, clamp {clamp_ok}, K=1 equals FGSM {fgsm_ok}; "
                  f"quadratic gap to grid max {gap:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_flops_enumeration_oracle(record):
    import itertools
    r = np.random.default_rng(11)
    ops = ("sep_conv_3x3", "dil_conv_5x5", "identity")
    worst = 0.0
    for _ in range(100):
        arch = CellArch(2, ops)
        arch.alpha.data = r.normal(scale=2, size=arch.alpha.shape)
        arch.beta.data = r.normal(scale=2, size=arch.beta.shape)
        costs = r.uniform(0, 5000, size=arch.alpha.shape)
        a = np.exp(arch.alpha.data) / np.exp(arch.alpha.data).sum(axis=1, keepdims=True)
        per_node = [arch.node_edges(j) for j in range(2)]
        bs = [np.exp(arch.beta.data[es]) / np.exp(arch.beta.data[es]).sum() for es in per_node]
        oracle = 0.0
        for edges in itertools.product(*per_node):
            for choice in itertools.product(range(3), repeat=2):
                p = np.prod([bs[j][per_node[j].index(e)] * a[e, o] for j, (e, o) in enumerate(zip(edges, choice))])
                oracle += p * sum(costs[e, o] for e, o in zip(edges, choice))
        worst = max(worst, abs(float(expected_cell_flops(arch, costs).data) - oracle))
    ok = worst <= 1e-9
    record(3, ok, f"100 draws, worst |expectation - enumeration| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_admm_toy_convergence(record):
    u, lam, iters, lams, cs = solve_toy(iters=5000)
    monotone = all(lams[k] >= lams[k - 1] for k in range(1, len(lams)) if cs[k] > 0)
    ok = abs(u - 1.0) < 1e-3 and iters <= 5000 and min(lams) >= 0 and monotone
    record(4, ok, f"u={u:.6f} lambda={lam:.4f} after {iters} iterations, multiplier monotone {monotone}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_bounds_lab(record):
    start = time.perf_counter()
    summaries = random_trials(trials=10_000, points=64, radius=2, value_range=3.0, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(s.worst_violation for s in summaries)
    ok = all(s.passed for s in summaries) and worst <= 1e-12 and elapsed < 300
    parts = ", ".join(f"{s.name} {s.held}/{s.trials}" for s in summaries)
    record(5, ok, f"{parts}; worst lhs-rhs {worst:.3e}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_identity_and_calibrated_start(record):
    cfg = RunConfig()  # library defaults: 16x16, 3 blocks of 2 layers, 3 search cells per block
    train, valid = P.load_data(cfg)
    bb = Backbone(P.backbone_spec(cfg, train[0].shape[1:]), seed=0)
    dil = DilationNet(bb, cfg.search.cells_per_block, seed=0, arch=P.make_archs(cfg))
    hybrid = HybridModel(bb, dil)
    x, y = valid[0][:16], valid[1][:16]
    h_logits, h_z = hybrid.forward(x)
    b_logits, b_z = bb.forward(x)
    identical = np.array_equal(h_logits.data, b_logits.data) and all(
        np.array_equal(a.data, b.data) for a, b in zip(h_z, b_z))
    with T.no_grad():
        f0 = float(dilation_flops(dil).data)
    flops = FlopsTerm(gamma=calibrate_gamma(f0, cfg.flops.tau), tau=cfg.flops.tau)
    xa = pgd(hybrid.logits, x, y, P.attack_budget(cfg), np.random.default_rng(0))
    _, info = arch_objective(hybrid, AdmmState(), xa, x, y, reference_loss(bb, xa, x, y), flops)
    with T.no_grad():
        raw = float(standard_loss(bb.logits(xa), y).data)
    gap = abs(info["objective"] - raw)
    ok = identical and info["c"] == 0.0 and gap <= 1e-9
    record(6, ok, f"hybrid==backbone bitwise {identical}, c1 at step 0 = {info['c']!r}, "
                  f"|scaled - raw| {gap:.1e}")
    assert ok


# ---------------------------------------------------------------- 7 and 8

def _desk_seed(seed: int) -> dict:
    cfg = RunConfig.load(DESK)
    cfg.seed = seed
    train, valid = P.load_data(cfg)
    out = {"seed": seed}
    t0 = time.perf_counter()
    bb, _ = P.pretrain_backbone(cfg, train, valid)
    out["std_natural"] = P.evaluate(bb.logits, valid, cfg)[0]["accuracy"]
    at, _ = P.pretrain_backbone(cfg, train, valid, adversarial=True)
    out["at_pgd10"] = {r["attack"]: r["accuracy"] for r in P.evaluate(at.logits, valid, cfg)}["pgd10"]
    genotypes, rows, _ = P.run_search(cfg, bb, train)
    hybrid, _ = P.retrain(cfg, bb, genotypes, train, valid)
    acc = {r["attack"]: r["accuracy"] for r in P.evaluate(hybrid.logits, valid, cfg)}
    out["hyb_natural"], out["hyb_pgd10"] = acc["natural"], acc["pgd10"]
    out["trend_seconds"] = time.perf_counter() - t0
    out["flops_on"] = discrete_dilation_flops(DilationNet(bb, cfg.retrain.cells_per_block, genotype=genotypes))
    out["relaxed_on"] = rows[-1]["expected_flops"]
    off = cfg.copy()
    off.flops.enabled = False
    t1 = time.perf_counter()
    g_off, rows_off, _ = P.run_search(off, bb, train)
    out["off_seconds"] = time.perf_counter() - t1
    out["flops_off"] = discrete_dilation_flops(DilationNet(bb, cfg.retrain.cells_per_block, genotype=g_off))
    out["relaxed_off"] = rows_off[-1]["expected_flops"]
    out["genotype_on"] = P.genotypes_to_text(genotypes)
    out["genotype_off"] = P.genotypes_to_text(g_off)
    return out


@pytest.fixture(scope="module")
def desk_runs():
    return [_desk_seed(s) for s in SEEDS]


def _med(runs, key):
    return float(np.median([r[key] for r in runs]))


def test_criterion_7_desk_trend(record, desk_runs):
    runs = desk_runs
    robust_gain = float(np.median([r["hyb_pgd10"] - r["at_pgd10"] for r in runs]))
    nat_drop = float(np.median([r["std_natural"] - r["hyb_natural"] for r in runs]))
    minutes = sum(r["trend_seconds"] for r in runs) / 60
    per_seed = "; ".join(f"seed {r['seed']}: hybrid {r['hyb_pgd10']:.3f} vs AT {r['at_pgd10']:.3f}, "
                         f"natural {r['hyb_natural']:.3f} vs {r['std_natural']:.3f}" for r in runs)
    ok = robust_gain >= 0 and nat_drop <= 0.02 and minutes <= 30
    record(7, ok, f"median PGD-10 gain over AT {robust_gain:+.3f}, median natural drop {nat_drop:+.3f}, "
                  f"{minutes:.1f} min ({per_seed})")
    assert ok


def test_criterion_8_flops_direction(record, desk_runs):
    runs = desk_runs
    on, off = _med(runs, "flops_on"), _med(runs, "flops_off")
    r_on, r_off = _med(runs, "relaxed_on"), _med(runs, "relaxed_off")
    ok = on <= off
    record(8, ok, f"median genotype FLOPs with scaling {on:.0f} vs without {off:.0f} "
                  f"(relaxed expectation {r_on:.1f} vs {r_off:.1f})")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_search_determinism(record, tmp_path):
    base = ["--config", str(DESK), "--set", "data.num_train=128", "--set", "search.epochs=2", "--quiet"]
    bb_dir = tmp_path / "bb"
    assert main(["pretrain-backbone", *base, "--set", f"output_dir={bb_dir}"]) == 0
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        code = main(["search", *base, "--deterministic", "--set", f"output_dir={d}",
                     "--backbone", str(bb_dir / "backbone.ckpt")])
        assert code == 0
        outs.append(((d / "search_metrics.csv").read_bytes(), (d / "genotype.txt").read_text()))
    same_csv = outs[0][0] == outs[1][0]
    same_geno = outs[0][1] == outs[1][1]
    ok = same_csv and same_geno
    record(9, ok, f"metrics CSV byte-identical {same_csv}, genotype identical {same_geno}")
    assert ok
