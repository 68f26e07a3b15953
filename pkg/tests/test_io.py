"""Config text, IDX ingestion, synthetic data and checkpoint persistence."""
import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archdilate import checkpoint as C
from archdilate.config import ConfigError, RunConfig
from archdilate.data import (DataError, IdxCountError, IdxMagicError, IdxTruncatedError, SynthSpec, load_idx,
                             select_classes, split_search_data, synth_dataset, write_idx)


# ---------------------------------------------------------------- config

def test_config_round_trip_is_exact():
    cfg = RunConfig()
    cfg.set("attack.epsilon", 1 / 3)
    cfg.set("eval.pgd_steps", "1, 5, 9")
    cfg.set("flops.enabled", "false")
    again = RunConfig.from_text(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert again.attack.epsilon == 1 / 3
    assert again.eval.pgd_steps == (1, 5, 9)
    assert again.flops.enabled is False


def test_config_comments_overrides_and_errors():
    cfg = RunConfig.from_text("# desk run\nseed = 7  # trailing\n\nsearch.ops = identity, zero\n")
    assert cfg.seed == 7 and cfg.search.ops == ("identity", "zero")
    cfg.apply_overrides(["admm.rho=2.5"])
    assert cfg.admm.rho == 2.5
    with pytest.raises(ConfigError):
        cfg.set("nope.key", "1")
    with pytest.raises(ConfigError):
        cfg.set("seed", "abc")
    with pytest.raises(ConfigError):
        cfg.set("admm", "1")
    with pytest.raises(ConfigError):
        RunConfig.from_text("seed 3\n")
    with pytest.raises(ConfigError):
        cfg.apply_overrides(["seed"])


def test_config_save_load(tmp_path):
    cfg = RunConfig()
    cfg.seed = 11
    cfg.save(tmp_path / "run.cfg")
    assert RunConfig.load(tmp_path / "run.cfg").seed == 11
    copy = cfg.copy()
    copy.seed = 12
    assert cfg.seed == 11


def test_shipped_desk_preset_parses():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
    cfg = RunConfig.load(path)
    assert cfg.data.height == 8


# ---------------------------------------------------------------- idx

def idx_pair(tmp_path, n=10, h=4, w=3):
    r = np.random.default_rng(0)
    imgs = r.integers(0, 256, size=(n, h, w)).astype(np.uint8)
    imgs[0, 0, 0] = 255
    labels = r.integers(0, 10, size=n).astype(np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


def test_idx_round_trip_and_scaling(tmp_path):
    ip, lp, imgs, labels = idx_pair(tmp_path)
    x, y = load_idx(ip, lp)
    assert x.shape == (10, 1, 4, 3) and y.shape == (10,)
    assert x[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(x[:, 0] * 255, imgs)
    np.testing.assert_array_equal(y, labels)


def test_idx_gzip(tmp_path):
    ip, lp, imgs, _ = idx_pair(tmp_path)
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    x, _ = load_idx(gz, lp)
    np.testing.assert_array_equal(x[:, 0] * 255, imgs)


def test_idx_distinct_errors(tmp_path):
    ip, lp, _, _ = idx_pair(tmp_path)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x01" + ip.read_bytes()[4:])
    with pytest.raises(IdxMagicError, match="00000801"):
        load_idx(bad, lp)
    bad.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(IdxTruncatedError):
        load_idx(bad, lp)
    bad.write_bytes(struct.pack(">2I", 0x801, 9) + bytes(9))
    with pytest.raises(IdxCountError):
        load_idx(ip, bad)
    with pytest.raises(DataError):
        load_idx(tmp_path / "missing.idx", lp)


def test_select_classes_relabels():
    x = np.arange(6.0)
    y = np.array([3, 7, 3, 1, 7, 7])
    xs, ys = select_classes(x, y, (7, 3))
    np.testing.assert_array_equal(xs, [0, 1, 2, 4, 5])
    np.testing.assert_array_equal(ys, [1, 0, 1, 0, 0])


# ---------------------------------------------------------------- synthetic

def test_synth_deterministic_balanced_and_in_range():
    spec = SynthSpec(num_train=1000, num_valid=10)
    (x1, y1), _ = synth_dataset(spec, 3)
    (x2, y2), _ = synth_dataset(spec, 3)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(y1, y2)
    assert np.bincount(y1).tolist() == [500, 500]
    assert x1.min() >= 0 and x1.max() <= 1 and x1.shape == (1000, 1, 8, 8)
    with pytest.raises(DataError):
        synth_dataset(SynthSpec(num_classes=1), 0)


def logistic_probe_accuracy(spec, seed=0, steps=300, lr=0.5):
    (xt, yt), (xv, yv) = synth_dataset(spec, seed)
    a, b = xt.reshape(len(xt), -1), xv.reshape(len(xv), -1)
    mu, sd = a.mean(0), a.std(0) + 1e-9
    a, b = (a - mu) / sd, (b - mu) / sd
    w, c = np.zeros(a.shape[1]), 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(a @ w + c)))
        w -= lr * (a.T @ (p - yt) / len(a) + 1e-2 * w)
        c -= lr * float(np.mean(p - yt))
    return float(np.mean(((b @ w + c) > 0) == yv))


def test_margin_controls_separability():
    assert abs(logistic_probe_accuracy(SynthSpec(num_train=2000, num_valid=2000, margin=0.0)) - 0.5) <= 0.05
    assert logistic_probe_accuracy(SynthSpec(margin=0.6)) >= 0.95


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 300), st.integers(0, 1000))
def test_split_is_disjoint_balanced_and_deterministic(n, seed):
    x, y = np.arange(n, dtype=np.float64), np.arange(n) % 2
    (xa, _), (xb, _) = split_search_data((x, y), seed)
    assert abs(len(xa) - len(xb)) <= 1
    assert set(xa).isdisjoint(xb) and set(xa) | set(xb) == set(x)
    (xa2, _), _ = split_search_data((x, y), seed)
    np.testing.assert_array_equal(xa, xa2)


def test_split_hundred_and_errors():
    (xa, _), (xb, _) = split_search_data((np.arange(100.0), np.zeros(100, int)), 0)
    assert len(xa) == len(xb) == 50
    with pytest.raises(DataError):
        split_search_data((np.zeros(1), np.zeros(1, int)), 0)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_bit_exact(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a.w": r.normal(size=(2, 3, 1, 1)), "scalar": np.array(np.pi), "tiny": np.array([5e-324, -0.0])}
    ck = C.Checkpoint(tensors, "node_0: (0, identity), (1, identity)\n", "seed = 1\n")
    C.save(tmp_path / "m.ckpt", ck)
    back = C.load(tmp_path / "m.ckpt")
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert back.genotype_text == ck.genotype_text and back.config_text == ck.config_text
    assert C.dumps(back) == C.dumps(ck)
    assert back.subset("a.") == {"w": back.tensors["a.w"]}


def test_checkpoint_errors(tmp_path):
    raw = C.dumps(C.Checkpoint({"x": np.ones(3)}))
    assert raw[:4] == b"NADR"
    with pytest.raises(C.CheckpointError, match="magic"):
        C.loads(b"XXXX" + raw[4:])
    with pytest.raises(C.CheckpointError, match="version"):
        C.loads(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(C.CheckpointError, match="truncated"):
        C.loads(raw[:-3])
    with pytest.raises(C.CheckpointError, match="trailing"):
        C.loads(raw + b"\x00")
    with pytest.raises(C.CheckpointError):
        C.load(tmp_path / "absent.ckpt")
