"""Dataset ingestion: IDX files and seeded synthetic two-blob images."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountError(DataError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    if struct.unpack(">I", raw[:4])[0] != magic:
        raise IdxMagicError(f"{path}: magic bytes {raw[:4].hex()} != expected {magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - head} bytes, header declares {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; images come back (N, 1, H, W) in [0, 1]."""
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if len(imgs) != len(labels):
        raise IdxCountError(f"{images_path} holds {len(imgs)} images but {labels_path} holds {len(labels)} labels")
    return imgs[:, None].astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) and labels (N,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def select_classes(x: np.ndarray, y: np.ndarray, classes) -> tuple[np.ndarray, np.ndarray]:
    """Keep only ``classes`` and relabel them 0..K-1 in the given order."""
    classes = list(classes)
    keep = np.isin(y, classes)
    remap = {c: i for i, c in enumerate(classes)}
    return x[keep], np.array([remap[int(v)] for v in y[keep]], dtype=np.int64)


@dataclass
class SynthSpec:
    num_train: int = 512
    num_valid: int = 256
    height: int = 8
    width: int = 8
    num_classes: int = 2
    margin: float = 0.6
    noise: float = 0.2


def class_templates(spec: SynthSpec) -> np.ndarray:
    """(K, H, W) zero-mean Gaussian bumps centred around a circle."""
    k, h, w = spec.num_classes, spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = 0.25 * min(h, w)
    sigma = max(min(h, w) / 5.0, 0.5)
    bumps = []
    for c in range(k):
        ang = 2 * np.pi * c / k
        cy, cx = (h - 1) / 2 + r * np.sin(ang), (w - 1) / 2 + r * np.cos(ang)
        bumps.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))
    bumps = np.array(bumps)
    return bumps - bumps.mean(axis=0, keepdims=True)


def _sample(spec: SynthSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.permutation(np.arange(n) % spec.num_classes).astype(np.int64)
    t = class_templates(spec)
    x = 0.5 + spec.margin * t[y] + spec.noise * rng.standard_normal((n, spec.height, spec.width))
    return np.clip(x, 0.0, 1.0)[:, None], y


def synth_dataset(spec: SynthSpec, seed: int):
    """Balanced K-class blob images; class means differ by ``margin`` times a template."""
    if spec.num_classes < 2:
        raise DataError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(seed)
    return _sample(spec, spec.num_train, rng), _sample(spec, spec.num_valid, rng)


def split_search_data(train: tuple[np.ndarray, np.ndarray], seed: int):
    """Disjoint halves (weight half, arch half); sizes differ by at most one."""
    x, y = train
    n = len(x)
    if n < 2:
        raise DataError(f"need at least 2 examples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = np.sort(perm[: (n + 1) // 2]), np.sort(perm[(n + 1) // 2:])
    return (x[a], y[a]), (x[b], y[b])
