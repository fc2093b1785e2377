"""Synthetic paired image/text features and the on-disk dataset format.

A dataset directory holds ``meta.json`` plus three matrix files (``V.f64``,
``T.f64``, ``Y.f64``). Each matrix file is a 16-byte header (``CMSTMAT1``,
then rows and cols as little-endian uint32) followed by little-endian float64
values in row-major order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DatasetFormatError,
    DimensionMismatchError,
    HeaderError,
    InputError,
    TruncatedPayloadError,
)
from .nn_core import Rng

MAT_MAGIC = b"CMSTMAT1"
_HEADER = struct.Struct("<8sII")
SCHEMA_VERSION = 1
MAX_PROTOTYPE_RETRIES = 1000


@dataclass
class SyntheticConfig:
    n_classes: int = 10
    n_pairs: int = 1000
    d_v: int = 128
    d_t: int = 64
    latent_dim: int = 16
    class_sep: float = 3.0
    noise_sigma: float = 0.8
    feature_noise: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2", "n_classes")
        if self.n_pairs < self.n_classes:
            raise ConfigError("n_pairs must be at least n_classes", "n_pairs")
        for name in ("d_v", "d_t", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", name)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", "noise_sigma")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be non-negative", "feature_noise")
        if self.class_sep < 0:
            raise ConfigError("class_sep must be non-negative", "class_sep")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)", "test_fraction")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(f"unknown dataset config field {name!r}", name)
        cfg = cls(**data)
        for f in fields(cls):
            value = getattr(cfg, f.name)
            want = int if f.type in ("int", int) else float
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{f.name} must be a number", f.name)
            if want is int and int(value) != value:
                raise ConfigError(f"{f.name} must be an integer", f.name)
            setattr(cfg, f.name, want(value))
        return cfg.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultimodalDataset:
    V: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        n = self.V.shape[0]
        if self.T.shape[0] != n or self.Y.shape[0] != n:
            raise DimensionMismatchError(
                f"row counts disagree: V={n}, T={self.T.shape[0]}, Y={self.Y.shape[0]}"
            )
        if not np.all((self.Y == 0) | (self.Y == 1)) or not np.all(self.Y.sum(axis=1) == 1):
            raise DatasetFormatError("Y rows must be one-hot")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size and not np.array_equal(np.sort(both), np.arange(n)):
            raise DatasetFormatError("train/test splits must be disjoint and cover all rows")

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def n_classes(self) -> int:
        return self.Y.shape[1]

    @property
    def d_v(self) -> int:
        return self.V.shape[1]

    @property
    def d_t(self) -> int:
        return self.T.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def __eq__(self, other):
        if not isinstance(other, MultimodalDataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("V", "T", "Y", "train_idx", "test_idx")
            )
        )


def _draw_prototypes(cfg, gen):
    for _ in range(MAX_PROTOTYPE_RETRIES):
        protos = gen.normal(size=(cfg.n_classes, cfg.latent_dim))
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(cfg.n_classes)] = np.inf
        if dist.min() >= cfg.class_sep:
            return protos
    raise ConfigError(
        f"could not place {cfg.n_classes} prototypes at separation "
        f"{cfg.class_sep} in {MAX_PROTOTYPE_RETRIES} tries",
        "class_sep",
    )


def generate_synthetic(cfg: SyntheticConfig) -> MultimodalDataset:
    """Shared latent per pair, pushed through two fixed random tanh maps.

    Prototypes are unit-normal draws rejected until all pairwise distances
    reach ``class_sep``; latents add isotropic noise of scale ``noise_sigma``.
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    protos = _draw_prototypes(cfg, rng.stream("datagen/prototypes"))

    labels = rng.stream("datagen/labels").permutation(
        np.arange(cfg.n_pairs) % cfg.n_classes
    )
    z = protos[labels] + cfg.noise_sigma * rng.stream("datagen/latent").normal(
        size=(cfg.n_pairs, cfg.latent_dim)
    )

    maps = rng.stream("datagen/maps")
    scale = 1.0 / math.sqrt(cfg.latent_dim)
    A_v = maps.normal(scale=scale, size=(cfg.d_v, cfg.latent_dim))
    A_t = maps.normal(scale=scale, size=(cfg.d_t, cfg.latent_dim))

    noise = rng.stream("datagen/feature_noise")
    V = np.tanh(z @ A_v.T) + cfg.feature_noise * noise.normal(size=(cfg.n_pairs, cfg.d_v))
    T = np.tanh(z @ A_t.T) + cfg.feature_noise * noise.normal(size=(cfg.n_pairs, cfg.d_t))

    Y = np.zeros((cfg.n_pairs, cfg.n_classes))
    Y[np.arange(cfg.n_pairs), labels] = 1.0
    everything = np.arange(cfg.n_pairs)
    ds = MultimodalDataset(V, T, Y, everything, np.array([], dtype=np.int64), cfg.seed)
    return split(ds, cfg.test_fraction, cfg.seed)


def split(dataset: MultimodalDataset, test_fraction: float, seed: int) -> MultimodalDataset:
    """Class-stratified train/test split; returns a new dataset."""
    if not 0.0 < test_fraction < 1.0:
        raise InputError("test_fraction must lie in (0, 1)")
    gen = Rng(seed).stream("datagen/split")
    labels = dataset.labels
    train, test = [], []
    for c in range(dataset.n_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise InputError(f"class {c} has fewer than 2 members and cannot be split")
        members = gen.permutation(members)
        n_test = int(math.floor(test_fraction * members.size + 0.5))
        test.append(members[:n_test])
        train.append(members[n_test:])
    return replace(
        dataset,
        train_idx=np.sort(np.concatenate(train)),
        test_idx=np.sort(np.concatenate(test)),
    )


def write_matrix(path, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAT_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    name = Path(path).name
    if len(raw) < _HEADER.size:
        raise HeaderError(f"{name}: file too short for the 16-byte header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAT_MAGIC:
        raise HeaderError(f"{name}: bad header magic {magic!r}, expected {MAT_MAGIC!r}")
    payload = raw[_HEADER.size:]
    want = rows * cols * 8
    if len(payload) < want:
        raise TruncatedPayloadError(
            f"{name}: header says {rows}x{cols} ({want} bytes) but payload has {len(payload)}"
        )
    if len(payload) > want:
        raise DimensionMismatchError(
            f"{name}: payload has {len(payload)} bytes, header implies {want}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_dataset(dataset: MultimodalDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n": dataset.n,
        "c": dataset.n_classes,
        "d_v": dataset.d_v,
        "d_t": dataset.d_t,
        "seed": int(dataset.seed),
        "train": [int(i) for i in dataset.train_idx],
        "test": [int(i) for i in dataset.test_idx],
    }
    (path / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    write_matrix(path / "V.f64", dataset.V)
    write_matrix(path / "T.f64", dataset.T)
    write_matrix(path / "Y.f64", dataset.Y)
    return path


def load_dataset(path) -> MultimodalDataset:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"meta.json is not valid JSON: {exc}") from exc
    missing = [k for k in ("schema_version", "n", "c", "d_v", "d_t", "seed", "train", "test")
               if k not in meta]
    if missing:
        raise DatasetFormatError(f"meta.json lacks keys {missing}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise DatasetFormatError(f"unsupported schema_version {meta['schema_version']}")
    V = read_matrix(path / "V.f64")
    T = read_matrix(path / "T.f64")
    Y = read_matrix(path / "Y.f64")
    expect = {"V.f64": (V, meta["d_v"]), "T.f64": (T, meta["d_t"]), "Y.f64": (Y, meta["c"])}
    for name, (m, cols) in expect.items():
        if m.shape != (meta["n"], cols):
            raise DimensionMismatchError(
                f"{name} is {m.shape[0]}x{m.shape[1]} but meta.json declares "
                f"n={meta['n']}, cols={cols}"
            )
    return MultimodalDataset(V, T, Y, meta["train"], meta["test"], meta["seed"])
