"""Bag records, the synthetic witness-rate generator, the .bagf format and manifests."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_rng

MAGIC = b"BAGF"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sBBHII")   # magic, version, dtype, reserved, K, D
MANIFEST_HEADER = ["bag_id", "path", "label", "split"]
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.65, 0.10, 0.25)


class BagFormatError(ValueError):
    pass


class BadMagicError(BagFormatError):
    pass


class UnsupportedVersionError(BagFormatError):
    pass


class UnsupportedDtypeError(BagFormatError):
    pass


class TruncatedError(BagFormatError):
    pass


class EmptyShapeError(BagFormatError):
    pass


class TrailingDataError(BagFormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- .bagf

def write_bag(path, features) -> None:
    X = np.asarray(features)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise EmptyShapeError(f"features must be a non-empty K x D matrix, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    K, D = X.shape
    payload = np.ascontiguousarray(X, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, K, D))
        fh.write(payload)


def _parse_header(buf: bytes, name: str) -> tuple[int, int]:
    if len(buf) < HEADER.size:
        raise TruncatedError(f"{name}: header needs {HEADER.size} bytes, file has {len(buf)}")
    magic, version, dtype, _reserved, K, D = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{name}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{name}: unsupported dtype code {dtype}")
    if K == 0 or D == 0:
        raise EmptyShapeError(f"{name}: empty shape K={K}, D={D}")
    return K, D


def read_bag_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return _parse_header(fh.read(HEADER.size), str(path))


def read_bag(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    K, D = _parse_header(buf, str(path))
    expected = HEADER.size + 4 * K * D
    if len(buf) < expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise TrailingDataError(f"{path}: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=K * D, offset=HEADER.size).reshape(K, D).astype(np.float32)


# ---------------------------------------------------------------- records

@dataclass
class BagRecord:
    bag_id: str
    label: int
    split: str
    path: Path | None = None
    witness_mask: np.ndarray | None = None
    _features: np.ndarray | None = field(default=None, repr=False)

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            if self.path is None:
                raise ValueError(f"bag {self.bag_id} has neither features nor a path")
            self._features = read_bag(self.path)
        return self._features

    @property
    def K(self) -> int:
        if self._features is None and self.path is not None:
            return read_bag_header(self.path)[0]
        return self.features.shape[0]

    @property
    def D(self) -> int:
        if self._features is None and self.path is not None:
            return read_bag_header(self.path)[1]
        return self.features.shape[1]


@dataclass
class SynthConfig:
    n_bags: int = 400
    pos_frac: float = 0.5
    K_min: int = 50
    K_max: int = 200
    D: int = 64
    witness_rate: float = 0.10
    sep: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags < 2:
            raise ValueError(f"n_bags must be >= 2, got {self.n_bags}")
        if not 0 < self.pos_frac < 1:
            raise ValueError(f"pos_frac must lie in (0, 1), got {self.pos_frac}")
        if self.K_min < 1 or self.K_max < self.K_min:
            raise ValueError(f"invalid K range [{self.K_min}, {self.K_max}]")
        if self.D < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")
        if not 0 < self.witness_rate <= 1:
            raise ValueError(f"witness_rate must lie in (0, 1], got {self.witness_rate}")
        if not self.sep >= 0:
            raise ValueError(f"sep must be >= 0, got {self.sep}")
        n_pos = round(self.pos_frac * self.n_bags)
        if n_pos == 0 or n_pos == self.n_bags:
            raise ValueError("pos_frac leaves one class empty for this n_bags")


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = round(SPLIT_RATIOS[0] * n)
    n_val = round(SPLIT_RATIOS[1] * n)
    return n_train, n_val, n - n_train - n_val


def assign_splits(labels: np.ndarray, rng: np.random.Generator) -> list[str]:
    """65/10/25 split by bag, stratified so every split sees both classes when it can."""
    n = len(labels)
    totals = split_counts(n)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = len(pos)
    pos_counts = [round(n_pos * t / n) for t in totals[:2]]
    pos_counts.append(n_pos - sum(pos_counts))
    neg_counts = [t - p for t, p in zip(totals, pos_counts)]
    if min(neg_counts) < 0 or pos_counts[2] < 0:
        raise ValueError("cannot stratify splits for this class balance")
    out = [""] * n
    for idx, counts in ((rng.permutation(pos), pos_counts), (rng.permutation(neg), neg_counts)):
        start = 0
        for name, c in zip(SPLITS, counts):
            for i in idx[start:start + c]:
                out[i] = name
            start += c
    return out


def generate_synthetic(cfg: SynthConfig, out_dir=None) -> list[BagRecord]:
    """Gaussian bags: negatives ~ N(0, I), witnesses ~ N(sep * e1, I).

    A positive bag holds max(1, Binomial(K, witness_rate)) witnesses at random
    positions; negative bags hold none. Writes the dataset when ``out_dir`` is
    given.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    n_pos = round(cfg.pos_frac * cfg.n_bags)
    labels = np.zeros(cfg.n_bags, dtype=int)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)
    splits = assign_splits(labels, rng)
    width = max(4, len(str(cfg.n_bags - 1)))
    bags = []
    for i, (y, split) in enumerate(zip(labels, splits)):
        K = int(rng.integers(cfg.K_min, cfg.K_max + 1))
        X = rng.standard_normal((K, cfg.D))
        mask = np.zeros(K, dtype=bool)
        if y == 1:
            n_w = max(1, int(rng.binomial(K, cfg.witness_rate)))
            mask[rng.choice(K, size=n_w, replace=False)] = True
            X[mask, 0] += cfg.sep
        bags.append(BagRecord(bag_id=f"bag_{i:0{width}d}", label=int(y), split=split,
                              witness_mask=mask, _features=X.astype(np.float32)))
    if out_dir is not None:
        write_dataset(bags, out_dir, meta={"generator": "synthetic", "config": asdict(cfg)})
    return bags


def write_dataset(bags: list[BagRecord], out_dir, meta: dict | None = None) -> None:
    """Bag files first, then witness.csv and gen.meta.json, manifest.csv last."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rows = []
    for b in bags:
        rel = f"bags/{b.bag_id}.bagf"
        write_bag(out / rel, b.features)
        b.path = out / rel
        rows.append([b.bag_id, rel, b.label, b.split])
    if all(b.witness_mask is not None for b in bags):
        with open(out / "witness.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bag_id", "instance_index", "is_witness"])
            for b in bags:
                for k, flag in enumerate(b.witness_mask):
                    w.writerow([b.bag_id, k, int(flag)])
    if meta is not None:
        (out / "gen.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def load_manifest(path) -> list[BagRecord]:
    """Parse and validate a manifest; features load lazily from each row's path."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        bags, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}: row {lineno} has {len(row)} fields, expected 4")
            bag_id, rel, label, split = row
            if label not in ("0", "1"):
                raise ManifestError(f"{path}: row {lineno}: label must be 0 or 1, got {label!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}: row {lineno}: unknown split {split!r}")
            if bag_id in seen:
                raise ManifestError(f"{path}: duplicate bag_id {bag_id!r} at row {lineno}")
            bag_path = Path(rel) if Path(rel).is_absolute() else root / rel
            if not bag_path.exists():
                raise ManifestError(f"{path}: row {lineno}: missing file {bag_path}")
            seen.add(bag_id)
            bags.append(BagRecord(bag_id=bag_id, label=int(label), split=split, path=bag_path))
    witness = root / "witness.csv"
    if witness.exists():
        masks = load_witness(witness)
        for b in bags:
            b.witness_mask = masks.get(b.bag_id)
    return bags


def load_witness(path) -> dict[str, np.ndarray]:
    per_bag: dict[str, dict[int, bool]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            per_bag.setdefault(row["bag_id"], {})[int(row["instance_index"])] = row["is_witness"] == "1"
    out = {}
    for bag_id, d in per_bag.items():
        mask = np.zeros(max(d) + 1, dtype=bool)
        for k, v in d.items():
            mask[k] = v
        out[bag_id] = mask
    return out


def by_split(bags: list[BagRecord], split: str) -> list[BagRecord]:
    return [b for b in bags if b.split == split]
