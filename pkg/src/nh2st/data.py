"""Spot datasets: in-memory representation, directory format, preprocessing.

A dataset directory holds

    manifest.toml    M, P, n, schema_version = 1, optional planted_map_file, normalized
    spots.csv        spot_id,x,y
    expr.csv         spot_id,<gene_1>,...,<gene_n>   (same row order as spots.csv)
    patches.bin      little-endian float32, row-major M×P
    planted_map.bin  little-endian float64, row-major n×P (synthetic data only)
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
PLANTED_MAP_FILE = "planted_map.bin"


class DatasetError(ValueError):
    """Raised for malformed dataset directories or inconsistent contents."""


@dataclass(frozen=True)
class SpotRecord:
    spot_id: str
    coord: tuple[float, float]
    patch: np.ndarray
    expr: np.ndarray


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class STDataset:
    """M spots with P patch features and n genes each, stored column-wise.

    ``spots`` materializes SpotRecords on demand; the arrays are the storage.
    """

    spot_ids: tuple[str, ...]
    coords: np.ndarray
    patches: np.ndarray
    expr: np.ndarray
    gene_names: tuple[str, ...]
    normalized: bool = False
    planted_map: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "spot_ids", tuple(str(s) for s in self.spot_ids))
        object.__setattr__(self, "gene_names", tuple(str(g) for g in self.gene_names))
        object.__setattr__(self, "coords", _frozen(self.coords))
        object.__setattr__(self, "patches", _frozen(self.patches))
        object.__setattr__(self, "expr", _frozen(self.expr))
        if self.planted_map is not None:
            object.__setattr__(self, "planted_map", _frozen(self.planted_map))
        M = len(self.spot_ids)
        if self.coords.shape != (M, 2):
            raise DatasetError(f"coords must be {M}x2, got {self.coords.shape}")
        if self.patches.ndim != 2 or self.patches.shape[0] != M:
            raise DatasetError(f"patches must have {M} rows, got {self.patches.shape}")
        if self.expr.shape != (M, len(self.gene_names)):
            raise DatasetError(f"expr must be {M}x{len(self.gene_names)}, got {self.expr.shape}")
        if len(set(self.spot_ids)) != M:
            raise DatasetError("duplicate spot_id")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise DatasetError("duplicate gene name")
        if len({tuple(c) for c in self.coords.tolist()}) != M:
            raise DatasetError("duplicate spot coordinates")
        for name in ("coords", "patches", "expr"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"non-finite value in {name}")
        if self.normalized and np.any(self.expr < 0):
            raise DatasetError("normalized expression must be non-negative")
        if self.planted_map is not None and self.planted_map.shape != (self.n, self.P):
            raise DatasetError(f"planted map must be {self.n}x{self.P}")

    @property
    def M(self) -> int:
        return len(self.spot_ids)

    @property
    def P(self) -> int:
        return self.patches.shape[1]

    @property
    def n(self) -> int:
        return len(self.gene_names)

    @property
    def spots(self) -> list[SpotRecord]:
        return [self[i] for i in range(self.M)]

    def __len__(self) -> int:
        return self.M

    def __getitem__(self, i: int) -> SpotRecord:
        x, y = self.coords[i]
        return SpotRecord(self.spot_ids[i], (float(x), float(y)), self.patches[i], self.expr[i])

    @classmethod
    def from_records(cls, records, gene_names, normalized: bool = False) -> STDataset:
        records = list(records)
        P = {len(r.patch) for r in records}
        if len(P) > 1:
            raise DatasetError("patch lengths differ between spots")
        return cls(
            spot_ids=[r.spot_id for r in records],
            coords=np.array([r.coord for r in records], dtype=np.float64).reshape(-1, 2),
            patches=np.array([r.patch for r in records], dtype=np.float64),
            expr=np.array([r.expr for r in records], dtype=np.float64),
            gene_names=gene_names,
            normalized=normalized,
        )

    def subset(self, indices) -> STDataset:
        idx = np.asarray(indices, dtype=int)
        return STDataset(
            spot_ids=[self.spot_ids[i] for i in idx],
            coords=self.coords[idx],
            patches=self.patches[idx],
            expr=self.expr[idx],
            gene_names=self.gene_names,
            normalized=self.normalized,
            planted_map=self.planted_map,
        )

    def gene_index(self, name: str) -> int:
        try:
            return self.gene_names.index(name)
        except ValueError:
            raise KeyError(f"unknown gene {name!r}") from None

    def equals(self, other: STDataset) -> bool:
        same_map = (self.planted_map is None and other.planted_map is None) or (
            self.planted_map is not None
            and other.planted_map is not None
            and np.array_equal(self.planted_map, other.planted_map)
        )
        return (
            self.spot_ids == other.spot_ids
            and self.gene_names == other.gene_names
            and self.normalized == other.normalized
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.patches, other.patches)
            and np.array_equal(self.expr, other.expr)
            and same_map
        )


# --------------------------------------------------------------------------
# directory I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: STDataset, dir_path) -> Path:
    """Write ``ds`` in the directory layout.  Patches are stored as float32."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"schema_version = {SCHEMA_VERSION}",
        f"M = {ds.M}",
        f"P = {ds.P}",
        f"n = {ds.n}",
        f"normalized = {'true' if ds.normalized else 'false'}",
    ]
    if ds.planted_map is not None:
        lines.append(f'planted_map_file = "{PLANTED_MAP_FILE}"')
        (out / PLANTED_MAP_FILE).write_bytes(np.ascontiguousarray(ds.planted_map, dtype="<f8").tobytes())
    (out / "manifest.toml").write_text("\n".join(lines) + "\n")

    with open(out / "spots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", "x", "y"])
        for sid, (x, y) in zip(ds.spot_ids, ds.coords):
            w.writerow([sid, _fmt(x), _fmt(y)])
    with open(out / "expr.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", *ds.gene_names])
        for sid, row in zip(ds.spot_ids, ds.expr):
            w.writerow([sid, *map(_fmt, row)])
    (out / "patches.bin").write_bytes(np.ascontiguousarray(ds.patches, dtype="<f4").tobytes())
    return out


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path.name} is empty")
    return rows[0], rows[1:]


def _parse_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"{where}: non-finite value {text!r}")
    return v


def load_dataset(dir_path) -> STDataset:
    root = Path(dir_path)
    for name in ("manifest.toml", "spots.csv", "expr.csv", "patches.bin"):
        if not (root / name).is_file():
            raise DatasetError(f"missing file {name} in {root}")
    manifest = tomllib.loads((root / "manifest.toml").read_text())
    for key in ("M", "P", "n", "schema_version"):
        if key not in manifest:
            raise DatasetError(f"manifest.toml lacks key {key!r}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {manifest['schema_version']}")
    M, P, n = int(manifest["M"]), int(manifest["P"]), int(manifest["n"])

    header, rows = _read_csv(root / "spots.csv")
    if header != ["spot_id", "x", "y"]:
        raise DatasetError(f"spots.csv header must be spot_id,x,y, got {','.join(header)}")
    if len(rows) != M:
        raise DatasetError(f"dimension mismatch: manifest M={M} but spots.csv has {len(rows)} rows")
    spot_ids = []
    coords = np.empty((M, 2))
    for i, row in enumerate(rows):
        if len(row) != 3:
            raise DatasetError(f"spots.csv row {i + 1}: expected 3 fields")
        spot_ids.append(row[0])
        coords[i] = [_parse_float(row[1], f"spots.csv row {i + 1}"), _parse_float(row[2], f"spots.csv row {i + 1}")]

    header, rows = _read_csv(root / "expr.csv")
    if not header or header[0] != "spot_id":
        raise DatasetError("expr.csv header must start with spot_id")
    genes = header[1:]
    if len(genes) != n:
        raise DatasetError(f"dimension mismatch: manifest n={n} but expr.csv has {len(genes)} gene columns")
    if len(rows) != M:
        raise DatasetError(f"dimension mismatch: manifest M={M} but expr.csv has {len(rows)} rows")
    expr = np.empty((M, n))
    for i, row in enumerate(rows):
        if len(row) != n + 1:
            raise DatasetError(f"dimension mismatch: expr.csv row {i + 1} has {len(row) - 1} values, expected {n}")
        if row[0] != spot_ids[i]:
            raise DatasetError(f"expr.csv row {i + 1} is {row[0]!r}, expected {spot_ids[i]!r}")
        expr[i] = [_parse_float(v, f"expr.csv row {i + 1}") for v in row[1:]]

    raw = (root / "patches.bin").read_bytes()
    if len(raw) != M * P * 4:
        raise DatasetError(f"dimension mismatch: patches.bin holds {len(raw)} bytes, expected {M * P * 4} for M={M}, P={P}")
    patches = np.frombuffer(raw, dtype="<f4").reshape(M, P).astype(np.float64)

    planted = None
    if "planted_map_file" in manifest:
        blob = (root / manifest["planted_map_file"]).read_bytes()
        if len(blob) != n * P * 8:
            raise DatasetError(f"dimension mismatch: planted map holds {len(blob)} bytes, expected {n * P * 8}")
        planted = np.frombuffer(blob, dtype="<f8").reshape(n, P).copy()

    return STDataset(
        spot_ids=spot_ids,
        coords=coords,
        patches=patches,
        expr=expr,
        gene_names=genes,
        normalized=bool(manifest.get("normalized", False)),
        planted_map=planted,
    )


# --------------------------------------------------------------------------
# preprocessing


def select_top_genes(raw: STDataset, n: int = 250) -> STDataset:
    """Keep the n genes with the largest total count and log1p-transform them.

    Ties in total count are broken by gene name.  Kept genes are ordered by
    decreasing total.
    """
    if raw.normalized:
        raise DatasetError("dataset is already normalized")
    if n < 1 or n > raw.n:
        raise DatasetError(f"cannot select {n} genes from {raw.n}")
    if np.any(raw.expr < 0):
        raise DatasetError("raw counts must be non-negative")
    totals = raw.expr.sum(axis=0)
    order = sorted(range(raw.n), key=lambda g: (-totals[g], raw.gene_names[g]))[:n]
    return STDataset(
        spot_ids=raw.spot_ids,
        coords=raw.coords,
        patches=raw.patches,
        expr=np.log1p(raw.expr[:, order]),
        gene_names=[raw.gene_names[g] for g in order],
        normalized=True,
    )


def _neighbor_order(coords: np.ndarray, query: np.ndarray) -> np.ndarray:
    d2 = ((coords[None, :, :] - query[:, None, :]) ** 2).sum(axis=-1)
    # stable sort keeps ascending index among equal distances
    return np.argsort(d2, axis=1, kind="stable")


def knn_spatial(ds: STDataset, spot_index: int, K: int) -> list[int]:
    """The K spots nearest to ``spot_index`` by Euclidean distance, nearest first."""
    if K < 1 or K >= ds.M:
        raise DatasetError(f"K={K} must satisfy 1 <= K < M={ds.M}")
    if not 0 <= spot_index < ds.M:
        raise IndexError(spot_index)
    order = _neighbor_order(ds.coords, ds.coords[spot_index][None, :])[0]
    return [int(i) for i in order if i != spot_index][:K]


def knn_table(ds: STDataset, K: int, chunk: int = 512) -> np.ndarray:
    """M×K neighbour indices for every spot (row i equals knn_spatial(ds, i, K))."""
    if K < 1 or K >= ds.M:
        raise DatasetError(f"K={K} must satisfy 1 <= K < M={ds.M}")
    out = np.empty((ds.M, K), dtype=int)
    for start in range(0, ds.M, chunk):
        stop = min(start + chunk, ds.M)
        order = _neighbor_order(ds.coords, ds.coords[start:stop])
        for r, i in enumerate(range(start, stop)):
            row = order[r]
            out[i] = row[row != i][:K]
    return out


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    grid: int = 8
    P: int = 128
    n: int = 32
    sigma: float = 0.05
    corr_length: float = 1.5

    def __post_init__(self):
        for name in ("grid", "P", "n"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive")
        if self.sigma < 0 or self.corr_length < 0:
            raise DatasetError("sigma and corr_length must be non-negative")

    @property
    def M(self) -> int:
        return self.grid * self.grid


def softplus(x):
    return np.logaddexp(0.0, x)


def _smoothed_noise(rng: np.random.Generator, coords: np.ndarray, n: int, length: float) -> np.ndarray:
    white = rng.standard_normal((len(coords), n))
    if length == 0:
        return white
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
    kernel = np.exp(-d2 / (2.0 * length**2))
    # each output keeps unit marginal variance
    kernel /= np.sqrt((kernel**2).sum(axis=1, keepdims=True))
    return kernel @ white


def synth_generate(cfg: SynthConfig, seed: int) -> STDataset:
    """Grid of spots whose expression is softplus of a planted linear map of the patch.

    expr = softplus(patch @ A.T + sigma * smoothed_noise), A is n×P with
    entries N(0, 1/P).  Patches are float32-representable so the dataset
    survives a save/load round trip bit for bit.
    """
    rng = np.random.default_rng(seed)
    g = cfg.grid
    ys, xs = np.divmod(np.arange(cfg.M), g)
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    patches = rng.standard_normal((cfg.M, cfg.P)).astype(np.float32).astype(np.float64)
    planted = rng.standard_normal((cfg.n, cfg.P)) / np.sqrt(cfg.P)
    noise = _smoothed_noise(rng, coords, cfg.n, cfg.corr_length)
    expr = softplus(patches @ planted.T + cfg.sigma * noise)
    width = len(str(cfg.M - 1))
    return STDataset(
        spot_ids=[f"s{i:0{width}d}" for i in range(cfg.M)],
        coords=coords,
        patches=patches,
        expr=expr,
        gene_names=[f"g{j:0{len(str(cfg.n - 1))}d}" for j in range(cfg.n)],
        normalized=True,
        planted_map=planted,
    )


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: np.ndarray

    def __post_init__(self):
        a = _frozen(self.assignments, dtype=int)
        object.__setattr__(self, "assignments", a)
        sizes = np.bincount(a, minlength=self.k)
        if len(sizes) != self.k or sizes.min() == 0 or sizes.max() - sizes.min() > 1:
            raise DatasetError(f"unbalanced fold sizes {sizes.tolist()}")

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    @property
    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def kfold_split(ds: STDataset | int, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle, then deal spots round-robin into k folds."""
    M = ds if isinstance(ds, int) else ds.M
    if not 2 <= k <= M:
        raise DatasetError(f"k={k} must satisfy 2 <= k <= M={M}")
    perm = np.random.default_rng(seed).permutation(M)
    assignments = np.empty(M, dtype=int)
    assignments[perm] = np.arange(M) % k
    return FoldSplit(k, assignments)
