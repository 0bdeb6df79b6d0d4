"""Categorical copy-number matrices: loading, encoding, imputation and masks."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MISSING_TOKENS = ("", "NA")
DEFAULT_CAP = 11

_BIN_RE = re.compile(r"^(?P<chrom>[^:]+):(?P<start>\d+)-(?P<end>\d+)$")


class MatrixFormatError(ValueError):
    """Malformed matrix file (bad header or non-integer cell)."""


class MatrixShapeError(MatrixFormatError):
    """Rows of unequal length."""


@dataclass(frozen=True)
class BinMeta:
    bin_id: str
    chromosome: str
    start: int
    end: int

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"bin {self.bin_id!r}: start must be < end")

    @classmethod
    def parse(cls, label: str) -> "BinMeta":
        m = _BIN_RE.match(label.strip())
        if m is None:
            raise ValueError(f"bin label {label!r} is not of the form chrom:start-end")
        return cls(label.strip(), m["chrom"], int(m["start"]), int(m["end"]))


@dataclass(frozen=True)
class CategoricalMatrix:
    """N x M matrix of category codes plus an observation mask.

    Codes at unobserved cells carry no meaning for inference (they may hold a
    hidden true value, e.g. for simulated masks) and are never read by the
    fitting routines.
    """

    codes: np.ndarray
    mask: np.ndarray
    n_cat: int
    row_ids: tuple = ()
    col_meta: Optional[tuple] = None

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if codes.ndim != 2 or codes.shape != mask.shape:
            raise ValueError("codes and mask must be 2-D arrays of identical shape")
        if self.n_cat < 2:
            raise ValueError("n_cat must be >= 2")
        obs = codes[mask]
        if obs.size and (obs.min() < 0 or obs.max() >= self.n_cat):
            raise ValueError("observed codes must lie in [0, n_cat)")
        row_ids = tuple(self.row_ids) if len(self.row_ids) else tuple(
            f"row{i}" for i in range(codes.shape[0]))
        if len(row_ids) != codes.shape[0]:
            raise ValueError("row_ids length must equal the number of rows")
        col_meta = self.col_meta
        if col_meta is not None:
            col_meta = tuple(col_meta)
            if len(col_meta) != codes.shape[1]:
                raise ValueError("col_meta length must equal the number of columns")
            if len({b.bin_id for b in col_meta}) != len(col_meta):
                raise ValueError("bin ids must be unique")
        codes.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_meta", col_meta)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]

    @property
    def n_cols(self) -> int:
        return self.codes.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask: np.ndarray) -> "CategoricalMatrix":
        return replace(self, mask=np.asarray(mask, dtype=bool))

    def select_columns(self, cols: Sequence[int]) -> "CategoricalMatrix":
        cols = np.asarray(cols, dtype=np.int64)
        meta = None if self.col_meta is None else tuple(self.col_meta[j] for j in cols)
        return replace(self, codes=self.codes[:, cols], mask=self.mask[:, cols], col_meta=meta)

    def select_rows(self, rows: Sequence[int]) -> "CategoricalMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, codes=self.codes[rows], mask=self.mask[rows],
                       row_ids=tuple(self.row_ids[i] for i in rows))

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "n_cat": self.n_cat,
            "codes": np.where(self.mask, self.codes, 0).tolist(),
            "mask": self.mask.astype(np.uint8).tolist(),
            "row_ids": list(self.row_ids),
            "col_meta": None if self.col_meta is None else [
                {"bin_id": b.bin_id, "chromosome": b.chromosome, "start": b.start, "end": b.end}
                for b in self.col_meta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalMatrix":
        meta = d.get("col_meta")
        if meta is not None:
            meta = tuple(BinMeta(**b) for b in meta)
        codes = np.asarray(d["codes"], dtype=np.int64).reshape(d["n_rows"], d["n_cols"])
        mask = np.asarray(d["mask"], dtype=bool).reshape(d["n_rows"], d["n_cols"])
        return cls(codes, mask, int(d["n_cat"]), tuple(d.get("row_ids") or ()), meta)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CategoricalMatrix":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class WeightMatrix:
    weights: np.ndarray
    mode: str = "observed-only"

    def __post_init__(self):
        if self.mode not in ("observed-only", "inverse-propensity"):
            raise ValueError(f"unknown weight mode {self.mode!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class HoldoutSplit:
    train_mask: np.ndarray
    heldout_cells: np.ndarray = field(repr=False)  # (n, 3) rows of (i, j, true_code)

    def train_matrix(self, m: CategoricalMatrix) -> CategoricalMatrix:
        return m.with_mask(self.train_mask)

    def __len__(self):
        return len(self.heldout_cells)


def load_matrix(path, format: Optional[str] = None) -> CategoricalMatrix:
    """Read a delimited copy-number table.

    The header holds ``chrom:start-end`` bin labels after a leading row-id
    column; cells are non-negative integers, with ``NA`` or an empty field for
    missing values. Values are kept uncapped; see :func:`encode_copy_numbers`.
    """
    path = Path(path)
    if format is None:
        format = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    if format not in ("csv", "tsv"):
        raise ValueError(f"unsupported format {format!r}")
    delimiter = "\t" if format == "tsv" else ","
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise MatrixFormatError(f"{path}: empty file") from None
        col_meta = []
        for col, label in enumerate(header[1:], start=2):
            try:
                col_meta.append(BinMeta.parse(label))
            except ValueError as exc:
                raise MatrixFormatError(f"{path}: line 1, column {col}: {exc}") from None
        n_cols = len(col_meta)
        row_ids, rows, masks = [], [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) - 1 != n_cols:
                raise MatrixShapeError(
                    f"{path}: line {lineno}: expected {n_cols} values, found {len(record) - 1}")
            vals = np.zeros(n_cols, dtype=np.int64)
            obs = np.ones(n_cols, dtype=bool)
            for j, cell in enumerate(record[1:]):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    obs[j] = False
                    continue
                try:
                    v = int(cell)
                except ValueError:
                    raise MatrixFormatError(
                        f"{path}: line {lineno}, column {j + 2}: not an integer: {cell!r}") from None
                if v < 0:
                    raise ValueError(
                        f"{path}: line {lineno}, column {j + 2}: negative copy number {v}")
                vals[j] = v
            row_ids.append(record[0])
            rows.append(vals)
            masks.append(obs)
    if not rows:
        raise MatrixFormatError(f"{path}: no data rows")
    codes = np.vstack(rows)
    mask = np.vstack(masks)
    observed = codes[mask]
    n_cat = max(2, int(observed.max()) + 1 if observed.size else 2)
    return CategoricalMatrix(codes, mask, n_cat, tuple(row_ids), tuple(col_meta))


def write_matrix(m: CategoricalMatrix, path, format: Optional[str] = None, values=None):
    """Write ``m`` (or an aligned integer array ``values``) in the load_matrix layout."""
    path = Path(path)
    if format is None:
        format = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    delimiter = "\t" if format == "tsv" else ","
    values = m.codes if values is None else np.asarray(values)
    meta = m.col_meta or tuple(
        BinMeta(f"bin:{j}-{j + 1}", "bin", j, j + 1) for j in range(m.n_cols))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["row_id"] + [b.bin_id for b in meta])
        for i, rid in enumerate(m.row_ids):
            writer.writerow([rid] + [str(int(v)) if ok else "NA"
                                     for v, ok in zip(values[i], m.mask[i])])


def encode_copy_numbers(raw, cap: int = DEFAULT_CAP) -> CategoricalMatrix:
    """Cap copy numbers at ``cap`` so that the alphabet is {0, ..., cap}."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if not isinstance(raw, CategoricalMatrix):
        arr = np.asarray(raw, dtype=np.int64)
        raw = CategoricalMatrix(arr, np.ones(arr.shape, dtype=bool), max(2, int(arr.max()) + 1))
    if np.any(raw.codes[raw.mask] < 0):
        raise ValueError("copy numbers must be non-negative")
    return replace(raw, codes=np.minimum(raw.codes, cap), n_cat=cap + 1)


def impute_marginal(m: CategoricalMatrix, seed=None, per_column: bool = False) -> CategoricalMatrix:
    """Fill missing cells by i.i.d. draws from the empirical code distribution.

    The marginal is taken over the whole matrix unless ``per_column`` is set,
    in which case each bin uses its own observed codes (falling back to the
    global marginal for fully missing bins).
    """
    if m.n_observed == 0:
        raise ValueError("cannot impute a matrix without observed cells")
    if m.mask.all():
        return m
    rng = np.random.default_rng(seed)
    codes = np.array(m.codes)
    missing = ~m.mask
    glob = np.bincount(m.codes[m.mask], minlength=m.n_cat) / m.n_observed
    if not per_column:
        codes[missing] = rng.choice(m.n_cat, size=int(missing.sum()), p=glob)
    else:
        for j in np.flatnonzero(missing.any(axis=0)):
            obs = m.codes[m.mask[:, j], j]
            p = glob if obs.size == 0 else np.bincount(obs, minlength=m.n_cat) / obs.size
            rows = np.flatnonzero(missing[:, j])
            codes[rows, j] = rng.choice(m.n_cat, size=rows.size, p=p)
    return replace(m, codes=codes, mask=np.ones(m.shape, dtype=bool))


def make_holdout(m: CategoricalMatrix, fraction: float = 0.01, seed=None) -> HoldoutSplit:
    """Withhold ``round(fraction * observed)`` observed cells, uniformly at random."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    obs = np.flatnonzero(m.mask.ravel())
    n_hold = int(round(fraction * obs.size))
    if n_hold < 1:
        raise ValueError("holdout fraction selects no cells")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(obs, size=n_hold, replace=False))
    train = m.mask.copy()
    train.ravel()[picked] = False
    i, j = np.unravel_index(picked, m.shape)
    cells = np.column_stack([i, j, m.codes[i, j]]).astype(np.int64)
    return HoldoutSplit(train, cells)


def observed_weights(m: CategoricalMatrix) -> WeightMatrix:
    return WeightMatrix(m.mask.astype(np.float64), "observed-only")


def propensity_frequency(m: CategoricalMatrix) -> WeightMatrix:
    """Inverse-propensity weights from row/column observation frequencies.

    The observation probability of cell (i, j) is estimated as the product of
    the observed fraction of row i and of column j.
    """
    n, mcols = m.shape
    row_obs = m.mask.sum(axis=1)
    col_obs = m.mask.sum(axis=0)
    if np.any(row_obs == 0):
        raise ValueError(f"row {int(np.flatnonzero(row_obs == 0)[0])} has no observed entries")
    if np.any(col_obs == 0):
        raise ValueError(f"column {int(np.flatnonzero(col_obs == 0)[0])} has no observed entries")
    zeta = np.outer(row_obs / mcols, col_obs / n)
    w = np.where(m.mask, 1.0 / zeta, 0.0)
    return WeightMatrix(w, "inverse-propensity")


def make_weights(m: CategoricalMatrix, kind: str = "none") -> WeightMatrix:
    if kind in ("none", "observed-only"):
        return observed_weights(m)
    if kind == "ipw":
        return propensity_frequency(m)
    raise ValueError(f"unknown weighting {kind!r}")
