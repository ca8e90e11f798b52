"""Data containers, CSV ingestion, and treatment/control views.

The canonical interchange format is a headered CSV with covariate columns
``x1..xd``, outcome ``y``, treatment indicator ``t``, and an optional latent
response column ``h`` (simulation truth). Values are written with 17
significant digits so 64-bit floats round-trip losslessly.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .validation import as_binary_vector, as_float_matrix, as_float_vector, check_lengths

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Dataset:
    """An observational study: covariates, outcomes, and treatment labels.

    Attributes
    ----------
    x : ndarray of shape (n, d)
        Covariates.
    y : ndarray of shape (n,)
        Outcomes.
    t : ndarray of shape (n,)
        Treatment indicators in {0, 1}.
    h : ndarray of shape (n,) or None
        Latent response truth (simulation only). ``h[i] == 0`` whenever
        ``t[i] == 0``. ``None`` marks real-data mode.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    h: np.ndarray | None = None

    def __post_init__(self):
        x = as_float_matrix(self.x, "x")
        y = as_float_vector(self.y, "y")
        t = as_binary_vector(self.t, "t")
        n = x.shape[0]
        check_lengths(n, y=y, t=t)
        h = self.h
        if h is not None:
            h = as_binary_vector(h, "h")
            check_lengths(n, h=h)
            bad = (h == 1) & (t == 0)
            if np.any(bad):
                row = int(np.where(bad)[0][0])
                raise ValueError(f"h=1 with t=0 at row {row}")
        for arr in (x, y, t, h):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "h", h)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def has_truth(self):
        return self.h is not None

    def require_truth(self):
        if self.h is None:
            raise ValueError("dataset has no latent response column h (real-data mode)")
        return self.h


@dataclass(frozen=True)
class TreatmentSplit:
    """Index partition of a dataset into treated and untreated rows."""

    treated: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    untreated: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))


def split_by_treatment(ds: Dataset) -> TreatmentSplit:
    """Partition row indices by treatment label.

    Raises ``ValueError`` if either group is empty, since every estimator
    needs both populations.
    """
    treated = np.flatnonzero(ds.t == 1)
    untreated = np.flatnonzero(ds.t == 0)
    if treated.size == 0:
        raise ValueError("no treated samples (t=1) in dataset")
    if untreated.size == 0:
        raise ValueError("no untreated samples (t=0) in dataset")
    return TreatmentSplit(treated=treated, untreated=untreated)


def _covariate_columns(header):
    cols = []
    k = 1
    while f"x{k}" in header:
        cols.append(header.index(f"x{k}"))
        k += 1
    return cols


def load_dataset(path, has_truth: bool | None = None) -> Dataset:
    """Load a dataset from CSV.

    Parameters
    ----------
    path : str or Path
        CSV file with header columns ``x1..xd``, ``y``, ``t``, optional ``h``.
        Leading lines starting with ``#`` are treated as comments.
    has_truth : bool or None
        If True, require the ``h`` column; if False, ignore it even when
        present; if None (default), load ``h`` when available.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(io.StringIO("".join(lines)))
    rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    x_cols = _covariate_columns(header)
    if not x_cols:
        raise ValueError(f"{path}: missing column 'x1'")
    for required in ("y", "t"):
        if required not in header:
            raise ValueError(f"{path}: missing column '{required}'")
    y_col = header.index("y")
    t_col = header.index("t")
    h_col = header.index("h") if "h" in header else None
    if has_truth and h_col is None:
        raise ValueError(f"{path}: missing column 'h' (has_truth=True)")
    if has_truth is False:
        h_col = None

    data = rows[1:]
    if not data:
        raise ValueError(f"{path}: no data rows")
    n, d = len(data), len(x_cols)
    x = np.empty((n, d))
    y = np.empty(n)
    t = np.empty(n)
    h = np.empty(n) if h_col is not None else None
    for i, row in enumerate(data):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        try:
            for j, c in enumerate(x_cols):
                x[i, j] = float(row[c])
            y[i] = float(row[y_col])
            t[i] = float(row[t_col])
            if h is not None:
                h[i] = float(row[h_col])
        except ValueError as exc:
            raise ValueError(f"{path}: unparseable number at row {i}: {exc}") from None
    try:
        return Dataset(x=x, y=y, t=t, h=h)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def save_dataset(ds: Dataset, path, header_comment: str | None = None) -> None:
    """Write a dataset as CSV with 17-significant-digit decimals."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        cols = [f"x{j + 1}" for j in range(ds.d)] + ["y", "t"]
        if ds.h is not None:
            cols.append("h")
        writer.writerow(cols)
        for i in range(ds.n):
            row = [_FLOAT_FMT % v for v in ds.x[i]]
            row.append(_FLOAT_FMT % ds.y[i])
            row.append(str(int(ds.t[i])))
            if ds.h is not None:
                row.append(str(int(ds.h[i])))
            writer.writerow(row)
