"""File formats: count/population tables, adjacency lists, and report CSVs.

Count and population files are CSV with a header row of region labels (the
first header cell names the time column) and one row per time point. Report
CSVs start with ``#``-prefixed metadata lines; every reader here skips them.
"""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataIOError, IngestionError
from .spatial_graph import RegionGraph

MISSING = {"", "NA", "NaN", "nan", "na"}


@dataclass(frozen=True, eq=False)
class Dataset:
    counts: np.ndarray  # T x S, float with NaN for missing cells
    populations: np.ndarray
    regions: tuple
    times: tuple

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def S(self) -> int:
        return self.counts.shape[1]

    @property
    def mask(self) -> np.ndarray | None:
        m = ~np.isnan(self.counts)
        return None if m.all() else m

    def observation(self, clamp=None):
        from .effbs import DEFAULT_CLAMP, Observation

        y = np.nan_to_num(self.counts, nan=0.0)
        return Observation(y, self.populations, self.mask, clamp or DEFAULT_CLAMP)


def _open(path, mode="r"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise DataIOError(f"cannot open {path}: {exc.strerror}") from exc


def _data_lines(fh):
    return (line for line in fh if not line.startswith("#"))


def _read_table(path, what, allow_missing):
    with _open(path) as fh:
        rows = [r for r in csv.reader(_data_lines(fh)) if r]
    if not rows:
        raise IngestionError(f"{what} file {path} is empty")
    header = [h.strip() for h in rows[0]]
    regions = tuple(header[1:])
    if not regions:
        raise IngestionError(f"{what} file {path}: header has no region columns")
    if len(set(regions)) != len(regions):
        raise IngestionError(f"{what} file {path}: duplicate region labels in header")
    times, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IngestionError(f"{what} file {path}: row {i} has {len(row)} cells, header has {len(header)}")
        times.append(row[0].strip())
        vals = []
        for j, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell in MISSING:
                if not allow_missing:
                    raise IngestionError(f"{what} file {path}: missing value at row {i}, column {j}")
                vals.append(math.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise IngestionError(f"{what} file {path}: non-numeric value {cell!r} at row {i}, column {j}") from None
        values.append(vals)
    if len(set(times)) != len(times):
        raise IngestionError(f"{what} file {path}: duplicate time labels")
    return regions, tuple(times), np.array(values, dtype=float).reshape(len(times), len(regions))


def load_dataset(counts_path, population_path) -> Dataset:
    regions, times, y = _read_table(counts_path, "counts", allow_missing=True)
    regions_n, times_n, n = _read_table(population_path, "population", allow_missing=False)
    if regions_n != regions:
        raise IngestionError(
            f"column alignment: counts regions {list(regions)} differ from population regions {list(regions_n)}"
        )
    if times_n != times:
        raise IngestionError(f"row alignment: counts times {list(times)} differ from population times {list(times_n)}")
    for (i, j) in zip(*np.nonzero(~np.isnan(y) & ((y < 0) | (y != np.round(y))))):
        raise IngestionError(f"counts file {counts_path}: invalid count {y[i, j]} at row {i + 2}, column {j + 2}")
    for (i, j) in zip(*np.nonzero(~(n > 0))):
        raise IngestionError(
            f"population file {population_path}: population must be positive, got {n[i, j]} "
            f"at row {i + 2}, column {j + 2} (time {times[i]}, region {regions[j]})"
        )
    return Dataset(y, n, regions, times)


def write_table(path, values, regions, times, meta=None, integer=False):
    with _open(path, "w") as fh:
        _write_meta(fh, meta)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *regions])
        for t, row in zip(times, values):
            w.writerow([t, *(_fmt_int(v) if integer else fmt(v) for v in row)])


def write_dataset(counts_path, population_path, ds: Dataset, meta=None):
    write_table(counts_path, ds.counts, ds.regions, ds.times, meta, integer=True)
    write_table(population_path, ds.populations, ds.regions, ds.times, meta)


def _fmt_int(v):
    return "NA" if np.isnan(v) else str(int(v))


def fmt(v) -> str:
    """Shortest text that parses back to the same float."""
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_meta(fh, meta):
    for k, v in (meta or {}).items():
        fh.write(f"# {k}: {v}\n")


def write_csv(path, columns, rows, meta=None):
    with _open(path, "w") as fh:
        _write_meta(fh, meta)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path):
    """Read a report CSV. Returns ``(meta, columns, rows)`` with cells as strings."""
    meta = {}
    with _open(path) as fh:
        text = fh.read()
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        else:
            body.append(line)
    rows = list(csv.reader(_io.StringIO("\n".join(body))))
    rows = [r for r in rows if r]
    if not rows:
        raise IngestionError(f"{path} has no header row")
    return meta, rows[0], rows[1:]


def read_numeric_csv(path):
    """Like :func:`read_csv` but returns a float array of the data cells."""
    meta, cols, rows = read_csv(path)
    try:
        arr = np.array([[float(c) if c not in MISSING else math.nan for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    return meta, cols, arr.reshape(len(rows), len(cols))


def read_adjacency(path, S: int | None = None):
    """Parse ``k l [g_kl]`` lines (1-based). Returns ``(S, edges)`` with 0-based edges."""
    edges = []
    with _open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (2, 3):
                raise IngestionError(f"adjacency file {path}: line {i} should be 'k l [g]', got {line!r}")
            try:
                k, l = int(parts[0]) - 1, int(parts[1]) - 1
                e = (k, l) if len(parts) == 2 else (k, l, float(parts[2]))
            except ValueError:
                raise IngestionError(f"adjacency file {path}: line {i} is not numeric: {line!r}") from None
            if k < 0 or l < 0:
                raise IngestionError(f"adjacency file {path}: line {i} has a region index below 1")
            edges.append(e)
    n = max((max(e[0], e[1]) + 1 for e in edges), default=0)
    if S is None:
        S = n
    elif n > S:
        raise IngestionError(f"adjacency file {path} references region {n} but only {S} regions exist")
    return S, edges


def load_graph(adjacency_path, S: int | None = None, across_path=None) -> RegionGraph:
    S, edges = read_adjacency(adjacency_path, S)
    across = None
    if across_path is not None:
        _, across = read_adjacency(across_path, S)
    return RegionGraph.from_edges(S, edges, across)


def write_adjacency(path, graph: RegionGraph, across=False):
    with _open(path, "w") as fh:
        if across:
            pairs = sorted({(min(k, l), max(k, l)) for l, c in enumerate(graph.across_time_neighbors) for k in c})
            for k, l in pairs:
                fh.write(f"{k + 1} {l + 1}\n")
        else:
            for (k, l), g in sorted(graph.weights.items()):
                fh.write(f"{k + 1} {l + 1} {fmt(g)}\n")


def dump_text(path, text: str):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror}") from exc
