"""Discretized environment, ground truth, and the noisy patch sensor.

Grid conventions
----------------
``values`` is stored row-major with shape ``(height, width)``: row index is
``y``, column index is ``x``. A cell is addressed either by its ``(x, y)``
coordinate or by its flat index ``y * width + x``. Everything downstream
(GP, planner, beliefs) works in flat indices.

Quantiles everywhere use linear interpolation between order statistics
(``numpy.quantile(..., method="linear")``). Truth and estimates share the
rule, so the choice only has to be consistent.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

Cell = tuple[int, int]

# Default survey area: about 80 x 60 m discretized to 25 x 25 cells.
DEFAULT_CELL_SIZE_M = (80.0 / 25.0, 60.0 / 25.0)

# Bit layout for provenance keys: robot | step | cell.
_CELL_BITS = 24
_STEP_BITS = 20
HYPOTHETICAL_ROBOT = (1 << 15) - 1


class RasterError(ValueError):
    """Raised for malformed or non-rectangular raster input."""


class OutOfBoundsError(IndexError):
    """Raised when a cell coordinate lies outside the grid."""


def empirical_quantiles(x, q) -> np.ndarray:
    """Linear-interpolation empirical quantiles of ``x`` at levels ``q``."""
    return np.quantile(np.asarray(x, dtype=float).ravel(),
                       np.asarray(q, dtype=float), method="linear")


@dataclass(frozen=True)
class QuantileSet:
    """Strictly increasing quantile levels in the open interval (0, 1)."""

    quantiles: tuple[float, ...]

    def __post_init__(self):
        qs = tuple(float(v) for v in self.quantiles)
        if not qs:
            raise ValueError("QuantileSet must be nonempty")
        if any(not 0.0 < v < 1.0 for v in qs):
            raise ValueError(f"quantile levels must lie in (0, 1): {qs}")
        if any(b <= a for a, b in zip(qs, qs[1:])):
            raise ValueError(f"quantile levels must be strictly increasing: {qs}")
        object.__setattr__(self, "quantiles", qs)

    def __len__(self):
        return len(self.quantiles)

    def __iter__(self):
        return iter(self.quantiles)

    def as_array(self) -> np.ndarray:
        return np.array(self.quantiles)


QUARTILES = QuantileSet((0.25, 0.5, 0.75))
MEDIAN_EXTREMA = QuantileSet((0.5, 0.9, 0.99))
EXTREMA = QuantileSet((0.9, 0.95, 0.99))
DEFAULT_QUANTILE_SETS = {
    "quartiles": QUARTILES,
    "median_extrema": MEDIAN_EXTREMA,
    "extrema": EXTREMA,
}


@dataclass(frozen=True)
class SensorModel:
    patch_side: int = 5
    noise_std: float = 0.05

    def __post_init__(self):
        if self.patch_side < 1 or self.patch_side % 2 == 0:
            raise ValueError("patch_side must be an odd positive integer")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass(frozen=True, eq=False)
class GridField:
    """Ground-truth scalar field over a ``width x height`` cell grid."""

    values: np.ndarray
    cell_size_m: tuple[float, float] = DEFAULT_CELL_SIZE_M

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.size < 1:
            raise ValueError("values must be a nonempty 2-D matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("field values must lie in [0, 1]; normalize first")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        cs = self.cell_size_m
        if np.isscalar(cs):
            cs = (float(cs), float(cs))
        cs = (float(cs[0]), float(cs[1]))
        if cs[0] <= 0 or cs[1] <= 0:
            raise ValueError("cell_size_m must be positive")
        object.__setattr__(self, "cell_size_m", cs)

    @property
    def width_cells(self) -> int:
        return self.values.shape[1]

    @property
    def height_cells(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.ravel()

    def contains(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width_cells and 0 <= y < self.height_cells

    def flat_index(self, cell: Cell) -> int:
        if not self.contains(cell):
            raise OutOfBoundsError(f"cell {cell} outside {self.width_cells}x{self.height_cells} grid")
        return cell[1] * self.width_cells + cell[0]

    def cell_of(self, index: int) -> Cell:
        return (int(index) % self.width_cells, int(index) // self.width_cells)


def grid_coords(shape: tuple[int, int]) -> np.ndarray:
    """``(n_cells, 2)`` array of ``(x, y)`` for every flat index."""
    h, w = shape
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.column_stack([xs, ys]).astype(float)


def cell_distance(a: Cell, b: Cell, cell_size=(1.0, 1.0)) -> float:
    """Euclidean distance between two cells, scaled per axis."""
    dx = (a[0] - b[0]) * cell_size[0]
    dy = (a[1] - b[1]) * cell_size[1]
    return math.hypot(dx, dy)


def patch_cells(shape: tuple[int, int], center: Cell, side: int) -> np.ndarray:
    """Flat indices of the ``side x side`` block around ``center``, clipped."""
    h, w = shape
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise OutOfBoundsError(f"center {center} outside {w}x{h} grid")
    half = side // 2
    xs = np.arange(max(0, x - half), min(w, x + half + 1))
    ys = np.arange(max(0, y - half), min(h, y + half + 1))
    return (ys[:, None] * w + xs[None, :]).ravel()


# ----------------------------------------------------------------------------
# Measurements
# ----------------------------------------------------------------------------

def provenance_keys(robots, steps, cells) -> np.ndarray:
    robots = np.asarray(robots, dtype=np.int64)
    steps = np.asarray(steps, dtype=np.int64)
    cells = np.asarray(cells, dtype=np.int64)
    return (robots << (_STEP_BITS + _CELL_BITS)) | (steps << _CELL_BITS) | cells


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Readings at flat cell indices, each stamped with (robot, step).

    A reading's identity is the triple (robot, step, cell). Two noisy reads
    of one cell are distinct readings; forwarded copies of one reading are
    not, and :meth:`union` drops them.
    """

    cells: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    robots: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    steps: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        robots = np.broadcast_to(np.asarray(self.robots, dtype=np.int64), cells.shape).copy()
        steps = np.broadcast_to(np.asarray(self.steps, dtype=np.int64), cells.shape).copy()
        if not (len(cells) == len(values) == len(robots) == len(steps)):
            raise ValueError("locations, values and tokens must have equal length")
        if len(cells) and (cells.min() < 0 or cells.max() >= 1 << _CELL_BITS):
            raise OutOfBoundsError("cell index out of range")
        for name, arr in (("cells", cells), ("values", values), ("robots", robots), ("steps", steps)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        keys = provenance_keys(robots, steps, cells)
        keys.setflags(write=False)
        object.__setattr__(self, "keys", keys)

    def __len__(self):
        return len(self.cells)

    @classmethod
    def empty(cls) -> "MeasurementSet":
        return cls()

    def tokens(self) -> list[tuple[int, int]]:
        return list(zip(self.robots.tolist(), self.steps.tolist()))

    def unique(self) -> "MeasurementSet":
        if len(self) == 0:
            return self
        _, first = np.unique(self.keys, return_index=True)
        if len(first) == len(self):
            return self
        first.sort()
        return self._take(first)

    def new_from(self, other: "MeasurementSet") -> "MeasurementSet":
        """Readings of ``other`` whose keys are absent here."""
        if len(other) == 0 or len(self) == 0:
            return other.unique()
        mask = ~np.isin(other.keys, self.keys)
        return other._take(np.flatnonzero(mask)).unique()

    def union(self, other: "MeasurementSet") -> "MeasurementSet":
        extra = self.new_from(other)
        if len(extra) == 0:
            return self
        return MeasurementSet(
            np.concatenate([self.cells, extra.cells]),
            np.concatenate([self.values, extra.values]),
            np.concatenate([self.robots, extra.robots]),
            np.concatenate([self.steps, extra.steps]),
        )

    def _take(self, idx) -> "MeasurementSet":
        return MeasurementSet(self.cells[idx], self.values[idx], self.robots[idx], self.steps[idx])

    def filter_robot(self, robot: int) -> "MeasurementSet":
        return self._take(np.flatnonzero(self.robots == robot))


def sense_patch(field: GridField, center: Cell, sensor: SensorModel, rng: np.random.Generator,
                robot: int = 0, step: int = 0) -> MeasurementSet:
    """Read the clipped ``patch_side``-square block of cells around ``center``.

    A full ``patch_side**2`` block of noise is always drawn so that the
    number of draws does not depend on where the robot is.
    """
    cells = patch_cells(field.shape, center, sensor.patch_side)
    side = sensor.patch_side
    noise = rng.standard_normal((side, side)) * sensor.noise_std
    half = side // 2
    xs = cells % field.width_cells - center[0] + half
    ys = cells // field.width_cells - center[1] + half
    values = field.flat_values[cells] + noise[ys, xs]
    return MeasurementSet(cells, values, robot, step)


def rmse(estimates: Sequence[float], truth: Sequence[float]) -> float:
    a = np.asarray(estimates, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("rmse needs at least one value")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def true_quantiles(field: GridField, q: QuantileSet | Iterable[float]) -> np.ndarray:
    q = q.as_array() if isinstance(q, QuantileSet) else np.asarray(list(q), dtype=float)
    return empirical_quantiles(field.flat_values, q)


# ----------------------------------------------------------------------------
# Field sources
# ----------------------------------------------------------------------------

def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant matrix maps to zeros."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    out = (v - lo) / (hi - lo)
    # pin the extremes exactly; rounding can leave 1 - eps
    out[v == hi] = 1.0
    out[v == lo] = 0.0
    return out


def generate_synthetic(kind: str, width: int, height: int, seed: int,
                       cell_size_m=DEFAULT_CELL_SIZE_M) -> GridField:
    """Seeded synthetic field, normalized to [0, 1].

    ``gaussian_blobs`` sums a handful of random isotropic bumps;
    ``smoothed_noise`` smooths white noise with a separable Gaussian kernel
    (sigma 2 cells).
    """
    if width < 5 or height < 5:
        raise ValueError("synthetic fields need width, height >= 5")
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        n_blobs = int(rng.integers(4, 9))
        ys, xs = np.mgrid[0:height, 0:width].astype(float)
        acc = np.zeros((height, width))
        scale = min(width, height)
        for _ in range(n_blobs):
            cx, cy = rng.uniform(0, width), rng.uniform(0, height)
            s = rng.uniform(0.08, 0.25) * scale
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
        values = acc
    elif kind == "smoothed_noise":
        noise = rng.standard_normal((height, width))
        values = ndimage.gaussian_filter(noise, sigma=2.0, mode="reflect", truncate=3.0)
    else:
        raise ValueError(f"unknown synthetic field kind {kind!r}")
    return GridField(normalize(values), cell_size_m)


def _parse_csv(text: str) -> np.ndarray:
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rows.append([float(c) for c in row])
        except ValueError as exc:
            raise RasterError(f"line {lineno}: cannot parse number ({exc})") from None
        if len(rows[-1]) != len(rows[0]):
            raise RasterError(
                f"line {lineno}: non-rectangular CSV, expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise RasterError("empty raster")
    return np.array(rows, dtype=float)


def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise RasterError(f"offset {pos}: truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def _parse_pgm(data: bytes) -> tuple[np.ndarray, int]:
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise RasterError(f"offset {pos}: bad PGM header fields") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise RasterError(f"offset {pos}: bad PGM dimensions or maxval")
    if magic == b"P2":
        body, _ = _pgm_tokens(data[pos:] + b" ", w * h) if w * h else ([], 0)
        try:
            pix = np.array([int(t) for t in body], dtype=float)
        except ValueError:
            raise RasterError(f"offset {pos}: non-integer pixel in P2 body") from None
    elif magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        if len(data) - pos < need:
            raise RasterError(f"offset {len(data)}: P5 body truncated, need {need} bytes")
        pix = np.frombuffer(data[pos:pos + need], dtype=dtype).astype(float)
    else:
        raise RasterError(f"offset 0: unsupported PGM magic {magic!r}")
    return pix.reshape(h, w), maxval


def load_raster(path, normalize_values: bool = True,
                cell_size_m=DEFAULT_CELL_SIZE_M) -> GridField:
    """Load a CSV matrix or P2/P5 PGM as a :class:`GridField`.

    The first CSV row / first PGM scanline is grid row ``y = 0``. Without
    ``normalize_values``, PGM pixels are divided by maxval and CSV values
    must already lie in [0, 1].
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P2", b"P5"):
        values, maxval = _parse_pgm(raw)
        if not normalize_values:
            values = values / maxval
    else:
        try:
            text = raw.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise RasterError(f"offset {exc.start}: not UTF-8 text") from None
        values = _parse_csv(text)
    if not np.all(np.isfinite(values)):
        raise RasterError("raster contains non-finite values")
    if normalize_values:
        values = normalize(values)
    return GridField(values, cell_size_m)


def save_csv(field: GridField, path) -> None:
    """Write values with ``repr`` floats so :func:`load_raster` round-trips exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for row in field.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
