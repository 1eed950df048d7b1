"""Series ingestion, windowing, normalization, and a synthetic generator.

Series CSV layout: an optional metadata comment, a header row, then one row
per timestep with N*D value columns in node-major order:

    # steps_per_day=288,start_weekday=0
    n0_f0,n1_f0
    12.0,13.5
    ...

Temporal markers are functions of the absolute step index in the original
series, so chronological splits carry their start offset along.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, ParseError, graph_from_edges, normalize_adjacency
from .model import N_DOW, PositionMarkers


class ColumnCountMismatch(ValueError):
    pass


class TooShort(ValueError):
    pass


class ZeroStd(ValueError):
    pass


@dataclass(frozen=True)
class SeriesDataset:
    """A [T, N, D] series with its calendar alignment.

    start_index is the offset of row 0 in the originating series; splits use
    it so markers stay functions of absolute time.
    """

    values: np.ndarray
    steps_per_day: int = 288
    start_weekday: int = 0
    start_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"values must be [T, N, D], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("series contains non-finite values")
        if self.steps_per_day < 1:
            raise ValueError(f"steps_per_day must be >= 1, got {self.steps_per_day}")
        if not 0 <= self.start_weekday < N_DOW:
            raise ValueError(f"start_weekday must be in [0, 7), got {self.start_weekday}")
        if self.start_index < 0:
            raise ValueError(f"start_index must be >= 0, got {self.start_index}")
        object.__setattr__(self, "values", v)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def marker_arrays(self, local_indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = self.start_index + np.asarray(local_indices, dtype=np.int64)
        tod = idx % self.steps_per_day
        dow = (self.start_weekday + idx // self.steps_per_day) % N_DOW
        return tod, dow


@dataclass(frozen=True)
class WindowSample:
    """History block, future block, and the history's temporal markers."""

    x_h: np.ndarray
    x_f: np.ndarray
    p_h: PositionMarkers


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters fit on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValueError(f"mean/std shapes differ: {mean.shape} vs {std.shape}")
        if np.any(std <= 0):
            raise ZeroStd("std must be positive for every feature")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def zscore_fit(train: SeriesDataset) -> Normalizer:
    v = train.values
    std = v.std(axis=(0, 1))
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        raise ZeroStd(f"constant feature(s) {bad} in the training split")
    return Normalizer(v.mean(axis=(0, 1)), std)


def normalize_dataset(ds: SeriesDataset, norm: Normalizer) -> SeriesDataset:
    return SeriesDataset(norm.apply(ds.values), ds.steps_per_day, ds.start_weekday, ds.start_index)


_METADATA_KEYS = ("steps_per_day", "start_weekday")


def save_series_csv(ds: SeriesDataset, path) -> None:
    t, n, d = ds.values.shape
    header = ",".join(f"n{i}_f{j}" for i in range(n) for j in range(d))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# steps_per_day={ds.steps_per_day},start_weekday={ds.start_weekday}\n")
        fh.write(header + "\n")
        flat = ds.values.reshape(t, n * d)
        for row in flat:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _parse_metadata(line: str) -> tuple[int, int]:
    body = line.lstrip("#").strip()
    fields = {}
    for part in body.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in _METADATA_KEYS:
            raise ParseError(f"unknown metadata key {key!r}")
        try:
            fields[key] = int(value)
        except ValueError as exc:
            raise ParseError(f"bad metadata value for {key!r}: {value!r}") from exc
    if set(fields) != set(_METADATA_KEYS):
        raise ParseError(f"metadata line must set {_METADATA_KEYS}, got {sorted(fields)}")
    return fields["steps_per_day"], fields["start_weekday"]


def load_series_csv(path, n_nodes: int, features: int) -> SeriesDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    pos = 0
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos >= len(lines):
        raise ParseError("series CSV is empty")
    if lines[pos].lstrip().startswith("#"):
        steps_per_day, start_weekday = _parse_metadata(lines[pos])
        pos += 1
    else:
        warnings.warn("series CSV has no metadata line; assuming steps_per_day=288, start_weekday=0")
        steps_per_day, start_weekday = 288, 0
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos >= len(lines):
        raise ParseError("series CSV has no header row")
    pos += 1  # header names are informational only

    want = n_nodes * features
    rows = []
    for row_idx, line in enumerate(lines[pos:], start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != want:
            raise ColumnCountMismatch(
                f"row {row_idx}: expected {want} columns ({n_nodes} nodes x {features} features), "
                f"got {len(cells)}"
            )
        parsed = np.empty(want)
        for col_idx, cell in enumerate(cells):
            try:
                parsed[col_idx] = float(cell)
            except ValueError as exc:
                raise ParseError(f"row {row_idx}, column {col_idx + 1}: not a number: {cell!r}") from exc
        rows.append(parsed)
    if not rows:
        raise ParseError("series CSV has no data rows")
    values = np.stack(rows).reshape(len(rows), n_nodes, features)
    return SeriesDataset(values, steps_per_day, start_weekday)


def split(ds: SeriesDataset, ratios: tuple[int, int, int] = (6, 2, 2)):
    """Chronological train/val/test split; parts concatenate back to ds."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positives, got {ratios}")
    t = ds.n_steps
    total = sum(ratios)
    n_train = t * ratios[0] // total
    n_val = t * ratios[1] // total
    n_test = t - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise TooShort(f"series of {t} steps cannot be split {ratios[0]}:{ratios[1]}:{ratios[2]}")
    bounds = [0, n_train, n_train + n_val, t]
    parts = []
    for lo, hi in zip(bounds, bounds[1:]):
        parts.append(
            SeriesDataset(ds.values[lo:hi], ds.steps_per_day, ds.start_weekday, ds.start_index + lo)
        )
    return tuple(parts)


def make_windows(ds: SeriesDataset, history_len: int, horizon: int) -> list[WindowSample]:
    """Stride-1 sliding windows with markers from absolute step indices."""
    if history_len < 1 or horizon < 1:
        raise ValueError("history_len and horizon must be >= 1")
    span = history_len + horizon
    if ds.n_steps < span:
        raise TooShort(f"split of {ds.n_steps} steps is shorter than L+H={span}")
    windows = []
    for start in range(ds.n_steps - span + 1):
        hist = np.arange(start, start + history_len)
        tod, dow = ds.marker_arrays(hist)
        windows.append(
            WindowSample(
                x_h=ds.values[start : start + history_len],
                x_f=ds.values[start + history_len : start + span],
                p_h=PositionMarkers(tod, dow),
            )
        )
    return windows


def ring_with_chords(n_nodes: int) -> Graph:
    """Ring of unit edges plus weight-0.5 chords from every third node."""
    if n_nodes < 2:
        raise ValueError(f"need at least 2 nodes, got {n_nodes}")
    edges = [(i, (i + 1) % n_nodes, 1.0) for i in range(n_nodes)] if n_nodes > 2 else [(0, 1, 1.0)]
    if n_nodes >= 6:
        hop = n_nodes // 3
        for i in range(0, n_nodes, 3):
            j = (i + hop) % n_nodes
            if j != i:
                edges.append((i, j, 0.5))
    return graph_from_edges(n_nodes, edges)


def synth_generate(n_nodes: int, n_steps: int, seed: int, graph: Graph | None = None,
                   steps_per_day: int = 288) -> tuple[SeriesDataset, Graph]:
    """Daily sinusoid per node plus graph-diffused AR(1) noise.

    signal_i(t) = amp(t) * sin(2*pi*(t/steps_per_day + i/N)) with a weekly
    amplitude swing; residual r_{t+1} = 0.9 * A_hat r_t + eps keeps neighbors
    correlated. Deterministic per seed.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    g = graph if graph is not None else ring_with_chords(n_nodes)
    if g.n_nodes != n_nodes:
        raise ValueError(f"graph has {g.n_nodes} nodes, requested {n_nodes}")
    a_norm = normalize_adjacency(g)
    rng = np.random.default_rng(seed)

    t_idx = np.arange(n_steps)
    phase = np.arange(n_nodes) / n_nodes
    amp = 1.0 + 0.3 * np.sin(2 * np.pi * t_idx / (7 * steps_per_day))
    daily = np.sin(2 * np.pi * (t_idx[:, None] / steps_per_day + phase[None, :]))
    signal = amp[:, None] * daily

    eps_scale = 0.2
    resid = np.zeros((n_steps, n_nodes))
    r = rng.standard_normal(n_nodes) * eps_scale
    for t in range(n_steps):
        resid[t] = r
        r = 0.9 * (a_norm @ r) + rng.standard_normal(n_nodes) * eps_scale

    values = (signal + resid)[:, :, None]
    return SeriesDataset(values, steps_per_day=steps_per_day, start_weekday=0), g
