"""Flow ingestion, z-score normalization, windowing, and synthetic generation.

Flow files are CSVs with one time step per row (optional leading ``t``
index column). Missing or zero sentinel cells are linearly interpolated
per sensor. Windows slide with stride 1 and are split chronologically
by the index of their last target step, so no window assigned to an
earlier split ever reads values from a later split's targets.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import roadnet
from .errors import DataError

__all__ = [
    "FlowSeries",
    "Scaler",
    "WindowedDataset",
    "PlantedCoupling",
    "load_flows",
    "fit_scaler",
    "make_windows",
    "synth_generate",
]

STD_FLOOR = 1e-8


@dataclass
class FlowSeries:
    """Raw flow tensor, shape (T_total, N, F) with F = 1."""

    values: np.ndarray
    interval_minutes: int = 5

    @property
    def num_steps(self):
        return self.values.shape[0]

    @property
    def num_nodes(self):
        return self.values.shape[1]


@dataclass
class Scaler:
    """Z-score statistics; shapes broadcast against (..., N, F) arrays."""

    mean: np.ndarray
    std: np.ndarray
    scope: str = "per_sensor"

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean


@dataclass
class WindowedDataset:
    """Stacked (input, target) windows in raw units for one split."""

    inputs: np.ndarray  # (M, T_in, N, F)
    targets: np.ndarray  # (M, T_out, N, F)
    anchors: np.ndarray  # (M,) index of the last input step in the source series
    split: str

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class PlantedCoupling:
    """Ground-truth lag-1 dependencies injected by the synthetic generator."""

    pairs: list  # directed (upstream, downstream) pairs
    coeff_by_step: np.ndarray  # (T_total,) coupling coefficient active at each step

    def records(self):
        """(t, from, to, coeff) rows for every step with active coupling."""
        rows = []
        for t, c in enumerate(self.coeff_by_step):
            if c != 0.0:
                for u, v in self.pairs:
                    rows.append((t, u, v, float(c)))
        return rows

    def active_pairs(self):
        """Pairs that carry nonzero coupling at any step."""
        if np.any(self.coeff_by_step != 0.0):
            return list(self.pairs)
        return []


def _interpolate_missing(values):
    """Linear per-sensor interpolation of NaN/zero sentinel cells, in place."""
    t_total, n, _ = values.shape
    idx = np.arange(t_total)
    for s in range(n):
        col = values[:, s, 0]
        bad = ~np.isfinite(col) | (col == 0.0)
        if not bad.any():
            continue
        good = ~bad
        if good.sum() == 0:
            warnings.warn(f"sensor {s}: no valid samples, filled with zeros")
            col[:] = 0.0
            continue
        col[bad] = np.interp(idx[bad], idx[good], col[good])
    return values


def load_flows(path, num_nodes, impute=True):
    """Parse a flow CSV into a FlowSeries of shape (T, N, 1)."""
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"load_flows: cannot open {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            head = row[0].strip()
            if lineno == 1 and not _is_number(head):
                width = len(row)
                continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise DataError(f"load_flows: line {lineno}: ragged row ({len(row)} vs {width} columns)")
            try:
                vals = [float(c) if c.strip() else np.nan for c in row]
            except ValueError:
                raise DataError(f"load_flows: line {lineno}: non-numeric cell") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"load_flows: {path} holds no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] == num_nodes + 1:
        arr = arr[:, 1:]  # leading time-index column
    if arr.shape[1] != num_nodes:
        raise DataError(
            f"load_flows: expected {num_nodes} sensor columns (+1 optional index), got {arr.shape[1]}"
        )
    values = arr[:, :, None]
    if impute:
        values = _interpolate_missing(values)
    return FlowSeries(values=values)


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def fit_scaler(train_values, scope="per_sensor"):
    """Population-moment z-score statistics from the train portion only."""
    if scope == "per_sensor":
        mean = train_values.mean(axis=0, keepdims=False)  # (N, F)
        std = train_values.std(axis=0, keepdims=False)
    elif scope == "global":
        mean = np.full((1, 1), train_values.mean())
        std = np.full((1, 1), train_values.std())
    else:
        raise DataError(f"fit_scaler: unknown scope {scope!r}")
    if np.any(std <= STD_FLOOR):
        warnings.warn("fit_scaler: zero-variance sensor column, flooring std at 1e-8")
        std = np.maximum(std, STD_FLOOR)
    return Scaler(mean=mean, std=std, scope=scope)


def split_boundaries(t_total, ratios=(0.6, 0.2, 0.2)):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    b1 = int(np.floor(ratios[0] * t_total))
    b2 = int(np.floor((ratios[0] + ratios[1]) * t_total))
    return b1, b2


def make_windows(series, t_in=12, t_out=12, ratios=(0.6, 0.2, 0.2)):
    """Stride-1 sliding windows split chronologically into train/val/test.

    A window starting at s consumes inputs [s, s+t_in) and targets
    [s+t_in, s+t_in+t_out); it belongs to the split containing its final
    target index. Total window count is T_total - (t_in + t_out) + 1.
    """
    values = series.values
    t_total = values.shape[0]
    if t_total < t_in + t_out:
        raise DataError(f"make_windows: series length {t_total} < t_in + t_out = {t_in + t_out}")
    b1, b2 = split_boundaries(t_total, ratios)

    buckets = {"train": [], "val": [], "test": []}
    n_starts = t_total - (t_in + t_out) + 1
    for s in range(n_starts):
        end = s + t_in + t_out - 1
        split = "train" if end < b1 else ("val" if end < b2 else "test")
        buckets[split].append(s)

    out = []
    for split in ("train", "val", "test"):
        starts = np.asarray(buckets[split], dtype=np.int64)
        if starts.size:
            inputs = np.stack([values[s : s + t_in] for s in starts])
            targets = np.stack([values[s + t_in : s + t_in + t_out] for s in starts])
        else:
            n, f = values.shape[1], values.shape[2]
            inputs = np.zeros((0, t_in, n, f))
            targets = np.zeros((0, t_out, n, f))
        out.append(
            WindowedDataset(inputs=inputs, targets=targets, anchors=starts + t_in - 1, split=split)
        )
    return tuple(out)


def _upstream_map(topology, n):
    """Directed edges plus the single upstream feeder per node (or None)."""
    if topology == "chain":
        edges = [(i, i + 1) for i in range(n - 1)]
        upstream = [None] + list(range(n - 1))
    elif topology == "ring":
        edges = [(i, (i + 1) % n) for i in range(n)]
        upstream = [(i - 1) % n for i in range(n)]
    elif topology == "grid":
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise DataError(f"synth_generate: grid topology needs a square node count, got {n}")
        edges = []
        upstream = [None] * n
        for r in range(side):
            for c in range(side):
                u = r * side + c
                if c + 1 < side:
                    edges.append((u, u + 1))
                if r + 1 < side:
                    edges.append((u, u + side))
                if c > 0:
                    upstream[u] = u - 1
                elif r > 0:
                    upstream[u] = u - side
    else:
        raise DataError(f"synth_generate: unknown topology {topology!r}")
    return edges, upstream


def synth_generate(
    n,
    t_total,
    topology="chain",
    regime_switch_period=48,
    noise_std=0.05,
    seed=0,
    period=288,
    coupling_a=0.8,
    coupling_b=0.0,
    amplitude=20.0,
    offset=50.0,
):
    """Synthetic flows: daily sinusoid + regime-switching lag-1 coupling + noise.

    Each sensor carries a sinusoid with its own phase and amplitude. On top
    rides a deviation process dev_i(t) = c(t) * dev_up(i)(t-1) + noise, where
    the coefficient c alternates between ``coupling_a`` and ``coupling_b``
    every ``regime_switch_period`` steps. Fixed seed gives bitwise identical
    output.
    """
    if n < 4:
        raise DataError(f"synth_generate: need at least 4 nodes, got {n}")
    rng = np.random.default_rng(seed)
    edges, upstream = _upstream_map(topology, n)
    net = roadnet.build_asp(edges, n)

    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    amps = amplitude * rng.uniform(0.5, 1.0, size=n)

    steps = np.arange(t_total)
    regime_a = (steps // max(1, regime_switch_period)) % 2 == 0
    coeff = np.where(regime_a, coupling_a, coupling_b)

    base = offset + amps[None, :] * np.sin(2.0 * np.pi * steps[:, None] / period + phases[None, :])

    noise = rng.normal(0.0, noise_std, size=(t_total, n)) if noise_std > 0 else np.zeros((t_total, n))
    dev = np.zeros((t_total, n))
    dev[0] = noise[0]
    for t in range(1, t_total):
        dev[t] = noise[t]
        c = coeff[t]
        if c != 0.0:
            for v in range(n):
                u = upstream[v]
                if u is not None:
                    dev[t, v] += c * dev[t - 1, u]

    flows = (base + dev)[:, :, None]
    pairs = [(u, v) for v, u in enumerate(upstream) if u is not None]
    planted = PlantedCoupling(pairs=pairs, coeff_by_step=coeff.astype(np.float64))
    return net, FlowSeries(values=flows), planted
