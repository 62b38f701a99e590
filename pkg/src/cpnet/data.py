"""Dataset loading, benchmark splits, scaling, windowing and synthetic fixtures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import ConfigError, parse_keyvalue, to_float, to_int

# ETT split lengths in steps: 12/4/4 months of 30 days.
ETT_HOUR_SPLITS = (12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24)
ETT_MINUTE_SPLITS = tuple(4 * n for n in ETT_HOUR_SPLITS)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    values: np.ndarray  # [T, N]
    timestamps: list[str]
    columns: list[str]
    granularity: str = "unknown"

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def _granularity(name: str) -> str:
    if name.startswith("ETTh"):
        return "hourly"
    if name.startswith("ETTm"):
        return "15min"
    return "unknown"


def load_csv(path: str | Path) -> Dataset:
    """Read an ETT-style CSV: header row, date column first, numeric variates after."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a date column and at least one variate")
        columns = [h.strip() for h in header[1:]]
        stamps: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for col, cell in zip(columns, row[1:]):
                cell = cell.strip()
                if not cell:
                    raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col!r}: cannot parse {cell!r} as a number") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col!r}: non-finite value {cell!r}")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(path.stem, np.asarray(rows, dtype=np.float64), stamps, columns, _granularity(path.stem))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *dataset.columns])
        for stamp, row in zip(dataset.timestamps, dataset.values):
            w.writerow([stamp, *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class Splits:
    """Row ranges [start, end) per split; val/test starts include ``lookback`` rows of context."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __getitem__(self, key: str) -> tuple[int, int]:
        return getattr(self, key)

    def as_dict(self) -> dict[str, tuple[int, int]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split(dataset: Dataset, lookback: int, horizon: int,
          ratios: Sequence[float] | None = None) -> Splits:
    """Chronological train/val/test split following the standard benchmark loaders."""
    t = dataset.length
    if ratios is None and dataset.name.startswith(("ETTh", "ETTm")):
        n_train, n_val, n_test = ETT_HOUR_SPLITS if dataset.name.startswith("ETTh") else ETT_MINUTE_SPLITS
        if t < n_train + n_val + n_test:
            raise DataError(f"{dataset.name}: {t} rows, but the benchmark split needs {n_train + n_val + n_test}")
        b1 = n_train
        b2 = n_train + n_val
        b3 = b2 + n_test
        result = Splits((0, b1), (b1 - lookback, b2), (b2 - lookback, b3))
    else:
        r_train, _, r_test = ratios or DEFAULT_RATIOS
        n_train = int(t * r_train)
        n_test = int(t * r_test)
        n_val = t - n_train - n_test
        result = Splits((0, n_train), (n_train - lookback, n_train + n_val), (t - n_test - lookback, t))
    for name, (a, b) in result.as_dict().items():
        if a < 0 or b - a < lookback + horizon:
            raise DataError(
                f"{dataset.name}: {name} split [{a}, {b}) is too short for lookback {lookback} + horizon {horizon}"
            )
    return result


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_scaler(train_values: np.ndarray, floor: float = 1e-8) -> Scaler:
    train_values = np.asarray(train_values, dtype=np.float64)
    if train_values.shape[0] == 0:
        raise DataError("cannot fit a scaler on an empty slice")
    return Scaler(train_values.mean(axis=0), np.maximum(train_values.std(axis=0), floor))


def apply_scaler(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    return scaler.transform(x)


def invert_scaler(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    return scaler.inverse(x)


@dataclass
class SeriesWindow:
    x: np.ndarray  # [I, N]
    y: np.ndarray  # [O, N]
    origin: int


@dataclass
class WindowSet:
    """All windows of one split as strided views; ``origins`` are absolute row indices."""

    x: np.ndarray  # [W, I, N]
    y: np.ndarray  # [W, O, N]
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i: i + batch_size]
            yield self.x[idx], self.y[idx]


def window_count(length: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if stride < 1:
        raise DataError("stride must be >= 1")
    if length < lookback + horizon:
        raise DataError(f"split of length {length} is too short for lookback {lookback} + horizon {horizon}")
    return (length - lookback - horizon) // stride + 1


def window_set(values: np.ndarray, span: tuple[int, int], lookback: int, horizon: int,
               stride: int = 1) -> WindowSet:
    start, end = span
    n = window_count(end - start, lookback, horizon, stride)
    seg = values[start:end]
    view = np.lib.stride_tricks.sliding_window_view(seg, lookback + horizon, axis=0)  # [W, N, I+O]
    view = np.swapaxes(view, 1, 2)[: (n - 1) * stride + 1: stride]
    return WindowSet(view[:, :lookback], view[:, lookback:], start + stride * np.arange(n))


def windows(values: np.ndarray, span: tuple[int, int], lookback: int, horizon: int,
            stride: int = 1) -> list[SeriesWindow]:
    ws = window_set(values, span, lookback, horizon, stride)
    return [SeriesWindow(ws.x[i], ws.y[i], int(ws.origins[i])) for i in range(len(ws))]


@dataclass
class PreparedData:
    """Scaled values plus split ranges, ready for training and evaluation."""

    dataset: Dataset
    scaled: np.ndarray
    scaler: Scaler
    splits: Splits
    lookback: int
    horizon: int

    def windows(self, split_name: str, stride: int = 1) -> WindowSet:
        return window_set(self.scaled, self.splits[split_name], self.lookback, self.horizon, stride)


def prepare(dataset: Dataset, lookback: int, horizon: int, ratios: Sequence[float] | None = None) -> PreparedData:
    splits = split(dataset, lookback, horizon, ratios)
    a, b = splits.train
    scaler = fit_scaler(dataset.values[a:b])
    return PreparedData(dataset, scaler.transform(dataset.values), scaler, splits, lookback, horizon)


@dataclass(frozen=True)
class SynthSpec:
    length: int = 4000
    n_vars: int = 1
    components: tuple[tuple[float, float], ...] = ((24.0, 1.0),)
    noise_std: float = 0.0
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.length < 1 or self.n_vars < 1:
            raise DataError("synthetic length and n_vars must be >= 1")
        for period, _ in self.components:
            if period < 2:
                raise DataError(f"synthetic periods must be >= 2, got {period}")

    def to_text(self) -> str:
        comps = ",".join(f"{p!r}:{a!r}" for p, a in self.components)
        return (f"length={self.length}\nn_vars={self.n_vars}\ncomponents={comps}\n"
                f"noise_std={self.noise_std!r}\nseed={self.seed}\nname={self.name}\n")

    @classmethod
    def from_text(cls, text: str, source: str = "<synth>") -> "SynthSpec":
        return cls.from_mapping(parse_keyvalue(text, source))

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "SynthSpec":
        kwargs: dict[str, object] = {}
        for key, value in raw.items():
            if key in ("length", "n_vars", "seed"):
                kwargs[key] = to_int(key, value)
            elif key == "noise_std":
                kwargs[key] = to_float(key, value)
            elif key == "name":
                kwargs[key] = value
            elif key == "components":
                comps = []
                for item in value.split(","):
                    try:
                        p, a = item.split(":")
                        comps.append((float(p), float(a)))
                    except ValueError:
                        raise ConfigError(f"components: bad item {item!r}; expected period:amplitude") from None
                kwargs[key] = tuple(comps)
            else:
                raise ConfigError(f"unknown synthetic key {key!r}")
        return cls(**kwargs)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Sum of seeded-phase sinusoids per channel plus Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    phases = rng.uniform(0.0, 2 * np.pi, size=(spec.n_vars, len(spec.components)))
    values = np.zeros((spec.length, spec.n_vars))
    for c in range(spec.n_vars):
        for k, (period, amp) in enumerate(spec.components):
            values[:, c] += amp * np.sin(2 * np.pi * t / period + phases[c, k])
    if spec.noise_std > 0:
        values += rng.normal(0.0, spec.noise_std, size=values.shape)
    return Dataset(spec.name, values, [str(i) for i in range(spec.length)],
                   [f"v{c}" for c in range(spec.n_vars)], "synthetic")
