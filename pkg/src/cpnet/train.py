"""Training loop, metrics, experiment sweeps and report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import engine as E
from .data import Dataset, PreparedData, WindowSet, prepare
from .engine import Graph, Tensor
from .model import (
    ABLATION_VARIANTS,
    BranchConfig,
    CPNet,
    ModelConfig,
    apply_ablation,
    instance_normalize,
)
from .nn import AdamState, adam_step, clip_grad_norm, mse_loss

log = logging.getLogger(__name__)

BRANCH_POOL = (BranchConfig(4, 2), BranchConfig(8, 4), BranchConfig(16, 8), BranchConfig(24, 12))


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 42
    grad_clip: float = 0.0
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # multiplicative, applied after every epoch
    raw_scale: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.lr < 0 or self.grad_clip < 0 or self.weight_decay < 0:
            raise ValueError("lr, grad_clip and weight_decay must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    n_points: int


def compute_metrics(pred: np.ndarray, target: np.ndarray) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise E.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ValueError("no points to evaluate")
    diff = pred - target
    return Metrics(float(np.mean(diff * diff)), float(np.mean(np.abs(diff))), int(diff.size))


@dataclass
class RunReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    test: Metrics | None = None
    val: Metrics | None = None
    param_count: int = 0
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        out = {
            "config": self.config,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "param_count": self.param_count,
            "val": dataclasses.asdict(self.val) if self.val else None,
            "test": dataclasses.asdict(self.test) if self.test else None,
        }
        if timings:
            out["timings"] = self.timings
        return out


def predict(model: Callable, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Run ``model`` over [W, I, N] windows in batches; returns [W, O, N]."""
    outs = []
    for i in range(0, len(x), batch_size):
        y = model(np.asarray(x[i: i + batch_size]))
        outs.append(y.data if isinstance(y, Tensor) else np.asarray(y))
    return np.concatenate(outs, axis=0)


def evaluate(model: Callable, data: PreparedData, split: str = "test", raw_scale: bool = False,
             batch_size: int = 256) -> Metrics:
    """MSE/MAE over every window of ``split`` at stride 1, standardized scale by default."""
    ws = data.windows(split)
    if len(ws) == 0:
        raise ValueError(f"split {split!r} has no windows")
    pred = predict(model, ws.x, batch_size)
    target = np.asarray(ws.y)
    if raw_scale:
        pred = data.scaler.inverse(pred)
        target = data.scaler.inverse(target)
    return compute_metrics(pred, target)


def _train_epoch(model: CPNet, ws: WindowSet, cfg: TrainConfig, state: AdamState,
                 rng: np.random.Generator) -> float:
    params = model.parameters()
    total, count = 0.0, 0
    for step, (xb, yb) in enumerate(ws.batches(cfg.batch_size, rng)):
        x_norm, stats = instance_normalize(xb)
        y_norm = (yb - stats.mean[:, None, :]) / stats.std[:, None, :]
        drop_rng = rng if model.config.dropout > 0 else None
        with Graph() as g:
            loss = mse_loss(model.forward_normalized(x_norm, drop_rng), y_norm)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {state.step + 1} (batch {step})")
        g.backward(loss)
        grads = [p.grad for p in params]
        if cfg.grad_clip > 0:
            clip_grad_norm(grads, cfg.grad_clip)
        adam_step(params, grads, state)
        total += value * len(xb)
        count += len(xb)
    return total / count


def train(model: CPNet, data: PreparedData, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[CPNet, RunReport]:
    """Adam on normalized-domain MSE with early stopping on validation MSE.

    The parameters with the best validation MSE are restored before returning.
    """
    train_ws = data.windows("train")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = RunReport(config=run_config(model.config, cfg, data), param_count=model.num_parameters())

    best_val = math.inf
    best_state = model.state_dict()
    stale = 0
    t_start = time.perf_counter()
    epoch_seconds = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss = _train_epoch(model, train_ws, cfg, state, rng)
        epoch_seconds.append(time.perf_counter() - t0)
        val = evaluate(model, data, "val", raw_scale=cfg.raw_scale)
        row = {"epoch": epoch, "train_loss": train_loss, "val_mse": val.mse, "val_mae": val.mae, "lr": state.lr}
        report.epochs.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val.mse)
        if val.mse < best_val:
            best_val = val.mse
            best_state = model.state_dict()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        state.lr *= cfg.lr_decay

    model.load_state_dict(best_state)
    report.val = evaluate(model, data, "val", raw_scale=cfg.raw_scale)
    report.test = evaluate(model, data, "test", raw_scale=cfg.raw_scale)
    report.timings = {
        "total_seconds": time.perf_counter() - t_start,
        "seconds_per_epoch": float(np.mean(epoch_seconds)),
    }
    return model, report


def run_config(model_cfg: ModelConfig, train_cfg: TrainConfig, data: PreparedData | None = None) -> dict:
    out = {
        "model": {
            "lookback": model_cfg.lookback,
            "horizon": model_cfg.horizon,
            "branches": ",".join(str(b) for b in model_cfg.branches),
            "embed_channels": model_cfg.embed_channels,
            "hidden": model_cfg.hidden,
            "dilated_kernel": model_cfg.dilated_kernel,
            "ablate_tp": model_cfg.ablate_tp,
            "ablate_cs": model_cfg.ablate_cs,
            "dropout": model_cfg.dropout,
        },
        "train": dataclasses.asdict(train_cfg),
    }
    if data is not None:
        out["data"] = {"name": data.dataset.name, "rows": data.dataset.length, "n_vars": data.dataset.n_vars,
                       "splits": {k: list(v) for k, v in data.splits.as_dict().items()}}
    return out


def fit(model_cfg: ModelConfig, data: PreparedData, train_cfg: TrainConfig) -> tuple[CPNet, RunReport]:
    """Build a model seeded from ``train_cfg.seed`` and train it."""
    return train(CPNet(model_cfg, seed=train_cfg.seed), data, train_cfg)


def run_ablation(data: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 variants: Sequence[str] = ABLATION_VARIANTS) -> list[dict]:
    """Train each ablation variant with identical seeds; report test metrics and deltas vs full."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}")
    rows = []
    for v in variants:
        _, rep = fit(apply_ablation(model_cfg, v), data, train_cfg)
        rows.append({"variant": v, "mse": rep.test.mse, "mae": rep.test.mae,
                     "best_epoch": rep.best_epoch, "param_count": rep.param_count})
    full = next((r for r in rows if r["variant"] == "full"), None)
    for r in rows:
        r["delta_mse"] = r["mse"] - full["mse"] if full else None
        r["delta_mae"] = r["mae"] - full["mae"] if full else None
    return rows


def sweep_lookback(dataset: Dataset, lookbacks: Sequence[int], model_cfg: ModelConfig,
                   train_cfg: TrainConfig, horizon: int = 96, ratios=None) -> list[dict]:
    rows = []
    for lookback in lookbacks:
        cfg = dataclasses.replace(model_cfg, lookback=lookback, horizon=horizon)
        data = prepare(dataset, lookback, horizon, ratios)
        _, rep = fit(cfg, data, train_cfg)
        rows.append({"lookback": lookback, "mse": rep.test.mse, "mae": rep.test.mae,
                     "seconds_per_epoch": rep.timings["seconds_per_epoch"]})
    return rows


def branch_ladder(n: int, pool: Sequence[BranchConfig] = BRANCH_POOL) -> tuple[BranchConfig, ...]:
    if not 1 <= n <= len(pool):
        raise ValueError(f"branch count {n} outside 1..{len(pool)}")
    return tuple(pool[:n])


def sweep_branches(data: PreparedData, counts: Sequence[int], model_cfg: ModelConfig,
                   train_cfg: TrainConfig, pool: Sequence[BranchConfig] = BRANCH_POOL) -> list[dict]:
    rows = []
    prev = None
    for n in counts:
        cfg = dataclasses.replace(model_cfg, branches=branch_ladder(n, pool))
        _, rep = fit(cfg, data, train_cfg)
        rows.append({"branches": n, "mse": rep.test.mse, "mae": rep.test.mae,
                     "gain_mse": None if prev is None else prev - rep.test.mse})
        prev = rep.test.mse
    return rows


@dataclass
class BenchReport:
    rows: list[dict]
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def benchmark_runtime(lookbacks: Sequence[int], model_cfg: ModelConfig, batch_size: int = 32,
                      n_vars: int = 7, steps: int = 20, warmup: int = 3, horizon: int = 96,
                      train_windows: int | None = None, seed: int = 0) -> BenchReport:
    """Median wall time of one optimizer step and of one inference pass per look-back length.

    ``epoch_seconds`` extrapolates the step time to ``train_windows`` windows
    (default: the hourly ETT training split for that look-back).
    """
    rows = []
    for lookback in lookbacks:
        cfg = dataclasses.replace(model_cfg, lookback=lookback, horizon=horizon)
        model = CPNet(cfg, seed=seed)
        params = model.parameters()
        state = AdamState()
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch_size, lookback, n_vars))
        y = rng.standard_normal((batch_size, horizon, n_vars))
        step_times, infer_times = [], []
        for i in range(warmup + steps):
            t0 = time.perf_counter()
            with Graph() as g:
                loss = mse_loss(model.forward_normalized(Tensor(x)), y)
            g.backward(loss)
            adam_step(params, [p.grad for p in params], state)
            t1 = time.perf_counter()
            model(x)
            t2 = time.perf_counter()
            if i >= warmup:
                step_times.append(t1 - t0)
                infer_times.append(t2 - t1)
        n_windows = train_windows if train_windows is not None else 8640 - lookback - horizon + 1
        step = float(np.median(step_times))
        rows.append({
            "lookback": lookback,
            "step_seconds": step,
            "step_seconds_std": float(np.std(step_times)),
            "infer_seconds": float(np.median(infer_times)),
            "epoch_seconds": step * math.ceil(n_windows / batch_size),
            "param_count": model.num_parameters(),
        })
    report = BenchReport(rows)
    if len(rows) >= 2:
        report.slope, report.intercept, report.r2 = linear_fit(
            [r["lookback"] for r in rows], [r["step_seconds"] for r in rows])
    return report


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def rows_to_csv(rows: Iterable[dict]) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def emit_report(report, path: str | Path, fmt: str | None = None) -> Path:
    """Write a report as JSON (``.json``) or a long-format CSV table (``.csv``).

    ``report`` is a :class:`RunReport`, a :class:`BenchReport`, a list of row
    dicts, or a plain dict. Timings of a RunReport are left out so that the
    file is reproducible; write them separately if needed.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".") or "json"
    if isinstance(report, RunReport):
        payload = report.to_dict(timings=False)
        rows = [report.epochs[i] for i in range(len(report.epochs))]
    elif isinstance(report, BenchReport):
        payload = {"rows": report.rows, "slope": report.slope, "intercept": report.intercept, "r2": report.r2}
        rows = report.rows
    elif isinstance(report, list):
        payload = {"rows": report}
        rows = report
    else:
        payload = report
        rows = [report]
    if fmt == "json":
        text = dumps_json(payload)
    elif fmt == "csv":
        text = rows_to_csv(rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror}") from None
    return path


def load_report(path: str | Path):
    """Parse a report written by :func:`emit_report` (CSV cells come back as int/float/str)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(text))]
    return json.loads(text)


def _parse_cell(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
