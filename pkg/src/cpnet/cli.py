"""Command-line entry point: ``cpnet <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .config import ConfigError, format_keyvalue, read_keyvalue, to_bool, to_float, to_int
from .data import DataError, PreparedData, SynthSpec, load_csv, prepare, synth_generate, write_csv
from .model import ABLATION_VARIANTS, CPNet, ModelConfig, format_branches, parse_branches
from .nn import load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    benchmark_runtime,
    dumps_json,
    emit_report,
    evaluate,
    fit,
    run_ablation,
    sweep_branches,
    sweep_lookback,
)

log = logging.getLogger("cpnet")

COMMANDS = ("train", "eval", "ablate", "sweep-lookback", "sweep-branches", "bench", "synth")
NEEDS_DATASET = ("train", "eval", "ablate", "sweep-lookback", "sweep-branches")
SENTINEL = "INCOMPLETE"


def _opt_str(key: str, value: str) -> str | None:
    return value or None


def _str_list(key: str, value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _int_list(key: str, value: str) -> tuple[int, ...]:
    return tuple(to_int(key, v.strip()) for v in value.split(",") if v.strip())


def _float_list(key: str, value: str) -> tuple[float, ...] | None:
    if not value:
        return None
    return tuple(to_float(key, v.strip()) for v in value.split(",") if v.strip())


def _branches(key: str, value: str):
    try:
        return parse_branches(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


_MD = ModelConfig()
_TD = TrainConfig()

# key -> (parser, default, help)
KEYS: dict[str, tuple[Callable, object, str]] = {
    "dataset": (_opt_str, None, "CSV file (date column first)"),
    "synth": (_opt_str, None, "synthetic key=value spec used instead of a CSV"),
    "ratios": (_float_list, None, "train,val,test ratios for non-ETT data"),
    "output": (lambda key, value: value, "runs", "output directory"),
    "checkpoint": (_opt_str, None, "checkpoint to evaluate (eval)"),
    "lookback": (to_int, _MD.lookback, "look-back length I"),
    "horizon": (to_int, _MD.horizon, "forecast horizon O"),
    "branches": (_branches, _MD.branches, "branch list TL:SR,..."),
    "embed_channels": (to_int, _MD.embed_channels, "token conv channels E"),
    "hidden": (to_int, _MD.hidden, "MLP hidden width"),
    "dilated_kernel": (to_int, _MD.dilated_kernel, "dilated conv kernel (odd)"),
    "ablate_tp": (to_bool, _MD.ablate_tp, "flag recorded with the architecture"),
    "ablate_cs": (to_bool, _MD.ablate_cs, "flag recorded with the architecture"),
    "dropout": (to_float, _MD.dropout, "dropout inside MLPs"),
    "lr": (to_float, _TD.lr, "Adam learning rate"),
    "batch_size": (to_int, _TD.batch_size, "windows per step"),
    "max_epochs": (to_int, _TD.max_epochs, "epoch budget"),
    "patience": (to_int, _TD.patience, "early-stopping patience"),
    "seed": (to_int, _TD.seed, "seed for init, shuffling, dropout"),
    "grad_clip": (to_float, _TD.grad_clip, "max global grad norm (0 = off)"),
    "weight_decay": (to_float, _TD.weight_decay, "L2 added to gradients"),
    "lr_decay": (to_float, _TD.lr_decay, "per-epoch lr multiplier"),
    "raw_scale": (to_bool, _TD.raw_scale, "report metrics on the raw scale"),
    "variants": (_str_list, ABLATION_VARIANTS, "ablation variants"),
    "lookbacks": (_int_list, (48, 96, 192, 336, 720), "look-back sweep values"),
    "branch_counts": (_int_list, (1, 2, 3, 4), "branch-count sweep values"),
    "bench_lookbacks": (_int_list, (96, 192, 384, 768), "benchmark look-back values"),
    "bench_steps": (to_int, 20, "timed steps per look-back"),
    "bench_vars": (to_int, 7, "variates in benchmark batches"),
}


class UsageError(Exception):
    pass


@dataclass
class RunSpec:
    command: str
    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(v["lookback"], v["horizon"], v["branches"], v["embed_channels"], v["hidden"],
                           v["dilated_kernel"], v["ablate_tp"], v["ablate_cs"], v["dropout"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["lr"], v["batch_size"], v["max_epochs"], v["patience"], v["seed"], v["grad_clip"],
                           v["weight_decay"], v["lr_decay"], v["raw_scale"])

    def resolved_text(self) -> str:
        shown = {}
        for key in KEYS:
            v = self.values[key]
            if key == "branches":
                v = format_branches(v)
            elif isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            shown[key] = v
        return f"# cpnet {self.command}\n" + format_keyvalue(shown)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpnet", description="CP-Net forecasting experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="key=value config file; flags override its keys")
        for key, (_, default, help_) in KEYS.items():
            flags = ["--" + key.replace("_", "-")]
            if key != key.replace("_", "-"):
                flags.append("--" + key)
            p.add_argument(*dict.fromkeys(flags), dest=key, default=None, metavar="VALUE", help=help_)
    return parser


def parse_cli(argv: list[str] | None = None) -> RunSpec:
    """Resolve defaults < config file < flags. Raises UsageError on bad input."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise UsageError("invalid command line (see --help)") from exc
    raw: dict[str, str] = {}
    if ns.config:
        file_values = read_keyvalue(ns.config)
        unknown = sorted(set(file_values) - set(KEYS))
        if unknown:
            raise ConfigError(f"{ns.config}: unknown key(s) {', '.join(unknown)}")
        raw.update(file_values)
    for key in KEYS:
        flag = getattr(ns, key)
        if flag is not None:
            raw[key] = flag
    values = {key: default for key, (_, default, _) in KEYS.items()}
    for key, text in raw.items():
        values[key] = KEYS[key][0](key, text)
    spec = RunSpec(ns.command, values)
    if spec.command in NEEDS_DATASET and not (values["dataset"] or values["synth"]):
        raise UsageError(f"{spec.command}: no dataset given; pass --dataset FILE.csv or --synth SPEC")
    if spec.command == "synth" and not values["synth"]:
        raise UsageError("synth: pass --synth SPEC (key=value file)")
    if spec.command == "eval" and not values["checkpoint"]:
        raise UsageError("eval: pass --checkpoint FILE")
    for v in values["variants"]:
        if v not in ABLATION_VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    try:
        spec.model_config()
        spec.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def _load_dataset(spec: RunSpec):
    if spec["dataset"]:
        return load_csv(spec["dataset"])
    return synth_generate(SynthSpec.from_text(Path(spec["synth"]).read_text(), spec["synth"]))


def _prepared(spec: RunSpec, dataset=None, lookback=None) -> PreparedData:
    dataset = dataset if dataset is not None else _load_dataset(spec)
    lookback = lookback or spec["lookback"]
    return prepare(dataset, lookback, spec["horizon"], spec["ratios"])


def save_model(model: CPNet, stem: Path) -> None:
    save_checkpoint(stem.with_suffix(".cpnt"), list(model.state_dict().items()))
    stem.with_suffix(".arch").write_text(model.config.to_text())


def load_model(checkpoint: str | Path) -> CPNet:
    checkpoint = Path(checkpoint)
    cfg = ModelConfig.from_text(checkpoint.with_suffix(".arch").read_text())
    model = CPNet(cfg)
    model.load_state_dict(dict(load_checkpoint(checkpoint)))
    return model


def _run(spec: RunSpec, out: Path) -> None:
    cmd = spec.command
    mcfg, tcfg = spec.model_config(), spec.train_config()
    if cmd == "train":
        data = _prepared(spec)
        model, report = fit(mcfg, data, tcfg)
        emit_report(report, out / "report.json")
        emit_report(report, out / "epochs.csv")
        (out / "timings.json").write_text(dumps_json(report.timings))
        save_model(model, out / "model")
        print(f"test mse={report.test.mse:.6f} mae={report.test.mae:.6f} (best epoch {report.best_epoch})")
    elif cmd == "eval":
        model = load_model(spec["checkpoint"])
        data = prepare(_load_dataset(spec), model.config.lookback, model.config.horizon, spec["ratios"])
        metrics = evaluate(model, data, "test", raw_scale=spec["raw_scale"])
        emit_report(dataclasses.asdict(metrics), out / "eval.json")
        print(f"test mse={metrics.mse:.6f} mae={metrics.mae:.6f}")
    elif cmd == "ablate":
        rows = run_ablation(_prepared(spec), mcfg, tcfg, spec["variants"])
        emit_report(rows, out / "ablation.csv")
        emit_report(rows, out / "ablation.json")
        for r in rows:
            print(f"{r['variant']:>9} mse={r['mse']:.6f} mae={r['mae']:.6f}")
    elif cmd == "sweep-lookback":
        rows = sweep_lookback(_load_dataset(spec), spec["lookbacks"], mcfg, tcfg, spec["horizon"], spec["ratios"])
        emit_report(rows, out / "lookback.csv")
    elif cmd == "sweep-branches":
        rows = sweep_branches(_prepared(spec), spec["branch_counts"], mcfg, tcfg)
        emit_report(rows, out / "branches.csv")
    elif cmd == "bench":
        report = benchmark_runtime(spec["bench_lookbacks"], mcfg, batch_size=tcfg.batch_size,
                                   n_vars=spec["bench_vars"], steps=spec["bench_steps"],
                                   horizon=spec["horizon"], seed=tcfg.seed)
        emit_report(report, out / "bench.csv")
        emit_report(report, out / "bench.json")
        print(f"slope={report.slope:.3e} s/step per lookback step, r2={report.r2:.4f}")
    elif cmd == "synth":
        synth = SynthSpec.from_text(Path(spec["synth"]).read_text(), spec["synth"])
        write_csv(synth_generate(synth), out / f"{synth.name}.csv")
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown command {cmd}")


def _thread_limit():
    n = os.environ.get("CPNET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(spec: RunSpec) -> int:
    out = Path(spec["output"])
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.write_text(f"cpnet {spec.command} did not finish\n")
    (out / "resolved.conf").write_text(spec.resolved_text())
    try:
        with _thread_limit():
            _run(spec, out)
    except (ConfigError, DataError, OSError, ValueError, ArithmeticError) as exc:
        print(f"cpnet {spec.command}: error: {exc}", file=sys.stderr)
        return 1
    sentinel.unlink()
    return 0


def cli(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = parse_cli(argv)
    except (UsageError, ConfigError) as exc:
        if not isinstance(exc.__cause__, SystemExit):
            print(f"cpnet: error: {exc}", file=sys.stderr)
        return 2
    return main(spec)


if __name__ == "__main__":
    sys.exit(cli())
