"""CP-Net: token projection, contextual sampling, per-branch predictors, multi-scale merge."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .nn import MLP2, Conv1d, Conv2d1x1, EquispacedConv1d, Module

EPS_NORM = 1e-5

ABLATION_VARIANTS = ("full", "no_tp", "no_cs", "no_tp_cs")


@dataclass(frozen=True)
class BranchConfig:
    token_length: int
    sampling_rate: int

    def __post_init__(self):
        if self.token_length < 1 or self.sampling_rate < 1:
            raise ValueError(f"token_length and sampling_rate must be >= 1, got {self}")

    def __str__(self) -> str:
        return f"{self.token_length}:{self.sampling_rate}"


DEFAULT_BRANCHES = (BranchConfig(4, 2), BranchConfig(8, 4), BranchConfig(16, 8))


def parse_branches(text: str) -> tuple[BranchConfig, ...]:
    """Parse ``"4:2,8:4"`` into branch configs."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            tl, sr = item.split(":")
            out.append(BranchConfig(int(tl), int(sr)))
        except ValueError:
            raise ValueError(f"bad branch {item!r}; expected TL:SR, e.g. 4:2") from None
    if not out:
        raise ValueError("branch list is empty")
    return tuple(out)


def format_branches(branches: Sequence[BranchConfig]) -> str:
    return ",".join(str(b) for b in branches)


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 96
    horizon: int = 96
    branches: tuple[BranchConfig, ...] = DEFAULT_BRANCHES
    embed_channels: int = 1
    hidden: int = 256
    dilated_kernel: int = 3
    ablate_tp: bool = False
    ablate_cs: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.lookback < 1 or self.horizon < 1:
            raise ValueError("lookback and horizon must be >= 1")
        if not self.branches:
            raise ValueError("at least one branch is required")
        if self.dilated_kernel < 1 or self.dilated_kernel % 2 == 0:
            raise ValueError(f"dilated_kernel must be odd and >= 1, got {self.dilated_kernel}")
        if not 1 <= self.embed_channels <= 32:
            raise ValueError("embed_channels must be in [1, 32]")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for b in self.branches:
            if b.token_length > self.lookback:
                raise ValueError(f"token length {b.token_length} exceeds lookback {self.lookback}")

    @property
    def total_len(self) -> int:
        return self.lookback + self.horizon

    def sampled_len(self, branch: BranchConfig) -> int:
        """Length M of the down-sampled representation for ``branch``."""
        return -(-self.total_len // branch.sampling_rate)

    def to_text(self) -> str:
        """key=value architecture header stored next to checkpoints."""
        lines = [
            f"lookback={self.lookback}",
            f"horizon={self.horizon}",
            f"branches={format_branches(self.branches)}",
            f"embed_channels={self.embed_channels}",
            f"hidden={self.hidden}",
            f"dilated_kernel={self.dilated_kernel}",
            f"ablate_tp={str(self.ablate_tp).lower()}",
            f"ablate_cs={str(self.ablate_cs).lower()}",
            f"dropout={self.dropout!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        from .config import parse_keyvalue, coerce_model_fields

        return cls(**coerce_model_fields(parse_keyvalue(text)))


def apply_ablation(config: ModelConfig, variant: str) -> ModelConfig:
    """Return ``config`` with the coarsening of the named variant removed.

    ``no_tp`` sets every token length to 1; ``no_cs`` sets every sampling rate
    and the dilated kernel to 1; ``no_tp_cs`` does both.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    cfg = config
    if variant in ("no_tp", "no_tp_cs"):
        cfg = dataclasses.replace(
            cfg, ablate_tp=True,
            branches=tuple(BranchConfig(1, b.sampling_rate) for b in cfg.branches),
        )
    if variant in ("no_cs", "no_tp_cs"):
        cfg = dataclasses.replace(
            cfg, ablate_cs=True, dilated_kernel=1,
            branches=tuple(BranchConfig(b.token_length, 1) for b in cfg.branches),
        )
    return cfg


@dataclass
class RevinStats:
    mean: np.ndarray  # [..., N]
    std: np.ndarray  # [..., N]


def instance_normalize(x: Tensor | np.ndarray, eps_norm: float = EPS_NORM) -> tuple[Tensor, RevinStats]:
    """Per-window, per-channel z-scoring over the time axis (-2) of ``x`` [..., I, N]."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2] < 2:
        raise E.ShapeError(f"instance_normalize needs [..., I>=2, N], got {arr.shape}")
    mean = arr.mean(axis=-2)
    std = np.maximum(arr.std(axis=-2), eps_norm)
    return Tensor((arr - mean[..., None, :]) / std[..., None, :]), RevinStats(mean, std)


def instance_denormalize(y: Tensor, stats: RevinStats) -> Tensor:
    """y * std + mean per channel; differentiable in ``y``."""
    if y.shape[-1] != stats.mean.shape[-1]:
        raise E.ShapeError(f"output has {y.shape[-1]} channels, stats have {stats.mean.shape[-1]}")
    return E.add(E.mul(y, Tensor(stats.std[..., None, :])), Tensor(stats.mean[..., None, :]))


class Branch(Module):
    """One (TL, SR) coarsening path. All methods act on the trailing time axis."""

    def __init__(self, config: ModelConfig, branch: BranchConfig, rng: np.random.Generator):
        self.branch = branch
        tl, sr = branch.token_length, branch.sampling_rate
        e, kd = config.embed_channels, config.dilated_kernel
        self.lookback, self.horizon = config.lookback, config.horizon
        self.token_conv = Conv1d(1, e, tl, rng, pad_left=(tl - 1) // 2, pad_right=tl // 2)
        self.token_mlp = MLP2(config.lookback, config.hidden, config.horizon, rng, config.dropout)
        self.collapse = Conv1d(e, 1, 1, rng)
        total_pad = (kd - 1) * sr
        self.dilated_conv = Conv1d(1, 1, kd, rng, dilation=sr,
                                   pad_left=total_pad // 2, pad_right=total_pad - total_pad // 2)
        self.equi_conv = EquispacedConv1d(1, 1, sr, rng)
        self.sampled_len = config.sampled_len(branch)
        self.predictor = MLP2(self.sampled_len, config.hidden, config.total_len, rng, config.dropout)

    def token_projection(self, x: Tensor, rng=None) -> Tensor:
        """[..., I] -> [..., O]"""
        if x.shape[-1] != self.lookback:
            raise E.ShapeError(f"token projection expects length {self.lookback}, got {x.shape}")
        lead = x.shape[:-1]
        h = self.token_conv(E.reshape(x, (*lead, 1, self.lookback)))  # [..., E, I]
        h = self.token_mlp(h, rng)  # [..., E, O]
        return E.reshape(self.collapse(h), (*lead, self.horizon))

    def contextual_sampling(self, x_tp: Tensor, x_in: Tensor) -> Tensor:
        """History first, then preliminary prediction: [..., I], [..., O] -> [..., M]"""
        joined = self.history_concat(x_tp, x_in)
        lead = joined.shape[:-1]
        h = E.reshape(joined, (*lead, 1, joined.shape[-1]))
        h = self.equi_conv(self.dilated_conv(h))
        return E.reshape(h, (*lead, self.sampled_len))

    def history_concat(self, x_tp: Tensor, x_in: Tensor) -> Tensor:
        joined = E.concat([x_in, x_tp], axis=-1)
        sr = self.branch.sampling_rate
        short = (-joined.shape[-1]) % sr
        if short:
            first = E.slice(joined, -1, 0, 1)
            joined = E.concat([first] * short + [joined], axis=-1)
        return joined

    def predict(self, x_m: Tensor, rng=None) -> Tensor:
        """[..., M] -> [..., I+O]"""
        if x_m.shape[-1] != self.sampled_len:
            raise E.ShapeError(f"predictor expects length {self.sampled_len}, got {x_m.shape}")
        return self.predictor(x_m, rng)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.predict(self.contextual_sampling(self.token_projection(x, rng), x), rng)


def multi_scale_merge(branch_outputs: Sequence[Tensor], horizon: int, merge: Conv2d1x1) -> Tensor:
    """Blend per-branch [..., I+O, N] planes with a 1x1 conv and keep the last ``horizon`` steps."""
    if not branch_outputs:
        raise E.ShapeError("multi_scale_merge needs at least one branch output")
    shape = branch_outputs[0].shape
    for y in branch_outputs:
        if y.shape != shape:
            raise E.ShapeError(f"branch outputs differ in shape: {shape} vs {y.shape}")
    lead, length, n = shape[:-2], shape[-2], shape[-1]
    stacked = E.concat([E.reshape(y, (*lead, 1, length, n)) for y in branch_outputs], axis=-3)
    merged = E.reshape(merge(stacked), (*lead, length, n))
    return E.slice(merged, -2, length - horizon, horizon)


class CPNet(Module):
    """Channel-independent multi-branch forecaster.

    ``forward_normalized`` maps instance-normalized [..., I, N] to normalized
    [..., O, N]; ``__call__`` wraps it with instance (de)normalization.
    """

    def __init__(self, config: ModelConfig, seed: int = 42):
        self.config = config
        rng = np.random.default_rng(seed)
        self.branches = [Branch(config, b, rng) for b in config.branches]
        self.merge = Conv2d1x1(len(config.branches), 1, rng)

    def branch_outputs(self, x_norm: Tensor, rng=None) -> list[Tensor]:
        cfg = self.config
        if x_norm.ndim < 2 or x_norm.shape[-2] != cfg.lookback:
            raise E.ShapeError(f"expected input [..., {cfg.lookback}, N], got {x_norm.shape}")
        nd = x_norm.ndim
        swap = (*range(nd - 2), nd - 1, nd - 2)
        series = E.transpose(x_norm, swap)  # [..., N, I]
        return [E.transpose(branch(series, rng), swap) for branch in self.branches]

    def forward_normalized(self, x_norm: Tensor, rng=None) -> Tensor:
        return multi_scale_merge(self.branch_outputs(x_norm, rng), self.config.horizon, self.merge)

    def __call__(self, x, rng=None) -> Tensor:
        x_norm, stats = instance_normalize(x)
        return instance_denormalize(self.forward_normalized(x_norm, rng), stats)


def cpnet_forward(x, model: CPNet, config: ModelConfig | None = None) -> Tensor:
    """Full forecast for a [..., I, N] window in the input's own scale."""
    if config is not None and config != model.config:
        raise ValueError("config does not match the model's configuration")
    return model(x)
