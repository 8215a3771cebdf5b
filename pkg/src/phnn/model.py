"""Staged VGG-style backbone with deeply supervised side outputs.

Parameter names (stable, used by checkpoints)::

    stage{i}.conv{j}.w        [Cout, Cin, 3, 3]
    stage{i}.conv{j}.b        [Cout]            (absent on the last conv of a stage)
    stage{i}.bn.gamma         [C]
    stage{i}.bn.beta          [C]
    stage{i}.side.w           [1, C, 1, 1]
    stage{i}.side.b           [1]
    fuse.w                    [1, M, 1, 1]      (hnn only)
    fuse.b                    [1]               (hnn only)

Buffers (not parameters): ``stage{i}.bn.running_mean`` and
``stage{i}.bn.running_var``. Stages and convs are numbered from 1.

The last conv of each stage feeds batch norm directly, so it carries no bias:
the norm's shift subsumes it and a bias there would receive an identically
zero gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import BatchNormState, Parameter, Tensor

FUSION_MODES = ("hnn", "phnn_pairwise", "phnn_cumulative")
VGG_CONVS = (2, 2, 3, 3, 3)
VGG_CHANNELS = (64, 128, 256, 512, 512)


@dataclass
class ModelConfig:
    num_stages: int = 5
    convs_per_stage: Optional[list] = None
    base_channels: Optional[list] = None
    width_multiplier: Fraction = Fraction(1, 8)
    in_channels: int = 3
    fusion_mode: str = "phnn_cumulative"
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.convs_per_stage is None:
            self.convs_per_stage = list(VGG_CONVS[: self.num_stages])
        if self.base_channels is None:
            self.base_channels = list(VGG_CHANNELS[: self.num_stages])
        self.convs_per_stage = [int(c) for c in self.convs_per_stage]
        self.base_channels = [int(c) for c in self.base_channels]
        self.width_multiplier = Fraction(self.width_multiplier).limit_denominator(10_000)

    @property
    def channels(self) -> list:
        return [int(round(c * self.width_multiplier)) for c in self.base_channels]

    def validate(self) -> None:
        failed = []
        if not 3 <= self.num_stages <= 5:
            failed.append(f"num_stages in 3..5 (got {self.num_stages})")
        if len(self.convs_per_stage) != self.num_stages:
            failed.append("len(convs_per_stage) == num_stages")
        if len(self.base_channels) != self.num_stages:
            failed.append("len(base_channels) == num_stages")
        if any(c < 1 for c in self.convs_per_stage):
            failed.append("every stage has >= 1 conv")
        if self.width_multiplier <= 0 or any(c < 1 for c in self.channels):
            failed.append("scaled channel counts >= 1")
        if self.in_channels < 1:
            failed.append("in_channels >= 1")
        if self.fusion_mode not in FUSION_MODES:
            failed.append(f"fusion_mode in {FUSION_MODES} (got {self.fusion_mode!r})")
        if self.kernel_size != 3:
            failed.append("kernel_size == 3")
        if failed:
            raise ConfigError("invalid ModelConfig: " + "; ".join(failed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["width_multiplier"] = Fraction(d["width_multiplier"])
        return cls(**d)


@dataclass
class SideOutput:
    stage: int
    activation: Tensor
    probability: Tensor
    logit: Tensor


@dataclass
class ForwardResult:
    side_outputs: list
    fused: Optional[SideOutput] = None

    @property
    def final(self) -> SideOutput:
        return self.fused if self.fused is not None else self.side_outputs[-1]


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    bn_states: dict = field(default_factory=dict)

    def parameters(self) -> list:
        return [Parameter(name, t) for name, t in self.params.items()]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def buffers(self) -> dict:
        out = {}
        for i, st in self.bn_states.items():
            out[f"stage{i}.bn.running_mean"] = st.running_mean
            out[f"stage{i}.bn.running_var"] = st.running_var
        return out

    @property
    def bn_initialized(self) -> bool:
        return all(st.tracked > 0 for st in self.bn_states.values())

    def forward(self, batch, training: bool = False) -> ForwardResult:
        return forward(self, batch, training)


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg)
    k = cfg.kernel_size
    cin = cfg.in_channels

    def he_uniform(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for i, (nconv, cout) in enumerate(zip(cfg.convs_per_stage, cfg.channels), start=1):
        for j in range(1, nconv + 1):
            model.params[f"stage{i}.conv{j}.w"] = Tensor(he_uniform((cout, cin, k, k)), True)
            if j < nconv:
                model.params[f"stage{i}.conv{j}.b"] = Tensor(np.zeros(cout), True)
            cin = cout
        model.params[f"stage{i}.bn.gamma"] = Tensor(np.ones(cout), True)
        model.params[f"stage{i}.bn.beta"] = Tensor(np.zeros(cout), True)
        model.bn_states[i] = BatchNormState.fresh(cout)
        model.params[f"stage{i}.side.w"] = Tensor(he_uniform((1, cout, 1, 1)), True)
        model.params[f"stage{i}.side.b"] = Tensor(np.zeros(1), True)
    if cfg.fusion_mode == "hnn":
        m = cfg.num_stages
        model.params["fuse.w"] = Tensor(np.full((1, m, 1, 1), 1.0 / m), True)
        model.params["fuse.b"] = Tensor(np.zeros(1), True)
    return model


def param_count(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def param_count_closed_form(cfg: ModelConfig) -> int:
    """Scalar parameter count computed from the configuration alone."""
    k2 = cfg.kernel_size ** 2
    total, cin = 0, cfg.in_channels
    for nconv, c in zip(cfg.convs_per_stage, cfg.channels):
        for j in range(nconv):
            total += k2 * cin * c + (c if j < nconv - 1 else 0)
            cin = c
        total += 2 * c + (c + 1)
    if cfg.fusion_mode == "hnn":
        total += cfg.num_stages + 1
    return total


def forward(model: Model, batch, training: bool = False) -> ForwardResult:
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"forward: expected [B,{cfg.in_channels},H,W] input, got {x.shape}")
    H, W = x.shape[2:]
    div = 2 ** (cfg.num_stages - 1)
    if H % div or W % div:
        raise DimensionError(
            f"forward: input extent {H}x{W} must be divisible by {div}; pad the slice first")
    p = model.params
    activations = []
    for i, nconv in enumerate(cfg.convs_per_stage, start=1):
        if i > 1:
            x = T.maxpool2d(x, 2, 2)
        for j in range(1, nconv + 1):
            x = T.conv2d(x, p[f"stage{i}.conv{j}.w"], p.get(f"stage{i}.conv{j}.b"), stride=1, pad=1)
            if j == nconv:
                x = T.batchnorm2d(x, p[f"stage{i}.bn.gamma"], p[f"stage{i}.bn.beta"],
                                  model.bn_states[i], training)
            x = T.relu(x)
        side = T.conv2d(x, p[f"stage{i}.side.w"], p[f"stage{i}.side.b"])
        activations.append(T.upsample_bilinear(side, H, W))

    mode = cfg.fusion_mode
    sides = []
    running = None
    for m, act in enumerate(activations, start=1):
        if mode == "hnn" or m == 1:
            logit = act
        elif mode == "phnn_pairwise":
            logit = T.add(act, activations[m - 2])
        else:
            logit = T.add(act, running)
        running = logit
        sides.append(SideOutput(m, act, T.sigmoid(logit), logit))

    fused = None
    if mode == "hnn":
        stacked = T.concat_channels(activations)
        logit = T.conv2d(stacked, p["fuse.w"], p["fuse.b"])
        fused = SideOutput(0, logit, T.sigmoid(logit), logit)
    return ForwardResult(sides, fused)
