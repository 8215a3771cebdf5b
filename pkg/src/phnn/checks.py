"""Finite-difference gradient suite over every op and the composed loss."""

from __future__ import annotations

from dataclasses import replace
from fractions import Fraction

import numpy as np

from . import tensor as T
from .loss import LossSpec, balanced_bce, total_loss
from .model import ModelConfig, build_model, forward
from .tensor import BatchNormState, Parameter, Tensor

OP_TOL = 1e-6
MODEL_TOL = 1e-4


def _project(out: Tensor, rng) -> Tensor:
    # random read-out weights bounded away from zero, so no entry's gradient
    # is small enough to drown in finite-difference round-off
    weights = Tensor(rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.5, 1.5, size=out.shape))
    return T.sum_all(T.mul(out, weights))


def op_cases(seed: int = 0, size: int = 8):
    """Yield ``(name, f, params)`` triples for each primitive op."""
    rng = np.random.default_rng(seed)

    def p(name, shape, low=-1.0, high=1.0):
        return Parameter(name, Tensor(rng.uniform(low, high, size=shape)))

    x = p("input", (2, 3, size, size))
    w = p("weight", (4, 3, 3, 3))
    b = p("bias", (4,))
    yield "conv2d", (lambda: _project(
        T.conv2d(x.tensor, w.tensor, b.tensor, stride=1, pad=1), np.random.default_rng(1))), [x, w, b]

    xs = p("input", (1, 2, size + 1, size + 1))
    ws = p("weight", (3, 2, 3, 3))
    yield "conv2d_stride2", (lambda: _project(
        T.conv2d(xs.tensor, ws.tensor, None, stride=2, pad=1), np.random.default_rng(2))), [xs, ws]

    xm = p("input", (2, 2, size, size))
    yield "maxpool2d", (lambda: _project(T.maxpool2d(xm.tensor, 2, 2), np.random.default_rng(3))), [xm]

    xo = p("input", (1, 2, size, size))
    yield "maxpool2d_overlap", (lambda: _project(T.maxpool2d(xo.tensor, 3, 2), np.random.default_rng(4))), [xo]

    xb = p("input", (2, 3, size, size))
    g = p("gamma", (3,), 0.5, 1.5)
    be = p("beta", (3,))
    yield "batchnorm2d_train", (lambda: _project(
        T.batchnorm2d(xb.tensor, g.tensor, be.tensor, BatchNormState.fresh(3), True),
        np.random.default_rng(5))), [xb, g, be]

    state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3), 1)
    yield "batchnorm2d_eval", (lambda: _project(
        T.batchnorm2d(xb.tensor, g.tensor, be.tensor, state, False),
        np.random.default_rng(6))), [xb, g, be]

    xu = p("input", (1, 2, size // 2, size // 2 + 1))
    yield "upsample_bilinear", (lambda: _project(
        T.upsample_bilinear(xu.tensor, 2 * size - 1, 2 * size), np.random.default_rng(7))), [xu]

    xg = p("input", (2, 1, size, size), -4, 4)
    yield "sigmoid", (lambda: _project(T.sigmoid(xg.tensor), np.random.default_rng(8))), [xg]

    xa, xb2 = p("a", (2, 1, size, size)), p("b", (2, 1, size, size))
    yield "add", (lambda: _project(T.add(xa.tensor, xb2.tensor), np.random.default_rng(9))), [xa, xb2]

    xr = p("input", (2, 1, size, size))
    yield "relu", (lambda: _project(T.relu(xr.tensor), np.random.default_rng(10))), [xr]

    xc1, xc2 = p("a", (1, 1, size, size)), p("b", (1, 2, size, size))
    yield "concat_channels", (lambda: _project(
        T.concat_channels([xc1.tensor, xc2.tensor]), np.random.default_rng(11))), [xc1, xc2]

    logits = p("logit", (2, 1, size, size), -3, 3)
    label = (rng.uniform(size=(2, 1, size, size)) > 0.5).astype(float)
    yield "balanced_bce", (lambda: balanced_bce(T.sigmoid(logits.tensor), label, 0.7)), [logits]


def model_case(cfg: ModelConfig, size: int = 16, batch: int = 2, seed: int = 0):
    """Composed deeply supervised loss of a freshly built model."""
    model = build_model(cfg)
    rng = np.random.default_rng(seed)
    # non-zero biases so no gradient path is trivially symmetric
    for name, t in model.params.items():
        if name.endswith(".b") or name.endswith(".beta"):
            t.data = rng.normal(0.0, 0.1, size=t.shape)
    x = Tensor(rng.uniform(size=(batch, cfg.in_channels, size, size)))
    y = (rng.uniform(size=(batch, 1, size, size)) > 0.6).astype(float)
    spec = LossSpec(0.6, include_fused=cfg.fusion_mode == "hnn")
    return (lambda: total_loss(forward(model, x, training=True), y, spec)), model.parameters()


def default_model_config(fusion_mode: str = "phnn_cumulative") -> ModelConfig:
    return ModelConfig(num_stages=3, width_multiplier=Fraction(1, 16), fusion_mode=fusion_mode, seed=0)


def run_suite(cfg: ModelConfig = None, seed: int = 0, op_eps: float = 1e-5, model_eps: float = 1e-5,
              max_elements: int = 24, size: int = 16) -> list:
    """Return ``(name, max_relative_error, tolerance)`` rows."""
    rows = []
    for name, f, params in op_cases(seed, min(size, 16)):
        rep = T.gradcheck(f, params, eps=op_eps, tol=OP_TOL)
        rows.append((name, rep.max_error, OP_TOL))
    base = cfg or default_model_config()
    for mode in ("phnn_cumulative", "phnn_pairwise", "hnn"):
        mcfg = replace(base, fusion_mode=mode)
        f, params = model_case(mcfg, size=size, seed=seed)
        rep = T.gradcheck(f, params, eps=model_eps, tol=MODEL_TOL, max_elements=max_elements, seed=seed)
        rows.append((f"model_loss[{mode}]", rep.max_error, MODEL_TOL))
    return rows
