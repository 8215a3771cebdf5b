"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operators needed by the segmentation network are provided. Every op
returns a new :class:`Tensor`; values are never mutated in place once an op has
produced them. Gradients of leaf tensors accumulate across ``backward`` calls
until :meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DeterminismError, DimensionError, UninitializedError

DTYPE = np.float64

# Sigmoid outputs are clipped into the open interval so that log(p) and
# log(1 - p) stay finite for every finite input.
_P_LO = np.finfo(DTYPE).tiny
_P_HI = 1.0 - np.finfo(DTYPE).epsneg

_num_threads = 0


def set_num_threads(n: int) -> None:
    """Worker count for per-sample convolution work; 0 means serial."""
    global _num_threads
    _num_threads = max(0, int(n))


def num_threads_from_env() -> int:
    raw = os.environ.get("PHNN_THREADS", "").strip()
    return int(raw) if raw else 0


def _map_samples(fn, count):
    # Each sample is computed independently with a fixed reduction order, so the
    # worker count never changes the bits of the result.
    if _num_threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=_num_threads) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(i) for i in range(count)]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward`` maps the output gradient to a tuple with one entry per parent
    (``None`` where no gradient flows).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return make_op(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g.item()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make_op(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g.item() / n),))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    p = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    p = np.clip(p, _P_LO, _P_HI)
    return make_op(p, (x,), lambda g: (g * p * (1.0 - p),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    shapes = {(p.shape[0],) + p.shape[2:] for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"concat: non-channel extents differ {sorted(shapes)}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.data for p in parts], axis=1), parts, backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input channels (axis 1) = {C} but weight in-channels (axis 1) = {Cw}")
    if kh != kw or kh < 1:
        raise DimensionError(f"conv2d: kernel axes 2,3 must be equal and >= 1, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride must be >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias axis 0 = {bias.shape} but out-channels = {O}")
    k = kh
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < k or Wp < k:
        raise DimensionError(f"conv2d: padded input {Hp}x{Wp} (axes 2,3) smaller than kernel {k}")
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    wmat = weight.data.reshape(O, C * k * k)
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data

    def columns(i):
        win = sliding_window_view(xpad[i], (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(Ho * Wo, C * k * k)

    def fwd(i):
        cols = columns(i)
        return cols, (cols @ wmat.T).T.reshape(O, Ho, Wo)

    results = _map_samples(fwd, B)
    cols_all = [r[0] for r in results]
    out = np.stack([r[1] for r in results])
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def backward(g):
        def bwd(i):
            gi = g[i].reshape(O, Ho * Wo)
            dw = gi @ cols_all[i]
            dx = None
            if x.requires_grad:
                dcols = (gi.T @ wmat).reshape(Ho, Wo, C, k, k)
                dxp = np.zeros((C, Hp, Wp))
                for a in range(k):
                    for b in range(k):
                        dxp[:, a:a + stride * Ho:stride, b:b + stride * Wo:stride] += \
                            dcols[:, :, :, a, b].transpose(2, 0, 1)
                dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
            return dw, dx

        parts = _map_samples(bwd, B)
        dw = np.zeros_like(wmat)
        for dwi, _ in parts:
            dw = dw + dwi
        dx = np.stack([p[1] for p in parts]) if x.requires_grad else None
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if k < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: window and stride must be >= 1 (k={k}, stride={stride})")
    if H < k or W < k:
        raise DimensionError(f"maxpool2d: window {k} larger than input extent {H}x{W} (axes 2,3)")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    # np.argmax returns the first maximal index, i.e. row-major first on ties.
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        bi, ci, oi, oj = np.indices((B, C, Ho, Wo))
        rows = oi * stride + arg // k
        cols = oj * stride + arg % k
        if stride >= k:
            dx[bi, ci, rows, cols] = g
        else:
            np.add.at(dx, (bi, ci, rows, cols), g)
        return (dx,)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    tracked: int = 0

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), 0)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({C},), got {gamma.shape}, {beta.shape}")
    shp = (1, C, 1, 1)
    if training:
        n = B * H * W
        if n < 2:
            raise DimensionError("batchnorm2d: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * var * n / (n - 1)
        state.tracked += 1
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
        out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                gm = g.mean(axis=(0, 2, 3)).reshape(shp)
                gxm = (g * xhat).mean(axis=(0, 2, 3)).reshape(shp)
                dx = (gamma.data * inv).reshape(shp) * (g - gm - xhat * gxm)
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), backward)

    if state.tracked == 0:
        raise UninitializedError("batchnorm2d: eval mode requested before any running statistics were collected")
    inv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean.reshape(shp)) * inv.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def backward_eval(g):
        return ((g * (gamma.data * inv).reshape(shp)),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return make_op(out, (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# upsampling


@lru_cache(maxsize=64)
def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``(dst, src)``."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_bilinear: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if target_h < h or target_w < w:
        raise DimensionError(f"upsample_bilinear: target {target_h}x{target_w} smaller than source {h}x{w}")
    if (target_h, target_w) == (h, w):
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    ry = interpolation_matrix(h, target_h)
    rx = interpolation_matrix(w, target_w)
    out = np.einsum("yh,bchw,xw->bcyx", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("yh,bcyx,xw->bchw", ry, g, rx, optimize=True),)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def lines(self) -> list:
        return [f"{name}\t{err:.3e}\t{'PASS' if err < self.tol else 'FAIL'}"
                for name, err in self.errors.items()]


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def gradcheck(f: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-6,
              tol: float = 1e-6, max_elements: Optional[int] = None, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``max_elements`` caps the number of entries probed per parameter (chosen
    with ``seed``); ``None`` probes every entry.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params = list(params)
    for p in params:
        p.tensor.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ContractError("gradcheck: f must return a scalar tensor")
    out.backward()
    again = f()
    if not np.array_equal(out.data, again.data):
        raise DeterminismError("gradcheck: two baseline evaluations of f disagree")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for p in params:
        data = p.tensor.data
        analytic = p.tensor.grad if p.tensor.grad is not None else np.zeros_like(data)
        flat = data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
        report.errors[p.name] = worst
    return report
