"""Small hand-differentiated network kernel in float64.

Networks are closed-world sequential stacks built from four layer kinds:
``dense``, ``conv`` (5x5, stride 2, zero padding 2), ``relu`` and ``gap``
(global average pooling).  Parameters live in one flat vector, layer-major;
within a layer the weights come first (row-major, ``(out, in)`` for dense and
``(out, in, 5, 5)`` for conv) followed by the bias.

Forward passes run in float64, or in a wider float type when the parameters
or inputs already have one; the finite-difference oracle relies on this to
evaluate losses in extended precision.  Every function accepts a leading
batch axis.  Gradients returned by
:func:`backward` are summed over the batch, so stacking both branches of a
Siamese pair into one batch yields the summed shared-weight gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericError

KERNEL = 5
STRIDE = 2
PAD = 2


@dataclass(frozen=True)
class Layer:
    kind: str
    n_in: int = 0
    n_out: int = 0

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        if self.kind == "conv":
            return (self.n_out, self.n_in, KERNEL, KERNEL)
        return ()

    @property
    def param_count(self) -> int:
        if self.kind in ("dense", "conv"):
            return math.prod(self.weight_shape) + self.n_out
        return 0


def dense(n_in: int, n_out: int) -> Layer:
    return Layer("dense", n_in, n_out)


def conv(n_in: int, n_out: int) -> Layer:
    return Layer("conv", n_in, n_out)


RELU = Layer("relu")
GAP = Layer("gap")


class Architecture:
    """Ordered layer stack with a fixed flat-parameter offset table."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = tuple(layers)
        self.offsets: list[int] = []
        self._slices: list[tuple[slice, slice, tuple[int, ...]] | None] = []
        total = 0
        for layer in self.layers:
            self.offsets.append(total)
            count = layer.param_count
            if count:
                nw = count - layer.n_out
                self._slices.append((slice(total, total + nw), slice(total + nw, total + count), layer.weight_shape))
            else:
                self._slices.append(None)
            total += count
        self.param_count = total

    def __add__(self, other: Architecture) -> Architecture:
        return Architecture(self.layers + other.layers)

    def __repr__(self) -> str:
        return f"Architecture({[l.kind for l in self.layers]}, params={self.param_count})"

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray] | None]:
        """Views ``(weights, bias)`` per layer, ``None`` for parameter-free layers."""
        if params.ndim != 1 or params.shape[0] != self.param_count:
            raise InvalidArgument(f"expected {self.param_count} parameters, got shape {params.shape}")
        return [None if sl is None else (params[sl[0]].reshape(sl[2]), params[sl[1]]) for sl in self._slices]


def relu(x):
    return np.maximum(x, 0.0)


def _float(*arrays) -> np.dtype:
    return np.result_type(*arrays, np.float64)


def sigmoid(x):
    """Logistic function without overflow for large ``|x|``."""
    x = np.asarray(x)
    x = x.astype(_float(x), copy=False)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """``log(sigmoid(x))`` computed as ``-softplus(-x)``."""
    x = np.asarray(x)
    x = x.astype(_float(x), copy=False)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def dense_forward(weights: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    weights, bias, x = np.asarray(weights), np.asarray(bias), np.asarray(x)
    dt = _float(weights, bias, x)
    weights, bias, x = weights.astype(dt, copy=False), bias.astype(dt, copy=False), x.astype(dt, copy=False)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1] != weights.shape[1]:
        raise InvalidArgument(
            f"dense shapes disagree: weights {weights.shape}, bias {bias.shape}, input {x.shape}"
        )
    return x @ weights.T + bias


def _out_size(n: int) -> int:
    return (n + 2 * PAD - KERNEL) // STRIDE + 1


def _im2col(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Patches as ``(B, C * 25, Ho * Wo)``, channel-major then kernel row/col."""
    b, c, h, w = x.shape
    ho, wo = _out_size(h), _out_size(w)
    xp = np.zeros((b, c, h + 2 * PAD, w + 2 * PAD), dtype=x.dtype)
    xp[:, :, PAD : PAD + h, PAD : PAD + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))
    cols = win[:, :, : STRIDE * ho : STRIDE, : STRIDE * wo : STRIDE].transpose(0, 1, 4, 5, 2, 3)
    return cols.reshape(b, c * KERNEL * KERNEL, ho * wo), ho, wo


def conv2d_forward(kernels: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Strided cross-correlation; ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``."""
    kernels, bias, x = np.asarray(kernels), np.asarray(bias), np.asarray(x)
    dt = _float(kernels, bias, x)
    kernels, bias, x = kernels.astype(dt, copy=False), bias.astype(dt, copy=False), x.astype(dt, copy=False)
    single = x.ndim == 3
    if single:
        x = x[None]
    if (
        x.ndim != 4
        or kernels.ndim != 4
        or kernels.shape[2:] != (KERNEL, KERNEL)
        or kernels.shape[1] != x.shape[1]
        or bias.shape != (kernels.shape[0],)
    ):
        raise InvalidArgument(f"conv shapes disagree: kernels {kernels.shape}, bias {bias.shape}, input {x.shape}")
    out = _conv_cols(kernels, bias, _im2col(x))
    return out[0] if single else out


def _conv_cols(kernels, bias, im2col):
    cols, ho, wo = im2col
    o = kernels.shape[0]
    if cols.dtype.itemsize > 8:
        # no BLAS for extended floats; tensordot's dot loop beats batched matmul there
        y = np.tensordot(kernels.reshape(o, -1), cols, axes=([1], [1])).transpose(1, 0, 2)
    else:
        y = np.matmul(kernels.reshape(o, -1), cols)
    return (y + bias[:, None]).reshape(cols.shape[0], o, ho, wo)


def _check_input(arch: Architecture, x: np.ndarray) -> None:
    first = arch.layers[0]
    if first.kind == "dense" and (x.ndim != 2 or x.shape[1] != first.n_in):
        raise InvalidArgument(f"dense input must be (batch, {first.n_in}), got {x.shape}")
    if first.kind == "conv" and (x.ndim != 4 or x.shape[1] != first.n_in):
        raise InvalidArgument(f"conv input must be (batch, {first.n_in}, H, W), got {x.shape}")


def forward(arch: Architecture, params: np.ndarray, x: np.ndarray, keep: bool = False):
    """Run the stack on a batch; returns ``out`` or ``(out, cache)`` when ``keep``."""
    x = np.asarray(x)
    x = x.astype(_float(x, params), copy=False)
    _check_input(arch, x)
    cache = []
    for layer, wb in zip(arch.layers, arch.unpack(params)):
        if layer.kind == "dense":
            if keep:
                cache.append(x)
            x = dense_forward(wb[0], wb[1], x)
        elif layer.kind == "conv":
            cols = _im2col(x)
            if keep:
                cache.append((x.shape, cols))
            x = _conv_cols(wb[0], wb[1], cols)
        elif layer.kind == "relu":
            if keep:
                cache.append(x > 0)
            x = relu(x)
        elif layer.kind == "gap":
            if keep:
                cache.append(x.shape)
            x = x.mean(axis=(2, 3))
        else:
            raise InvalidArgument(f"unknown layer kind {layer.kind!r}")
    return (x, cache) if keep else x


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, c, KERNEL, KERNEL, ho, wo)
    dxp = np.zeros((b, c, h + 2 * PAD, w + 2 * PAD), dtype=dcols.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, :, ki : ki + STRIDE * ho : STRIDE, kj : kj + STRIDE * wo : STRIDE] += d[:, :, ki, kj]
    return dxp[:, :, PAD : PAD + h, PAD : PAD + w]


def backward(arch: Architecture, params: np.ndarray, cache: list, upstream: np.ndarray) -> np.ndarray:
    """Parameter gradient of ``sum(upstream * out)`` given a forward cache."""
    grads = np.zeros(arch.param_count)
    g = np.asarray(upstream, dtype=np.float64)
    unpacked = arch.unpack(params)
    for i in range(len(arch.layers) - 1, -1, -1):
        layer, wb, c = arch.layers[i], unpacked[i], cache[i]
        off = arch.offsets[i]
        need_input_grad = i > 0
        if layer.kind == "dense":
            w = wb[0]
            if g.shape != (c.shape[0], layer.n_out):
                raise InvalidArgument(f"upstream gradient shape {g.shape} does not match output")
            nw = w.size
            grads[off : off + nw] = (g.T @ c).ravel()
            grads[off + nw : off + nw + layer.n_out] = g.sum(axis=0)
            if need_input_grad:
                g = g @ w
        elif layer.kind == "conv":
            shape, (cols, ho, wo) = c
            w = wb[0]
            o = layer.n_out
            gr = g.reshape(g.shape[0], o, ho * wo)
            nw = w.size
            dw = np.zeros((o, cols.shape[1]))
            for k in range(gr.shape[0]):
                dw += gr[k] @ cols[k].T
            grads[off : off + nw] = dw.ravel()
            grads[off + nw : off + nw + o] = gr.sum(axis=(0, 2))
            if need_input_grad:
                g = _col2im(np.matmul(w.reshape(o, -1).T, gr), shape, ho, wo)
        elif layer.kind == "relu":
            g = g * c
        elif layer.kind == "gap":
            b, ch, h, w_ = c
            g = np.broadcast_to(g[:, :, None, None] / (h * w_), c).copy()
    return grads


def backprop(arch: Architecture, params: np.ndarray, inputs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    _, cache = forward(arch, params, inputs, keep=True)
    return backward(arch, params, cache, upstream)


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise InvalidArgument("params, grads and Adam moments must have equal length")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grads
    v = beta2 * state.second_moment + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences, one coordinate at a time, in extended precision.

    ``loss_fn`` receives a ``np.longdouble`` vector.  A loss built from this
    module's forward pass then stays in extended precision, which keeps the
    roundoff of the difference quotient far below the gradient-check
    tolerance.  On platforms where ``longdouble`` is plain double this
    degrades gracefully to ordinary double precision.
    """
    p = np.array(params, dtype=np.longdouble)
    step = np.longdouble(h)
    out = np.zeros(p.size)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        f_plus = np.longdouble(loss_fn(p))
        p[i] = orig - step
        f_minus = np.longdouble(loss_fn(p))
        p[i] = orig
        out[i] = float((f_plus - f_minus) / (2 * step))
    return out
