"""Minimal dense-tensor engine with reverse-mode differentiation.

Provides exactly the operations the BEV fusion and detection pipeline
need: 2-D convolution, batch normalization, ReLU/sigmoid, channel
concatenation, elementwise arithmetic with limited broadcasting, a few
pointwise helpers for the detection losses, and a finite-difference
gradient checker.

Feature maps are (C, H, W) arrays without a batch axis; the pipeline
always runs batch size one. Tracked tensors are never mutated in place:
every operation builds a fresh node on the tape.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradcheckError, ShapeMismatchError

FLOAT_DTYPES = (np.float32, np.float64)

# Finite differences are only a valid gradient oracle where the graph is
# locally smooth and moderately curved. Ops with subgradient kinks
# (relu, max, smooth-L1, masked extrema) report their distance to the
# nearest kink here; train-mode batchnorm reports its smallest channel
# std, whose inverse powers control the FD truncation error. Test
# scenarios resample inputs that land too close to either hazard.
_KINK_DISTANCES: list[float] | None = None
_CURVATURE_SCALES: list[float] | None = None


def _note_kink(distance: float) -> None:
    if _KINK_DISTANCES is not None:
        _KINK_DISTANCES.append(float(distance))


def _note_curvature_scale(scale: float) -> None:
    if _CURVATURE_SCALES is not None:
        _CURVATURE_SCALES.append(float(scale))


@contextmanager
def kink_watch():
    """Collect smoothness hazards during forward passes.

    Yields a callable returning (min kink distance, min curvature scale);
    both are inf if the graph never hit a hazardous op.
    """
    global _KINK_DISTANCES, _CURVATURE_SCALES
    saved_k, saved_c = _KINK_DISTANCES, _CURVATURE_SCALES
    _KINK_DISTANCES = []
    _CURVATURE_SCALES = []
    local_k, local_c = _KINK_DISTANCES, _CURVATURE_SCALES
    try:
        yield lambda: (min(local_k, default=float("inf")),
                       min(local_c, default=float("inf")))
    finally:
        _KINK_DISTANCES = saved_k
        _CURVATURE_SCALES = saved_c


class Tensor:
    """A dense array with an optional reverse-mode gradient tape entry."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar result through the tape."""
        if self.data.size != 1:
            raise GradcheckError(
                f"backward() requires a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


# -- limited broadcasting ------------------------------------------------------
#
# Supported pairings (and the mirrored order):
#   * identical shapes
#   * scalar (size 1) against anything
#   * a (1, H, W) map against (C, H, W)  -- per-cell weights over channels

def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if a == b:
        return True
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return True
    if len(a) == 3 and len(b) == 3 and a[1:] == b[1:] and (a[0] == 1 or b[0] == 1):
        return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # (1, H, W) operand against (C, H, W) result
    return g.sum(axis=0, keepdims=True)


def _binary(a: Tensor, b: Tensor, forward, grad_a, grad_b) -> Tensor:
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatchError(f"shapes not broadcastable: {a.shape} vs {b.shape}")
    out_data = forward(a.data, b.data)

    def backward(g):
        a._accum(_reduce_to(grad_a(g, a.data, b.data), a.shape))
        b._accum(_reduce_to(grad_b(g, a.data, b.data), b.shape))

    return Tensor._node(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add,
                   lambda g, x, y: g,
                   lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    diff = np.abs(a.data - b.data)
    if diff.size:
        _note_kink(diff.min())

    def fwd(x, y):
        return np.maximum(x, y)

    def ga(g, x, y):
        return g * (x >= y)

    def gb(g, x, y):
        return g * (x < y)

    return _binary(a, b, fwd, ga, gb)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "max":
        return maximum(a, b)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


# -- pointwise nonlinearities --------------------------------------------------

def relu(x: Tensor) -> Tensor:
    if x.data.size:
        _note_kink(np.abs(x.data).min())
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        x._accum(g * mask)

    return Tensor._node(out_data, (x,), backward)


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    # keep the output strictly inside (0, 1) even for saturating inputs
    tiny = np.asarray(1e-15, dtype=x.dtype)
    return np.clip(s, tiny, 1.0 - tiny)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_arr(x.data)

    def backward(g):
        x._accum(g * s * (1.0 - s))

    return Tensor._node(s, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably; grad is sigmoid(x)."""
    out_data = np.logaddexp(np.asarray(0.0, dtype=x.dtype), x.data)

    def backward(g):
        x._accum(g * _sigmoid_arr(x.data))

    return Tensor._node(out_data, (x,), backward)


def sin(x: Tensor) -> Tensor:
    out_data = np.sin(x.data)

    def backward(g):
        x._accum(g * np.cos(x.data))

    return Tensor._node(out_data, (x,), backward)


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style penalty: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    a = np.abs(x.data)
    if a.size:
        # non-smooth only at x = 0 via |x| in the outer branch; the 0.5x^2
        # branch is smooth through 0, so the only gradient kink is |x| = 1
        _note_kink(np.abs(a - 1.0).min())
    inner = a < 1.0
    out_data = np.where(inner, 0.5 * x.data * x.data, a - 0.5)

    def backward(g):
        x._accum(g * np.where(inner, x.data, np.sign(x.data)))

    return Tensor._node(out_data.astype(x.dtype), (x,), backward)


# -- structure ops ------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeMismatchError(
            f"concat_channels needs matching spatial dims, got {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    c1 = a.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        a._accum(g[:c1])
        b._accum(g[c1:])

    return Tensor._node(out_data, (a, b), backward)


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[0]
    out_data = x.data.mean(axis=0, keepdims=True)

    def backward(g):
        x._accum(np.repeat(g / c, c, axis=0))

    return Tensor._node(out_data, (x,), backward)


def channel_max(x: Tensor) -> Tensor:
    """Max over channels; ties route the gradient to the lowest channel."""
    idx = x.data.argmax(axis=0)
    if x.shape[0] > 1:
        part = np.sort(x.data, axis=0)
        _note_kink(np.abs(part[-1] - part[-2]).min())
    out_data = np.take_along_axis(x.data, idx[None], axis=0)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[None], g, axis=0)
        x._accum(gx)

    return Tensor._node(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        x._accum(np.full_like(x.data, float(g)))

    return Tensor._node(out_data, (x,), backward)


def masked_min(x: Tensor, mask: np.ndarray) -> Tensor:
    return _masked_extreme(x, mask, np.argmin)


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    return _masked_extreme(x, mask, np.argmax)


def _masked_extreme(x: Tensor, mask: np.ndarray, argfn) -> Tensor:
    sel = np.broadcast_to(mask, x.shape).reshape(-1)
    idx_pool = np.flatnonzero(sel)
    if idx_pool.size == 0:
        raise ShapeMismatchError("masked reduction over an empty mask")
    flat = x.data.reshape(-1)
    pick = idx_pool[argfn(flat[idx_pool])]
    if idx_pool.size > 1:
        pool = np.sort(flat[idx_pool])
        runner_up_gap = (pool[1] - pool[0]) if argfn is np.argmin else (pool[-1] - pool[-2])
        _note_kink(abs(runner_up_gap))
    out_data = np.asarray(flat[pick], dtype=x.dtype)

    def backward(g):
        gx = np.zeros_like(flat)
        gx[pick] = g
        x._accum(gx.reshape(x.shape))

    return Tensor._node(out_data, (x,), backward)


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask is true, b elsewhere; mask is constant.

    Copies the selected entries bit-exactly, which the fusion bypass
    contract relies on.
    """
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    m = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, a.shape, b.shape))
    out_data = np.where(m, a.data, b.data)

    def backward(g):
        a._accum(_reduce_to(np.where(m, g, 0.0), a.shape))
        b._accum(_reduce_to(np.where(m, 0.0, g), b.shape))

    return Tensor._node(out_data, (a, b), backward)


# -- convolution ----------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights for a 2-D cross-correlation with same-size padding.

    kernel is (out_ch, in_ch, kH, kW) with odd kH, kW; padding is
    (k-1)/2 per axis so stride 1 preserves the spatial size and stride 2
    halves it.
    """
    kernel: Tensor
    bias: Tensor
    stride: int = 1

    def __post_init__(self):
        oc, ic, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatchError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (oc,):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match out_ch {oc}")
        if self.stride not in (1, 2):
            raise ShapeMismatchError(f"unsupported stride {self.stride}")

    @property
    def padding(self) -> tuple[int, int]:
        _, _, kh, kw = self.kernel.shape
        return (kh - 1) // 2, (kw - 1) // 2

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]

    def n_params(self) -> int:
        return self.kernel.data.size + self.bias.data.size


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with p.kernel plus bias.

    Evaluated as kH*kW shifted GEMMs over the zero-padded input, which
    keeps the data movement memcpy-shaped.
    """
    oc, ic, kh, kw = p.kernel.shape
    if x.data.ndim != 3 or x.shape[0] != ic:
        raise ShapeMismatchError(
            f"conv2d input {x.shape} does not match kernel in_ch {ic}")
    ph, pw = p.padding
    s = p.stride
    _, h, w = x.shape
    ho = (h + 2 * ph - kh) // s + 1
    wo = (w + 2 * pw - kw) // s + 1

    xp = np.zeros((ic, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w] = x.data
    # contiguous per-tap kernel slices; strided operands drop off the BLAS path
    wk_taps = np.ascontiguousarray(p.kernel.data.transpose(2, 3, 0, 1))
    n = ho * wo
    taps = [(di, dj) for di in range(kh) for dj in range(kw)]
    shifts: list[np.ndarray] = []
    out_mat = np.zeros((oc, n), dtype=x.dtype)
    for di, dj in taps:
        sl = xp[:, di:di + s * (ho - 1) + 1:s,
                dj:dj + s * (wo - 1) + 1:s].reshape(ic, n)
        shifts.append(sl)
        out_mat += wk_taps[di, dj] @ sl
    out_data = out_mat.reshape(oc, ho, wo) + p.bias.data[:, None, None]

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(oc, n))
        p.bias._accum(g.sum(axis=(1, 2)))
        if p.kernel.requires_grad:
            gk = np.empty_like(p.kernel.data)
            for k, (di, dj) in enumerate(taps):
                gk[:, :, di, dj] = gmat @ shifts[k].T
            p.kernel._accum(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k, (di, dj) in enumerate(taps):
                gxp[:, di:di + s * (ho - 1) + 1:s,
                    dj:dj + s * (wo - 1) + 1:s] += (wk_taps[di, dj].T @ gmat).reshape(ic, ho, wo)
            x._accum(gxp[:, ph:ph + h, pw:pw + w])

    return Tensor._node(out_data, (x, p.kernel, p.bias), backward)


# -- batch normalization ---------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine normalization with running statistics."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, mode: str = "train") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            mode=mode,
        )

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def n_params(self) -> int:
        return self.gamma.data.size + self.beta.data.size


def batchnorm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    c = x.shape[0]
    if p.gamma.shape != (c,):
        raise ShapeMismatchError(
            f"batchnorm gamma shape {p.gamma.shape} does not match channels {c}")
    if p.mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {p.mode!r}")

    if p.mode == "train":
        n = x.shape[1] * x.shape[2]
        if n < 2:
            raise ShapeMismatchError("train-mode batchnorm needs H*W > 1")
        flat = x.data.reshape(c, n)
        mean = flat.mean(axis=1)
        sumsq = np.einsum("ij,ij->i", flat, flat)
        var = np.maximum(sumsq / n - mean * mean, 0.0)
        _note_curvature_scale(float(np.sqrt(var.min() + p.eps)))
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var * n / (n - 1)
    else:
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x.data - p.running_mean[:, None, None]) * inv[:, None, None]
    out_data = p.gamma.data[:, None, None] * xhat + p.beta.data[:, None, None]
    train = p.mode == "train"

    def backward(g):
        p.gamma._accum((g * xhat).sum(axis=(1, 2)))
        p.beta._accum(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxhat = g * p.gamma.data[:, None, None]
            if train:
                m1 = gxhat.mean(axis=(1, 2), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(1, 2), keepdims=True)
                x._accum(inv[:, None, None] * (gxhat - m1 - xhat * m2))
            else:
                x._accum(gxhat * inv[:, None, None])

    return Tensor._node(out_data.astype(x.dtype), (x, p.gamma, p.beta), backward)


# -- gradient checking ------------------------------------------------------------

def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar graph against central differences.

    Returns the maximum relative error over all entries of all params.
    Differences below the finite-difference resolution floor (roundoff in
    f divided by 2h) count as exact agreement; without that guard, an
    entry whose true gradient is 0 would score its FD noise against the
    relative-error floor.
    """
    params = list(params)
    if not 1e-6 <= h <= 1e-4:
        raise GradcheckError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.dtype != np.float64:
            raise GradcheckError("gradcheck requires float64 parameters")
        p.requires_grad = True
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise GradcheckError(f"objective must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    atol = 1e-8 * max(1.0, abs(float(out.data)))

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            diff = abs(aflat[i] - numeric)
            if diff <= atol:
                continue
            scale = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, diff / scale)
    for p in params:
        p.zero_grad()
    return worst
