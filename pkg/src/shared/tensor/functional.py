"""
Differentiable primitive operations on ``Tensor``.

Each op computes its result with numpy. When a tape is active and one of the
inputs requires gradients, the op also records a closure mapping the output
gradient to the input gradients.
"""
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import special

from src.shared.domain.exceptions import ContractError, ParameterError, ShapeError

from .tensor import DEFAULT_DTYPE, Tensor, active_tape

Operand = Union[Tensor, float, int, np.ndarray]
Axis = Optional[Union[int, Tuple[int, ...]]]


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward)
    return out


def _lift(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: operands do not broadcast", a.shape, b.shape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", a.data / b.data, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _emit("power", np.power(x.data, exponent), (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return _emit("square", x.data * x.data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (0.5 * g / out,)

    return _emit("sqrt", out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _emit("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _emit("log", np.log(x.data), (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (g * np.sign(x.data),)

    return _emit("abs", np.abs(x.data), (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ParameterError(f"clamp bounds inverted: lo={lo} > hi={hi}")

    def backward(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return (g * inside,)

    return _emit("clamp", np.clip(x.data, lo, hi), (x,), backward)


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)

    def backward(g):
        return (g.astype(x.dtype),)

    return _emit("cast", x.data.astype(dtype), (x,), backward)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return _emit("relu", np.maximum(x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _emit("sigmoid", out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1 - out * out),)

    return _emit("tanh", out, (x,), backward)


def hardsigmoid(x: Tensor) -> Tensor:
    out = np.clip(x.data + 3, 0, 6) / 6

    def backward(g):
        inside = (x.data > -3) & (x.data < 3)
        return (g * inside / 6,)

    return _emit("hardsigmoid", out.astype(x.dtype, copy=False), (x,), backward)


def hardswish(x: Tensor) -> Tensor:
    data = x.data
    out = data * np.clip(data + 3, 0, 6) / 6

    def backward(g):
        slope = np.where(data <= -3, 0.0, np.where(data >= 3, 1.0, (2 * data + 3) / 6))
        return ((g * slope).astype(x.dtype, copy=False),)

    return _emit("hardswish", out.astype(x.dtype, copy=False), (x,), backward)


def binary_cross_entropy_with_logits(logits: Tensor, target: Operand) -> Tensor:
    """Elementwise BCE in the logit form ``max(x,0) - x*y + log(1+exp(-|x|))``."""
    target = _lift(target, logits)
    _check_broadcast("bce", logits, target)
    x, y = logits.data, target.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return _unbroadcast(g * (special.expit(x) - y), logits.shape), None

    return _emit("bce_with_logits", out.astype(logits.dtype, copy=False), (logits, target), backward)


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------

def _reduction_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_normalize_axis(a, ndim) for a in axis))


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _reduction_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _reduction_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", np.asarray(out, dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape: {exc}", x.shape, tuple(shape)) from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[index]
    if isinstance(out, np.ndarray) and out.size and not np.may_share_memory(out, x.data):
        raise ContractError("only basic slicing is supported")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _emit("getitem", np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _normalize_axis(axis, ndim)
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        first = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if t.ndim != ndim or other != first:
            raise ShapeError("concat extents differ outside the concat axis", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index = [slice(None)] * ndim
            index[axis] = slice(int(lo), int(hi))
            grads.append(g[tuple(index)])
        return grads

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    axis = _normalize_axis(axis, x.ndim)
    if any(s < 1 for s in sizes) or int(np.sum(sizes)) != x.shape[axis]:
        raise ContractError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]} on axis {axis}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(x, tuple(index)))
        start += size
    return pieces


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack needs equal shapes", shape, t.shape)
    axis = _normalize_axis(axis, len(shape) + 1)

    def backward(g):
        return [np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(tensors)]

    return _emit("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Convolution and resampling
# ---------------------------------------------------------------------------

def _window_view(xp: np.ndarray, k: int, stride: int, dilation: int, h_out: int, w_out: int) -> np.ndarray:
    """Read-only (N, C, H_out, W_out, k, k) view of the receptive fields."""
    s_n, s_c, s_h, s_w = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], h_out, w_out, k, k),
        strides=(s_n, s_c, s_h * stride, s_w * stride, s_h * dilation, s_w * dilation),
        writeable=False,
    )


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, dilation: int) -> np.ndarray:
    h_out, w_out = cols.shape[2], cols.shape[3]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            out[:, :, hi:hi + stride * (h_out - 1) + 1:stride, wj:wj + stride * (w_out - 1) + 1:stride] += cols[
                :, :, :, :, i, j
            ]
    return out


def conv_output_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        x: N×C×H×W input
        weight: C_out×(C/groups)×k×k kernel
        bias: optional C_out vector

    Returns:
        N×C_out×H_out×W_out tensor
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight", x.shape, weight.shape)
    n, c, h, w = x.shape
    c_out, c_group, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only", weight.shape)
    if groups < 1 or c % groups or c_out % groups or c_group * groups != c:
        raise ShapeError(f"conv2d weight does not match input channels (groups={groups})", x.shape, weight.shape)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ParameterError(f"invalid conv2d geometry stride={stride} padding={padding} dilation={dilation}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d bias must have one entry per output channel", bias.shape, (c_out,))

    k = kh
    h_out = conv_output_extent(h, k, stride, padding, dilation)
    w_out = conv_output_extent(w, k, stride, padding, dilation)
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d output would be empty", x.shape, weight.shape)

    pointwise = k == 1 and stride == 1 and padding == 0 and groups == 1
    depthwise = groups == c and c_out == c and groups > 1
    w_data = weight.data

    if pointwise:
        flat = x.data.reshape(n, c, h * w)
        w2 = w_data.reshape(c_out, c)
        out = np.matmul(w2, flat).reshape(n, c_out, h, w)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        xp = np.ascontiguousarray(xp)
        view = _window_view(xp, k, stride, dilation, h_out, w_out)
        if groups == 1:
            cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
            out = (cols @ w_data.reshape(c_out, -1).T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
        elif depthwise:
            out = np.zeros((n, c, h_out, w_out), dtype=np.result_type(x.dtype, weight.dtype))
            for i in range(k):
                for j in range(k):
                    out += view[:, :, :, :, i, j] * w_data[:, 0, i, j][None, :, None, None]
        else:
            og, cg = c_out // groups, c // groups
            out = np.einsum(
                "ngchwij,gocij->ngohw",
                view.reshape(n, groups, cg, h_out, w_out, k, k),
                w_data.reshape(groups, og, cg, k, k),
                optimize=True,
            ).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            g_flat = g.reshape(n, c_out, h * w)
            if weight.requires_grad:
                gw = np.einsum("nop,ncp->oc", g_flat, x.data.reshape(n, c, h * w), optimize=True).reshape(weight.shape)
            if x.requires_grad:
                gx = np.matmul(w_data.reshape(c_out, c).T, g_flat).reshape(x.shape)
            return gx, gw, gb

        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
            if weight.requires_grad:
                cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
                gw = (g2.T @ cols).reshape(weight.shape)
            if x.requires_grad:
                gcols = (g2 @ w_data.reshape(c_out, -1)).reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        elif depthwise:
            if weight.requires_grad:
                gw = np.einsum("nchw,nchwij->cij", g, view, optimize=True)[:, None, :, :]
            if x.requires_grad:
                gcols = g[:, :, :, :, None, None] * w_data[:, 0][None, :, None, None, :, :]
        else:
            og, cg = c_out // groups, c // groups
            g_g = g.reshape(n, groups, og, h_out, w_out)
            if weight.requires_grad:
                gw = np.einsum(
                    "ngohw,ngchwij->gocij", g_g, view.reshape(n, groups, cg, h_out, w_out, k, k), optimize=True
                ).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.einsum(
                    "ngohw,gocij->ngchwij", g_g, w_data.reshape(groups, og, cg, k, k), optimize=True
                ).reshape(n, c, h_out, w_out, k, k)
        if x.requires_grad:
            gxp = _col2im(gcols, xp.shape, k, stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if gw is not None:
            gw = gw.astype(weight.dtype, copy=False)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, backward)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """2×2 mean pooling with stride 2; odd extents are edge-padded bottom/right."""
    if x.ndim != 4:
        raise ShapeError("avg_pool_2x2 expects rank-4 input", x.shape)
    n, c, h, w = x.shape
    pad_h, pad_w = h % 2, w % 2
    data = x.data
    if pad_h or pad_w:
        data = np.pad(data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    hp, wp = h + pad_h, w + pad_w
    out = data.reshape(n, c, hp // 2, 2, wp // 2, 2).mean(axis=(3, 5))

    def backward(g):
        grad = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4
        if pad_w:
            grad[:, :, :, w - 1] += grad[:, :, :, w]
            grad = grad[:, :, :, :w]
        if pad_h:
            grad[:, :, h - 1, :] += grad[:, :, h, :]
            grad = grad[:, :, :h, :]
        return (np.ascontiguousarray(grad),)

    return _emit("avg_pool_2x2", out.astype(x.dtype, copy=False), (x,), backward)


def resize_matrix(n_in: int, n_out: int, align_corners: bool = False) -> np.ndarray:
    """Dense (n_out, n_in) linear-interpolation matrix along one axis."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    dst = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = dst * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    else:
        src = np.maximum((dst + 0.5) * n_in / n_out - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Separable bilinear resize of an N×C×H×W tensor."""
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects rank-4 input", x.shape)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        return _emit("resize_identity", x.data.copy(), (x,), lambda g: (g,))

    rh = resize_matrix(h, out_h, align_corners).astype(x.dtype)
    rw = resize_matrix(w, out_w, align_corners).astype(x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _emit("bilinear_resize", out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel normalization over the (N, H, W) axes.

    In training mode the batch statistics are used and the running buffers are
    updated in place; the biased batch variance is stored so that momentum 1.0
    reproduces the training-mode output in inference mode.
    """
    if eps <= 0:
        raise ParameterError(f"batch_norm eps must be positive, got {eps}")
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"batch_norm momentum must be in [0, 1], got {momentum}")
    if x.ndim != 4:
        raise ShapeError("batch_norm expects rank-4 input", x.shape)
    c = x.shape[1]
    for name, p in (("gamma", gamma.shape), ("beta", beta.shape), ("running_mean", running_mean.shape),
                    ("running_var", running_var.shape)):
        if p != (c,):
            raise ShapeError(f"batch_norm {name} length must equal channel count", p, (c,))

    axes = (0, 2, 3)
    data = x.data
    if training:
        mu = data.mean(axis=axes)
        var = data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = x_hat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    count = data.shape[0] * data.shape[2] * data.shape[3]

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=axes) if gamma.requires_grad else None
        g_beta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_hat = g * gamma.data.reshape(1, c, 1, 1)
            scale = inv_std.reshape(1, c, 1, 1)
            if training:
                sum_g = g_hat.sum(axis=axes, keepdims=True)
                sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
                gx = scale / count * (count * g_hat - sum_g - x_hat * sum_gx)
            else:
                gx = g_hat * scale
        return gx, g_gamma, g_beta

    return _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# Window filters and padding
# ---------------------------------------------------------------------------

def _window_sum_axis(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    csum = np.cumsum(a, axis=axis, dtype=a.dtype)
    zero_shape = list(a.shape)
    zero_shape[axis] = 1
    csum = np.concatenate([np.zeros(zero_shape, dtype=a.dtype), csum], axis=axis)
    positions = np.arange(n)
    upper = np.minimum(positions + radius + 1, n)
    lower = np.maximum(positions - radius, 0)
    return np.take(csum, upper, axis=axis) - np.take(csum, lower, axis=axis)


def box_sum(data: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)² window clipped at the borders (numpy level)."""
    return _window_sum_axis(_window_sum_axis(data, radius, 2), radius, 3)


def box_filter(x: Tensor, radius: int) -> Tensor:
    """Mean over the (2r+1)² window, divided by the number of in-bounds pixels."""
    if radius < 1:
        raise ParameterError(f"box filter radius must be >= 1, got {radius}")
    if x.ndim != 4:
        raise ShapeError("box_filter expects rank-4 input", x.shape)
    h, w = x.shape[2], x.shape[3]
    counts = box_sum(np.ones((1, 1, h, w), dtype=x.dtype), radius)
    out = box_sum(x.data, radius) / counts

    def backward(g):
        return (box_sum(g / counts, radius),)

    return _emit("box_filter", out, (x,), backward)


def _pad_indices(n: int, pad: int, mode: str) -> np.ndarray:
    positions = np.arange(-pad, n + pad)
    if mode == "reflect":
        if pad >= n:
            raise ShapeError(f"reflect padding of {pad} needs an extent above {pad}", (n,))
        positions = np.abs(positions)
        return np.where(positions > n - 1, 2 * (n - 1) - positions, positions)
    if mode == "edge":
        return np.clip(positions, 0, n - 1)
    raise ParameterError(f"unknown padding mode '{mode}'")


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Pad both spatial axes by ``pad`` using reflect or edge replication."""
    if x.ndim != 4:
        raise ShapeError("pad2d expects rank-4 input", x.shape)
    n, c, h, w = x.shape
    rows = _pad_indices(h, pad, mode)
    cols = _pad_indices(w, pad, mode)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        partial = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(partial, (slice(None), slice(None), rows), g)
        grad = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(grad, (slice(None), slice(None), slice(None), cols), partial)
        return (grad,)

    return _emit("pad2d", out, (x,), backward)


def upsample_zeros_2x(x: Tensor) -> Tensor:
    """Insert zeros between samples, doubling both spatial extents."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = x.data

    def backward(g):
        return (np.ascontiguousarray(g[:, :, ::2, ::2]),)

    return _emit("upsample_zeros_2x", out, (x,), backward)
