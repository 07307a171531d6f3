"""
张量与自动微分 - numpy 存储的稠密张量、反向传播磁带以及模型所需的可微算子
"""

import contextlib
import math
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ShapeError, TapeError

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """在当前线程内关闭计算图记录"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _working_dtype(array: np.ndarray, dtype=None) -> np.dtype:
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"仅支持 float32/float64, 收到 {dtype}")
        return dtype
    if array.dtype == np.float64:
        return np.dtype(np.float64)
    return np.dtype(np.float32)


class Tensor:
    """带反向传播记录的稠密张量"""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data)
        self.data = np.ascontiguousarray(array, dtype=_working_dtype(array, dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "只有单元素张量可以转换为标量", (self.shape,))
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("backward", "梯度形状与数据不一致", (grad.shape, self.data.shape))
        grad = grad.astype(self.data.dtype, copy=False)
        # 多路扇出的梯度求和
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise TapeError("该张量不在计算图中，无法反向传播")
        if grad is None and self.data.size != 1:
            raise TapeError(f"非标量输出 {self.shape} 需要显式给出上游梯度")
        Tape(self).backward(grad)

    def __add__(self, other) -> "Tensor":
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other) -> "Tensor":
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"


class Tape:
    """一次前向计算的拓扑序记录，只允许反向传播一次"""

    def __init__(self, root: Tensor):
        if root._released:
            raise TapeError("计算图已在上一次 backward 中释放，请重新执行前向计算")
        self.root = root
        self.order: List[Tensor] = self._topological_order(root)
        self.consumed = False

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        if self.consumed or self.root._released:
            raise TapeError("同一计算图不能反向传播两次")
        root = self.root
        if seed is None:
            seed = np.ones_like(root.data)
        root._accumulate(np.asarray(seed, dtype=root.dtype))

        for node in reversed(self.order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, grad in zip(node._parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent._accumulate(grad)

        self.consumed = True
        for node in self.order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._released = True


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def constant(value, like: Optional[Tensor] = None) -> Tensor:
    """包装不参与求导的常量"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ShapeError(op, "维度数不一致", (a.shape, b.shape))
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(op, "形状不匹配", (a.shape, b.shape))


# ---------------------------------------------------------------- 逐元素算子

def add(a: Tensor, b: Tensor) -> Tensor:
    b = constant(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = constant(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = constant(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    b = constant(b, a)
    _check_broadcast("div", a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(a: Tensor, factor: Scalar) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result(a.data * a.dtype.type(factor), (a,), backward, "scale")


def add_scalar(a: Tensor, value: Scalar) -> Tensor:
    def backward(g):
        return (g,)

    return _result(a.data + a.dtype.type(value), (a,), backward, "add_scalar")


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """add / mul / sub / scale 统一入口"""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "scale":
        if isinstance(b, Tensor):
            if b.size != 1:
                raise ShapeError("scale", "scale 的第二个参数必须是标量", (a.shape, b.shape))
            b = b.item()
        return scale(a, b)
    raise ValueError(f"未知的逐元素运算: {kind}")


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


def gelu(a: Tensor) -> Tensor:
    """精确 GELU: x·Φ(x)"""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _result((x * cdf).astype(x.dtype, copy=False), (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    info = np.finfo(a.dtype)
    out = np.clip(special.expit(a.data), info.tiny, 1.0 - info.epsneg).astype(a.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward, "sigmoid")


# ---------------------------------------------------------------- 归约与形状

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "permute")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        if other.ndim != first.ndim or any(
            x != y for i, (x, y) in enumerate(zip(first.shape, other.shape)) if i != axis % first.ndim
        ):
            raise ShapeError("concat", "除拼接轴外形状必须一致", [t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), backward, "narrow")


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """沿某一轴按索引取子张量（索引可重复，反向时累加）"""
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise ShapeError("broadcast_to", "维度数不一致", (a.shape, shape))

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError("broadcast_to", "无法广播", (a.shape, shape)) from exc
    return _result(out, (a,), backward, "broadcast_to")


# ---------------------------------------------------------------- 网络层算子

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """二维互相关，x: [B,Cin,H,W]，w: [Cout,Cin,k,k]"""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", "输入与卷积核必须是四维", (x.shape, w.shape))
    batch, cin, height, width = x.shape
    cout, wcin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d", "卷积核必须是奇数边长的方形", (w.shape,))
    if cin != wcin:
        raise ShapeError("conv2d", "输入通道数与卷积核不一致", (x.shape, w.shape))
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", "偏置长度必须等于输出通道数", (w.shape, b.shape))
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d", f"非法的 stride={stride} / pad={pad}", (x.shape,))
    span_h = height + 2 * pad - k
    span_w = width + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError("conv2d", f"输出尺寸不是整数 (stride={stride}, pad={pad})", (x.shape, w.shape))
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # [B,Ho,Wo,Cin,k,k]
            gpad = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gpad[:, :, pad:pad + height, pad:pad + width] if pad else gpad
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """沿最后一维的仿射变换，w: [Din,Dout]"""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", "输入最后一维必须等于 Din", (x.shape, w.shape))
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", "偏置长度必须等于 Dout", (w.shape, b.shape))
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        flat_x = x.data.reshape(-1, w.shape[0])
        flat_g = g.reshape(-1, w.shape[1])
        gx = (g @ w.data.T) if x.requires_grad else None
        gw = (flat_x.T @ flat_g) if w.requires_grad else None
        gb = flat_g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "linear")


def _shuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    batch, channels, height, width = x.shape
    c = channels // (r * r)
    return np.ascontiguousarray(
        x.reshape(batch, c, r, r, height, width).transpose(0, 1, 4, 2, 5, 3).reshape(batch, c, height * r, width * r)
    )


def _unshuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    batch, c, height, width = x.shape
    h, w = height // r, width // r
    return np.ascontiguousarray(
        x.reshape(batch, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(batch, c * r * r, h, w)
    )


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[B,C·r²,H,W] -> [B,C,rH,rW]"""
    if x.ndim != 4 or r < 1 or x.shape[1] % (r * r):
        raise ShapeError("pixel_shuffle", f"通道数必须能被 r²={r * r} 整除", (x.shape,))

    def backward(g):
        return (_unshuffle_array(g, r),)

    return _result(_shuffle_array(x.data, r), (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """pixel_shuffle 的逆变换 [B,C,rH,rW] -> [B,C·r²,H,W]"""
    if x.ndim != 4 or r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError("pixel_unshuffle", f"空间尺寸必须能被 r={r} 整除", (x.shape,))

    def backward(g):
        return (_shuffle_array(g, r),)

    return _result(_unshuffle_array(x.data, r), (x,), backward, "pixel_unshuffle")


def bilinear_sample(src: Tensor, flow: Tensor) -> Tensor:
    """按像素位移 (dx, dy) 双线性采样，越界坐标钳制到边界"""
    if src.ndim != 4 or flow.shape != (src.shape[0], 2, src.shape[2], src.shape[3]):
        raise ShapeError("bilinear_sample", "flow 必须是 [B,2,H,W] 且与 src 同分辨率", (src.shape, flow.shape))
    batch, channels, height, width = src.shape
    s = src.data
    f = flow.data
    dtype = np.result_type(s, f)
    grid_y, grid_x = np.meshgrid(np.arange(height, dtype=dtype), np.arange(width, dtype=dtype), indexing="ij")
    px = grid_x[None] + f[:, 0]
    py = grid_y[None] + f[:, 1]
    x = np.clip(px, 0, width - 1)
    y = np.clip(py, 0, height - 1)
    x0 = np.minimum(np.floor(x), max(width - 2, 0))
    y0 = np.minimum(np.floor(y), max(height - 2, 0))
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i = np.minimum(x0i + 1, width - 1)
    y1i = np.minimum(y0i + 1, height - 1)

    plane = height * width
    flat = s.reshape(batch, channels, plane)

    def gather(yi, xi):
        index = (yi * width + xi).reshape(batch, 1, plane)
        return np.take_along_axis(flat, np.broadcast_to(index, (batch, channels, plane)), axis=2).reshape(
            batch, channels, height, width
        )

    v00 = gather(y0i, x0i)
    v01 = gather(y0i, x1i)
    v10 = gather(y1i, x0i)
    v11 = gather(y1i, x1i)
    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    out = (top * (1 - wy) + bottom * wy).astype(dtype, copy=False)

    def backward(g):
        gsrc = gflow = None
        if src.requires_grad:
            base = ((np.arange(batch)[:, None] * channels + np.arange(channels)[None, :]) * plane)[:, :, None]
            total = np.zeros(batch * channels * plane, dtype=np.float64)
            corners = (
                (y0i, x0i, (1 - wx) * (1 - wy)),
                (y0i, x1i, wx * (1 - wy)),
                (y1i, x0i, (1 - wx) * wy),
                (y1i, x1i, wx * wy),
            )
            for yi, xi, weight in corners:
                index = base + (yi * width + xi).reshape(batch, 1, plane)
                values = (g * weight).reshape(batch, channels, plane)
                total += np.bincount(index.ravel(), weights=values.ravel(), minlength=total.size)
            gsrc = total.reshape(s.shape).astype(s.dtype)
        if flow.requires_grad:
            inside_x = ((px >= 0) & (px <= width - 1)).astype(dtype)
            inside_y = ((py >= 0) & (py <= height - 1)).astype(dtype)
            d_x = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
            d_y = bottom - top
            gfx = (g * d_x).sum(axis=1) * inside_x
            gfy = (g * d_y).sum(axis=1) * inside_y
            gflow = np.stack([gfx, gfy], axis=1).astype(f.dtype)
        return gsrc, gflow

    return _result(out, (src, flow), backward, "bilinear_sample")


def time_matmul(x: Tensor, w: Tensor) -> Tensor:
    """逐通道沿时间轴的矩阵乘: x[B,C,H,W,T] · w[C,T,T]"""
    if x.ndim != 5 or w.ndim != 3 or w.shape != (x.shape[1], x.shape[4], x.shape[4]):
        raise ShapeError("time_matmul", "权重必须是 [C,T,T] 且与输入的 C、T 一致", (x.shape, w.shape))

    def backward(g):
        gx = np.einsum("bchwu,ctu->bchwt", g, w.data) if x.requires_grad else None
        gw = np.einsum("bchwt,bchwu->ctu", x.data, g) if w.requires_grad else None
        return gx, gw

    return _result(np.einsum("bchwt,ctu->bchwu", x.data, w.data), (x, w), backward, "time_matmul")


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """归一化的一维高斯窗"""
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def correlate_valid(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    windows = sliding_window_view(a, len(kernel), axis=axis)
    return windows @ kernel.astype(a.dtype, copy=False)


def _correlate_valid_transpose(g: np.ndarray, kernel: np.ndarray, axis: int, size: int) -> np.ndarray:
    moved = np.moveaxis(g, axis, -1)
    out = np.zeros(moved.shape[:-1] + (size,), dtype=g.dtype)
    span = moved.shape[-1]
    for offset, weight in enumerate(kernel):
        out[..., offset:offset + span] += weight * moved
    return np.moveaxis(out, -1, axis)


def gaussian_blur(x: Tensor, kernel: np.ndarray) -> Tensor:
    """最后两维上的可分离 valid 高斯滤波"""
    k = len(kernel)
    if x.ndim < 2 or x.shape[-1] < k or x.shape[-2] < k:
        raise ShapeError("gaussian_blur", f"图像小于 {k}x{k} 窗口", (x.shape,))
    height, width = x.shape[-2], x.shape[-1]
    out = correlate_valid(correlate_valid(x.data, kernel, -2), kernel, -1)

    def backward(g):
        g = _correlate_valid_transpose(g, kernel, g.ndim - 1, width)
        return (_correlate_valid_transpose(g, kernel, g.ndim - 2, height),)

    return _result(out, (x,), backward, "gaussian_blur")


# ---------------------------------------------------------------- 梯度校验

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """解析梯度与中心差分的最大相对误差 |a-n| / max(1, |n|)"""
    for p in params:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError("grad_check", "f 必须返回标量", (out.shape,))
    if out.requires_grad:
        out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = float(f().data)
                flat[i] = original - eps
                f_minus = float(f().data)
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                error = abs(float(grad.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)
    return worst
