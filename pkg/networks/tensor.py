"""
テンソル・自動微分モジュール

numpy配列を包む Tensor と、逆伝播を持つプリミティブ（Function）を提供します。
CNNとGNNが使う演算はすべてここにあります。

- 保存は32ビット、内積と総和は64ビットで累積してから保存型に戻す
- 畳み込みは相互相関（カーネルを反転しない）
- 最大値プーリングとセグメント最大値の同値は走査順で最初の要素を採る
"""
import threading
from contextlib import contextmanager
from itertools import product
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils import AutodiffError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """このブロック内では計算グラフを記録しない（推論用、スレッドごと）"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_float_array(data: Any, dtype: Optional[np.dtype] = None) -> np.ndarray:
    array = np.asarray(data)
    if dtype is not None:
        return array.astype(dtype, copy=False)
    if not np.issubdtype(array.dtype, np.floating):
        return array.astype(np.float32)
    return array


class Tensor:
    """
    自動微分可能なテンソル

    Attributes:
        data: 値（numpy配列）
        grad: 逆伝播後の勾配（data と同じ形状）
        requires_grad: 勾配を求めるかどうか
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[np.dtype] = None, _ctx: Optional["Function"] = None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other: Any) -> "Tensor":
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def _toposort(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent._ctx is not None and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """
        スカラー損失から逆伝播し、葉テンソルの grad に勾配を加算する

        Raises:
            AutodiffError: 損失がスカラーでない、または計算グラフから切り離されている場合
        """
        if self.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._ctx is None or not self.requires_grad:
            raise AutodiffError("loss is detached from the graph (no parameter requires grad)")

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._toposort()):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            ctx = node._ctx
            assert ctx is not None
            parent_grads = ctx.backward(grad)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, g in zip(ctx.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.dtype)
                if g.shape != parent.shape:
                    raise AutodiffError(
                        f"{type(ctx).__name__} produced gradient {g.shape} for input {parent.shape}")
                if parent._ctx is None:
                    parent.grad = g.copy() if parent.grad is None else parent.grad + g
                else:
                    previous = grads.get(id(parent))
                    grads[id(parent)] = g if previous is None else previous + g


def _wrap(value: Any, dtype: np.dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


class Function:
    """
    微分可能なプリミティブの基底クラス

    forward は numpy 配列を受け取って配列を返し、backward は出力の勾配から
    入力ごとの勾配（不要な入力は None）をタプルで返す。
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs: Any) -> Tensor:
        ctx = cls(*parents)
        out = ctx.forward(*[p.data for p in parents], **kwargs)
        requires = is_grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires, _ctx=ctx if requires else None)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Any:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return (x + y).astype(_result_dtype(x, y), copy=False)

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return (x * y).astype(_result_dtype(x, y), copy=False)

    def backward(self, grad):
        return (_unbroadcast(grad * self.y, self.x.shape),
                _unbroadcast(grad * self.x, self.y.shape))


def _dot64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


class MatMul(Function):
    def forward(self, x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
        self.x, self.w = x, w
        return _dot64(x, w).astype(_result_dtype(x, w))

    def backward(self, grad):
        return _dot64(grad, self.w.T), _dot64(self.x.T, grad)


class Linear(Function):
    def forward(self, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias shape {b.shape} does not match {w.shape[1]} outputs")
        self.x, self.w = x, w
        out = _dot64(x, w)
        if b is not None:
            out += b
        return out.astype(_result_dtype(x, w))

    def backward(self, grad):
        grads = (_dot64(grad, self.w.T), _dot64(self.x.T, grad))
        if len(self.parents) == 3:
            grads += (grad.sum(axis=0, dtype=np.float64),)
        return grads


class Elu(Function):
    def forward(self, x):
        self.positive = x > 0
        self.neg = np.expm1(np.minimum(x, 0))
        return np.where(self.positive, x, self.neg).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * np.where(self.positive, 1.0, self.neg + 1.0)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x.astype(np.float64) - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y.astype(x.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        return self.y * (g - (g * self.y).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x.astype(np.float64) - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.p = np.exp(out)
        return out.astype(x.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        return g - self.p * g.sum(axis=self.axis, keepdims=True)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        axis = axis % arrays[0].ndim
        rest = [a.shape[:axis] + a.shape[axis + 1:] for a in arrays]
        if any(a.ndim != arrays[0].ndim for a in arrays) or any(shape != rest[0] for shape in rest):
            raise ShapeError(f"concat needs matching non-concatenated dims, got {[a.shape for a in arrays]}")
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis).astype(_result_dtype(*arrays), copy=False)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class SumAll(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype)

    def backward(self, grad):
        return np.full(self.shape, grad, dtype=np.float64)


class Pick(Function):
    """各行から指定列の値を取り出す（x[r, index[r]]）"""

    def forward(self, x, index=None):
        if x.ndim != 2 or index is None or len(index) != x.shape[0]:
            raise ShapeError(f"pick needs one column index per row of {x.shape}")
        self.shape = x.shape
        self.rows = np.arange(x.shape[0])
        self.index = np.asarray(index, dtype=np.intp)
        return x[self.rows, self.index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=np.float64)
        out[self.rows, self.index] = grad
        return out


class GatherRows(Function):
    def forward(self, x, index=None):
        self.shape = x.shape
        self.index = np.asarray(index, dtype=np.intp)
        return x[self.index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=np.float64)
        np.add.at(out, self.index, grad)
        return out


class SegmentSum(Function):
    """行を segment ごとに合計する（出力は num_segments 行）"""

    def forward(self, x, segments=None, num_segments=0):
        self.segments = np.asarray(segments, dtype=np.intp)
        if len(self.segments) != x.shape[0]:
            raise ShapeError(f"segment ids ({len(self.segments)}) do not match rows ({x.shape[0]})")
        return _segment_total(x, self.segments, num_segments).astype(x.dtype)

    def backward(self, grad):
        return grad[self.segments]


def _segment_starts(segments: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(segments, kind="stable")
    sorted_segments = segments[order]
    starts = np.flatnonzero(np.r_[True, sorted_segments[1:] != sorted_segments[:-1]])
    return order, starts, sorted_segments[starts]


def _segment_total(x: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    """
    segment ごとの合計（float64、行の並びに依存しない）

    列ごとに (segment, 値) の順に並べ替えてから足すので、同じ行の集合なら
    入力の並びによらずビット単位で同じ合計になる。
    """
    values = np.asarray(x, dtype=np.float64)
    values = values.reshape(len(segments), int(np.prod(values.shape[1:])))
    out = np.zeros((num_segments, values.shape[1]))
    if len(segments) > 0:
        by_value = np.argsort(values, axis=0, kind="stable")
        values = np.take_along_axis(values, by_value, axis=0)
        by_segment = np.argsort(segments[by_value], axis=0, kind="stable")
        values = np.take_along_axis(values, by_segment, axis=0)
        _, starts, present = _segment_starts(segments)
        out[present] = np.add.reduceat(values, starts, axis=0)
    return out.reshape((num_segments,) + np.shape(x)[1:])


class SegmentSoftmax(Function):
    """segment ごとのソフトマックス（GATの注意係数）"""

    def forward(self, scores, segments=None, num_segments=0):
        self.segments = np.asarray(segments, dtype=np.intp)
        if len(self.segments) != scores.shape[0]:
            raise ShapeError(f"segment ids ({len(self.segments)}) do not match scores ({scores.shape[0]})")
        s = scores.astype(np.float64)
        peak = np.full((num_segments,) + s.shape[1:], -np.inf)
        np.maximum.at(peak, self.segments, s)
        e = np.exp(s - peak[self.segments])
        total = _segment_total(e, self.segments, num_segments)
        self.num_segments = num_segments
        self.y = e / total[self.segments]
        return self.y.astype(scores.dtype)

    def backward(self, grad):
        gy = grad.astype(np.float64) * self.y
        total = np.zeros((self.num_segments,) + gy.shape[1:])
        np.add.at(total, self.segments, gy)
        return gy - self.y * total[self.segments]


class SegmentMax(Function):
    """segment ごと・列ごとの最大値（SAGEの集約）"""

    def forward(self, x, segments=None, num_segments=0):
        segments = np.asarray(segments, dtype=np.intp)
        if x.ndim != 2 or len(segments) != x.shape[0] or len(segments) == 0:
            raise ShapeError(f"segment ids ({len(segments)}) do not match rows ({x.shape[0]})")
        self.shape = x.shape
        order, starts, present = _segment_starts(segments)
        xs = x[order]
        peak = np.maximum.reduceat(xs, starts, axis=0)

        # 同値は segment 内で最初の行
        positions = np.arange(len(xs))[:, None]
        run = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(xs)]))
        hit = np.where(xs == peak[run], positions, len(xs))
        first = np.minimum.reduceat(hit, starts, axis=0)
        self.winners = order[first]
        self.present = present

        out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
        out[present] = peak
        return out

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=np.float64)
        columns = np.arange(self.shape[1])[None, :]
        out[self.winners, columns] = grad[self.present]
        return out


def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"volume input must be (C,D,H,W) or (N,C,D,H,W), got {x.shape}")


class Conv3d(Function):
    """
    3×3×3 の3次元畳み込み（相互相関）

    入力はチャネル優先、内部ではチャネルを最後に回して27個のオフセットごとに行列積を累積する。
    """

    def forward(self, x, kernel, bias=None, padding="same"):
        xb, self.unbatched = _batched(x)
        n, c_in = xb.shape[:2]
        if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
            raise ShapeError(f"kernel must be (C_out, C_in, 3, 3, 3), got {kernel.shape}")
        if kernel.shape[1] != c_in:
            raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {c_in}")
        if bias is not None and bias.shape != (kernel.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        if padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding: {padding}")

        xt = np.moveaxis(xb, 1, -1).astype(np.float64)
        if padding == "same":
            xt = np.pad(xt, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
        spatial = tuple(s - 2 for s in xt.shape[1:4])
        if min(spatial) < 1:
            raise ShapeError(f"spatial dims {xb.shape[2:]} too small for a valid 3x3x3 convolution")

        self.x_shape = xb.shape
        self.padding = padding
        self.xt = xt
        self.spatial = spatial
        self.kernel = kernel.astype(np.float64)
        self.dtype = _result_dtype(x, kernel)

        c_out = kernel.shape[0]
        out = np.zeros((n,) + spatial + (c_out,), dtype=np.float64)
        d, h, w = spatial
        for a, b, c in product(range(3), repeat=3):
            window = xt[:, a:a + d, b:b + h, c:c + w, :]
            out += np.dot(window, self.kernel[:, :, a, b, c].T)
        if bias is not None:
            out += bias
        out = np.moveaxis(out, -1, 1).astype(self.dtype)
        return out[0] if self.unbatched else out

    def backward(self, grad):
        g = grad[None] if self.unbatched else grad
        g = np.moveaxis(g, 1, -1).astype(np.float64)
        d, h, w = self.spatial
        c_out = g.shape[-1]
        g2 = g.reshape(-1, c_out)

        grad_xt = np.zeros_like(self.xt)
        grad_k = np.zeros_like(self.kernel)
        for a, b, c in product(range(3), repeat=3):
            window = self.xt[:, a:a + d, b:b + h, c:c + w, :]
            grad_k[:, :, a, b, c] = np.dot(g2.T, window.reshape(-1, window.shape[-1]))
            grad_xt[:, a:a + d, b:b + h, c:c + w, :] += np.dot(g, self.kernel[:, :, a, b, c])

        if self.padding == "same":
            grad_xt = grad_xt[:, 1:-1, 1:-1, 1:-1, :]
        grad_x = np.moveaxis(grad_xt, -1, 1)
        if self.unbatched:
            grad_x = grad_x[0]
        grads = (grad_x, grad_k)
        if len(self.parents) == 3:
            grads += (g2.sum(axis=0),)
        return grads


class MaxPool3d(Function):
    """2×2×2・ストライド2の最大値プーリング（奇数の端は切り捨て）"""

    def forward(self, x):
        if x.ndim < 3 or min(x.shape[-3:]) < 2:
            raise ShapeError(f"max pooling needs spatial dims >= 2, got {x.shape}")
        self.shape = x.shape
        lead = x.shape[:-3]
        d, h, w = (s // 2 for s in x.shape[-3:])
        self.pooled = (d, h, w)
        cropped = x[..., :2 * d, :2 * h, :2 * w]
        blocks = cropped.reshape(lead + (d, 2, h, 2, w, 2))
        k = len(lead)
        self.axes = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3, k + 5)
        blocks = blocks.transpose(self.axes).reshape(lead + (d, h, w, 8))
        self.argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        lead = self.shape[:-3]
        d, h, w = self.pooled
        blocks = np.zeros(lead + (d, h, w, 8), dtype=np.float64)
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(lead + (d, h, w, 2, 2, 2))
        blocks = blocks.transpose(np.argsort(self.axes)).reshape(lead + (2 * d, 2 * h, 2 * w))
        out = np.zeros(self.shape, dtype=np.float64)
        out[..., :2 * d, :2 * h, :2 * w] = blocks
        return out


def add(x: Tensor, y: Any) -> Tensor:
    return Add.apply(x, _wrap(y, x.dtype))


def mul(x: Tensor, y: Any) -> Tensor:
    return Mul.apply(x, _wrap(y, x.dtype))


def matmul(x: Tensor, w: Tensor) -> Tensor:
    return MatMul.apply(x, w)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """xW + b（b は省略可）"""
    if b is None:
        return Linear.apply(x, w)
    return Linear.apply(x, w, b)


def elu(x: Tensor) -> Tensor:
    return Elu.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    return Pick.apply(x, index=index)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    return GatherRows.apply(x, index=index)


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    return SegmentSum.apply(x, segments=segments, num_segments=num_segments)


def segment_softmax(scores: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    return SegmentSoftmax.apply(scores, segments=segments, num_segments=num_segments)


def segment_max(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    return SegmentMax.apply(x, segments=segments, num_segments=num_segments)


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    if bias is None:
        return Conv3d.apply(x, kernel, padding=padding)
    return Conv3d.apply(x, kernel, bias, padding=padding)


def maxpool3d(x: Tensor) -> Tensor:
    return MaxPool3d.apply(x)


def parameter(data: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    """勾配を求める葉テンソルを作る"""
    return Tensor(np.array(data, dtype=dtype or np.float32), requires_grad=True)


__all__ = [
    'Tensor', 'Function', 'no_grad', 'is_grad_enabled', 'parameter',
    'add', 'mul', 'matmul', 'linear', 'elu', 'softmax', 'log_softmax', 'concat',
    'reshape', 'sum_all', 'pick', 'gather_rows', 'segment_sum', 'segment_softmax',
    'segment_max', 'conv3d', 'maxpool3d',
]
