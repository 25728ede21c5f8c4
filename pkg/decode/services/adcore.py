"""
自動微分コアモジュール
64bit 浮動小数の密テンソル、define-by-run のテープによる逆伝播、
AdamW オプティマイザ、Dirichlet 損失用の特殊関数（digamma / lgamma / trigamma）を提供
"""
from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from decode.errors import DomainError, ShapeError

_node_ids = itertools.count(1)
_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


# =========================
# テープ（計算履歴）
# =========================
@dataclass
class TapeRecord:
    """1 演算分の記録：出力・親ノード・局所勾配関数"""
    out: "Tensor"
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    """現在のスレッドで有効なテープ（勾配無効時は None）"""
    if getattr(_local, "no_grad", 0):
        return None
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """with ブロック内では演算をテープに記録しない"""

    def __enter__(self):
        _local.no_grad = getattr(_local, "no_grad", 0) + 1
        return self

    def __exit__(self, *exc):
        _local.no_grad -= 1
        return False


class Tape:
    """
    define-by-run の計算テープ

    with Tape() as tape: の中で実行された演算が順に記録され、
    backward() で逆順に 1 回ずつ辿って葉ノードに勾配を割り当てる。
    テープはスレッドローカルで、別スレッドのテープとは状態を共有しない。
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._produced = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], backward) -> None:
        self.records.append(TapeRecord(out, parents, backward))
        self._produced.add(out.node_id)
        out._tape = self

    def backward(self, loss: "Tensor", params: Optional[Iterable["Tensor"]] = None) -> None:
        """
        スカラー損失から逆伝播し、到達可能な葉に dLoss/dLeaf を設定する

        Args:
            loss: スカラーの損失テンソル
            params: 必ず勾配を持たせたい葉（到達しない場合はゼロ勾配）

        Raises:
            ShapeError: 損失がスカラーでない場合
        """
        if loss.values.size != 1:
            raise ShapeError("backward", loss.shape, ())
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        grads = {}
        leaves = {}
        if loss.requires_grad:
            grads[loss.node_id] = np.ones_like(loss.values)
            if loss.node_id not in self._produced:
                leaves[loss.node_id] = loss
        for rec in reversed(self.records):
            g = grads.pop(rec.out.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = parent.node_id
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
                if key not in self._produced:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.values) if g is None else g.reshape(leaf.shape)
        for p in params or ():
            if p.node_id not in leaves:
                p.grad = np.zeros_like(p.values)
        self.records.clear()
        self._consumed = True


def backward(loss: "Tensor", params: Optional[Iterable["Tensor"]] = None) -> None:
    """損失が記録されたテープで逆伝播する（テープ外の葉なら勾配 1）"""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        if loss.values.size != 1:
            raise ShapeError("backward", loss.shape, ())
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.values)
        for p in params or ():
            if p is not loss:
                p.grad = np.zeros_like(p.values)
        return
    tape.backward(loss, params)


# =========================
# テンソル
# =========================
class Tensor:
    """
    行優先の float64 密テンソル

    values: 値（np.ndarray）
    grad: backward 後の勾配（values と同じ形状）
    node_id: テープ内での識別子
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name", "_tape")
    __array_ufunc__ = None

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = np.asarray(values, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # 演算子
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    """Tensor 以外の値を勾配なしの定数テンソルに変換"""
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    """学習対象の葉テンソルを作る"""
    return Tensor(values, requires_grad=True, name=name)


def _result(values: np.ndarray, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(values)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _norm_axis(axis: int, ndim: int) -> int:
    return axis + ndim if axis < 0 else axis


# =========================
# 要素演算
# =========================
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _result(a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _result(a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _result(a.values * b.values, (a, b),
                   lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.values / b.values
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.values, a.shape),
                              _unbroadcast(-g * out / b.values, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.values, (a,), lambda g: (-g,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.maximum(a.values, 0.0), (a,), lambda g: (g * (a.values > 0),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.values)
    return _result(y, (a,), lambda g: (g / (2.0 * y),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,))


def cos(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),))


def sin(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """区間 [lo, hi] へのクランプ（区間外では勾配 0）"""
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _result(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


# =========================
# 形状・線形演算
# =========================
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(a.values @ b.values, (a, b),
                   lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, ("rank-2",))
    return _result(a.values.T, (a,), lambda g: (g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: ArrayLike, index) -> Tensor:
    """numpy 形式のインデックス（基本・高度インデックス両対応）"""
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.values[index], (a,), _back)


def slice_(a: ArrayLike, start: int, stop: int, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return getitem(a, tuple(index))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", (), ())
    axis = _norm_axis(axis, ts[0].ndim)
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other)) if i != axis):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.values for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def split(a: ArrayLike, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError("split", a.shape, tuple(sizes))
    out, start = [], 0
    for n in sizes:
        out.append(slice_(a, start, start + n, axis))
        start += n
    return out


# =========================
# 縮約
# =========================
def _expand_like(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(_norm_axis(ax, len(shape)) for ax in axes))
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _result(np.sum(a.values, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_like(g, a.shape, axis, keepdims),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return _result(np.mean(a.values, axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_like(g, a.shape, axis, keepdims) / n,))


def _softmax_values(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = _softmax_values(a.values, axis)
    return _result(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.values, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.values - m), axis=axis, keepdims=True))
    y = a.values - lse
    return _result(y, (a,), lambda g: (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),))


def log_sum_exp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.values, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.values - m), axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)
    soft = np.exp(a.values - lse)
    return _result(out, (a,), lambda g: (_expand_like(g, a.shape, axis, keepdims) * soft,))


# =========================
# 特殊関数（digamma / trigamma / lgamma）
# 漸化式で x >= 6 まで持ち上げてから漸近展開を適用
# =========================
_SHIFT = 6.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _positive(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if not np.all(arr > 0):
        raise DomainError(f"{name} requires x > 0")
    return arr


def _digamma_values(x) -> np.ndarray:
    x = _positive(x, "digamma")
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1 / 12 - inv2 * (1 / 120 - inv2 * (1 / 252 - inv2 * (
        1 / 240 - inv2 * (1 / 132 - inv2 * (691 / 32760 - inv2 / 12))))))
    return acc + np.log(x) - 0.5 * inv - series


def _trigamma_values(x) -> np.ndarray:
    x = _positive(x, "trigamma")
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * inv2 * (1 / 6 - inv2 * (1 / 30 - inv2 * (1 / 42 - inv2 * (
        1 / 30 - inv2 * (5 / 66 - inv2 * (691 / 2730 - inv2 * 7 / 6))))))
    return acc + inv + 0.5 * inv2 + series


def _lgamma_values(x) -> np.ndarray:
    x = _positive(x, "lgamma")
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= np.log(x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1 / 12 - inv2 * (1 / 360 - inv2 * (1 / 1260 - inv2 * (
        1 / 1680 - inv2 * (1 / 1188 - inv2 * (691 / 360360 - inv2 / 156))))))
    return acc + (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series


def _tetragamma_values(x) -> np.ndarray:
    x = _positive(x, "tetragamma")
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= 2.0 / (x[small] ** 3)
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * inv2 * (-0.5 + inv2 * (1 / 6 - inv2 * (1 / 6 - inv2 * (
        3 / 10 - inv2 * (5 / 6 - inv2 * (691 / 210 - inv2 * 35 / 2))))))
    return acc - inv2 - inv * inv2 + series


def _scalar_or_array(values: np.ndarray):
    return float(values) if values.ndim == 0 else values


def digamma(x):
    """
    ψ(x)（x > 0）。Tensor を渡すと微分可能な演算として記録される

    Raises:
        DomainError: x <= 0 の場合
    """
    if isinstance(x, Tensor):
        vals = _digamma_values(x.values)
        return _result(vals, (x,), lambda g: (g * _trigamma_values(x.values),))
    return _scalar_or_array(_digamma_values(x))


def trigamma(x):
    """ψ'(x)（x > 0）。Tensor の勾配は ψ''(x)"""
    if isinstance(x, Tensor):
        vals = _trigamma_values(x.values)
        return _result(vals, (x,), lambda g: (g * _tetragamma_values(x.values),))
    return _scalar_or_array(_trigamma_values(x))


def lgamma(x):
    """log Γ(x)（x > 0）。Tensor の勾配は digamma"""
    if isinstance(x, Tensor):
        vals = _lgamma_values(x.values)
        return _result(vals, (x,), lambda g: (g * _digamma_values(x.values),))
    return _scalar_or_array(_lgamma_values(x))


# =========================
# オプティマイザ（AdamW）
# =========================
@dataclass(frozen=True)
class StepHalvingSchedule:
    """warm_epochs までは一定、その後 halve_every エポックごとに学習率を半減"""
    base_lr: float
    warm_epochs: int = 10
    halve_every: int = 2

    def lr_at(self, epoch: int) -> float:
        if epoch < self.warm_epochs:
            return self.base_lr
        return self.base_lr * 0.5 ** ((epoch - self.warm_epochs) // self.halve_every)

    def describe(self) -> dict:
        return {"kind": "step-halving", "base_lr": self.base_lr,
                "warm_epochs": self.warm_epochs, "halve_every": self.halve_every}


@dataclass
class OptimizerState:
    """AdamW の状態（モーメント・ステップ数・学習率・減衰係数・スケジュール）"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    schedule: Optional[StepHalvingSchedule] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer_state(params: Sequence[np.ndarray], lr: float, weight_decay: float = 1e-2,
                         schedule: Optional[StepHalvingSchedule] = None,
                         betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params],
        v=[np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params],
        lr=lr, weight_decay=weight_decay, schedule=schedule,
        beta1=betas[0], beta2=betas[1], eps=eps,
    )


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   state: OptimizerState) -> Tuple[List[np.ndarray], OptimizerState]:
    """
    AdamW の 1 ステップ（重み減衰はモーメント更新と分離）

    Args:
        params: パラメータ配列のリスト
        grads: 同じ形状の勾配
        state: 現在の状態

    Returns:
        (更新後パラメータ, 更新後状態)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("optimizer_step", (len(params), len(grads)), (len(state.m),))
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("optimizer_step", p.shape, g.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p - state.lr * state.weight_decay * p - state.lr * update)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, step=step)


class AdamW:
    """Tensor の葉をその場で更新する AdamW ラッパー"""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 1e-2,
                 schedule: Optional[StepHalvingSchedule] = None,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = init_optimizer_state([p.values for p in self.params], lr, weight_decay,
                                          schedule, betas, eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    def set_epoch(self, epoch: int) -> float:
        if self.state.schedule is not None:
            self.state.lr = self.state.schedule.lr_at(epoch)
        return self.state.lr

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        new, self.state = optimizer_step([p.values for p in self.params], grads, self.state)
        for p, values in zip(self.params, new):
            p.values = values

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# =========================
# 数値微分チェック
# =========================
def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """中心差分による勾配"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_check(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """
    解析勾配と中心差分の相対誤差 ‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖) を返す

    Args:
        fn: Tensor -> スカラー Tensor
        x: 評価点
    """
    leaf = parameter(x)
    with Tape() as tape:
        loss = fn(leaf)
    tape.backward(loss, [leaf])
    analytic = leaf.grad

    def _value(arr):
        with no_grad():
            return fn(as_tensor(arr)).item()

    numeric = numeric_gradient(_value, x, eps)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
