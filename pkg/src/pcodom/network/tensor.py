"""Minimal reverse-mode autodiff over numpy arrays.

Each op returns a :class:`Tensor` holding its parents and a closure that
pushes the output gradient back to them.  Gradients are only propagated
into tensors with ``requires_grad`` set, directly or through a parent.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import GraphNotBuilt, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if self._backward is None:
            raise GraphNotBuilt("backward() called on a tensor that is not the output of a recorded op")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior gradients are scratch; leaves keep accumulating
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _backward=backward if req else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` input with ``(O, C, kh, kw)`` weights."""
    X = x.data
    if X.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (N, C, H, W) input, got shape {X.shape}")
    O, C, kh, kw = w.data.shape
    N, Cx, H, W = X.shape
    if Cx != C:
        raise ShapeMismatch(f"conv2d input has {Cx} channels, weights expect {C}")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"conv2d output would be {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}")
    Xp = np.pad(X, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else X
    # (N, C, Ho, Wo, kh, kw) view -> (N*Ho*Wo, C*kh*kw)
    win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    Wm = w.data.reshape(O, -1)
    out = cols @ Wm.T
    if b is not None:
        out += b.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ Wm).reshape(N, Ho, Wo, C, kh, kw)
            dXp = np.zeros(Xp.shape, dtype=X.dtype)
            for i in range(kh):
                for j in range(kw):
                    dXp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dXp = dXp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dXp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``(N, in)`` input and ``(out, in)`` weights."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def backward(g):
        x._accumulate(np.where(pos, g, g * g.dtype.type(slope)))

    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1 - rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.data.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale

    def backward(g):
        x._accumulate(g * mask)

    return _node(x.data * mask, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape

    def backward(g):
        x._accumulate(g.reshape(shape))

    return _node(x.data.reshape(shape[0], -1), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), backward)


def pose_mse(pred: Tensor, truth, k: float) -> Tensor:
    """Batch mean of ``mean((p - p_gt)^2) + k * mean((q - q_gt)^2)`` over ``(N, 6)`` rows."""
    if k <= 0:
        raise ValueError("loss scale k must be positive")
    P = pred.data
    T = np.asarray(truth, dtype=P.dtype)
    if P.ndim == 1:
        P, T = P[None], T.reshape(1, -1)
    if P.shape != T.shape or P.shape[1] != 6:
        raise ShapeMismatch(f"pose loss needs matching (N, 6) arrays, got {P.shape} and {T.shape}")
    n = P.shape[0]
    d = P - T
    wts = np.array([1, 1, 1, k, k, k], dtype=P.dtype) / P.dtype.type(3)
    value = np.sum(d * d * wts) / n

    def backward(g):
        pred._accumulate((g * 2 * d * wts / n).reshape(pred.data.shape))

    return _node(np.asarray(value, dtype=P.dtype), (pred,), backward)
