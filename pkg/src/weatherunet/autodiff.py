"""Reverse-mode autodiff over numpy arrays with the operators a UNet needs.

Tensors are NCHW. Each op records its parents and a closure mapping the
output gradient to parent gradients; :func:`backward` walks the graph in
reverse topological order and accumulates into ``.grad`` of every leaf
with ``requires_grad``. Parameters and activations default to float32;
feeding float64 leaves runs the whole graph in float64 (gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar root, double backward, missing grad)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_nchw(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D NCHW, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Padded NCHW -> (C*k*k, N*H*W) patch matrix, channel-major rows."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    xc = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding (odd square kernels)."""
    _check_nchw(x, "conv input")
    n, c, h, wd = x.shape
    if w.data.ndim != 4:
        raise ShapeError(f"kernel must be [F,C,k,k], got {w.shape}")
    f, cw, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be odd and square, got {k}x{k2}")
    if cw != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {cw}")
    if b.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {b.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(f, -1)
    out = wmat @ cols
    out += b.data[:, None]
    out = out.reshape(f, n, h, wd).transpose(1, 0, 2, 3)

    def backward_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gb = gm.sum(axis=1)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c, k, k, n, h, wd)
            dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
            gx = dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties send the gradient to the first row-major element."""
    _check_nchw(x, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), backward_fn)


def upsample_nn2(x: Tensor) -> Tensor:
    _check_nchw(x, "upsample input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat input")
    _check_nchw(b, "concat input")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :c1], g[:, c1:]

    return _result(out, (a, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    numel = diff.size
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward_fn(g):
        gp = (2.0 / numel) * g * diff
        return gp.astype(pred.dtype), (-gp).astype(target.dtype)

    return _result(loss, (pred, target), backward_fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor with requires_grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran on this graph; rebuild it before calling again")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order, seen = [], set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
    loss._done = True


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GraphError(f"parameter {i} with shape {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
        p.grad = None


class Adam:
    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
