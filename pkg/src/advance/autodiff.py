"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the tensor operations the forecasting stack needs: a flat
computation tape, a Tensor wrapper around float64 (or float32) ndarrays, and
differentiable ops for linear algebra, the activation suite, attention
plumbing, embedding lookups, and a fused state-space scan. Analytic
gradients are verified against central finite differences via `grad_check`.

Broadcasting is deliberately restricted (same shape, scalar, or trailing
bias vector); anything else raises so shape bugs stay loud.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the creation dtype for new tensors (float64 or float32)."""
    global DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = np.dtype(dtype).type


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


# --------------------------------------------------------------------------
# Tensor and tape
# --------------------------------------------------------------------------


class Tensor:
    """Dense row-major array with an optional gradient slot.

    `values` is always a numpy array; `grad` has the identical shape once a
    backward pass has touched this tensor. `requires_grad` marks either a
    trainable leaf or an intermediate that depends on one.
    """

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(DEFAULT_DTYPE)
        self.values = v
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.values.shape}")
        # never mutated in place anywhere, so aliasing the producer is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Node:
    """One recorded operation: inputs, outputs, and the local backward rule."""

    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs: tuple[Tensor, ...], outputs: tuple[Tensor, ...], backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs always precede their consumers.

    A tape is confined to one logical thread. Opening it as a context
    manager makes it the active recording target; with no active tape, ops
    run in inference mode and record nothing.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every requires_grad tensor reachable from `loss`.

        Deterministic: nodes are replayed in strict reverse recording order,
        so two backward passes over identical tapes produce bit-identical
        gradients.
        """
        if not self.nodes:
            raise ContractError("backward() on an empty tape")
        if loss.values.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            grads_out = tuple(o.grad for o in node.outputs)
            if all(g is None for g in grads_out):
                continue
            grads_out = tuple(
                g if g is not None else np.zeros_like(o.values)
                for g, o in zip(grads_out, node.outputs)
            )
            grads_in = node.backward_fn(*grads_out)
            for inp, g in zip(node.inputs, grads_in):
                if g is None or not inp.requires_grad:
                    continue
                inp.accumulate_grad(g)


_TAPE_STACK: list = []


class _NoGrad:
    """Sentinel scope that suppresses recording on any enclosing tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is None


def no_grad() -> _NoGrad:
    return _NoGrad()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _record(inputs: tuple[Tensor, ...], outputs: tuple[Tensor, ...], backward_fn) -> None:
    tape = _active_tape()
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append(_Node(inputs, outputs, backward_fn))


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError("non-finite values in operation input")


# --------------------------------------------------------------------------
# Arithmetic
# --------------------------------------------------------------------------


def _unbroadcast_bias(g: np.ndarray, bias_shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that a trailing bias broadcast over."""
    extra = g.ndim - len(bias_shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    """Elementwise sum. Allowed: same shape, scalar, or trailing bias vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = Tensor(av + bv)
        _record((a, b), (out,), lambda g: (g, g))
    elif bv.size == 1:
        out = Tensor(av + bv.reshape(()))
        _record((a, b), (out,), lambda g: (g, g.sum().reshape(bv.shape)))
    elif av.size == 1:
        return add(b, a)
    elif bv.ndim == 1 and av.ndim > 1 and av.shape[-1] == bv.shape[0]:
        out = Tensor(av + bv)
        _record((a, b), (out,), lambda g: (g, _unbroadcast_bias(g, bv.shape)))
    else:
        raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    return out


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.values)
    _record((a,), (out,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product. Allowed: same shape or scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = Tensor(av * bv)
        _record((a, b), (out,), lambda g: (g * bv, g * av))
    elif bv.size == 1:
        s = bv.reshape(())
        out = Tensor(av * s)
        _record((a, b), (out,), lambda g: (g * s, (g * av).sum().reshape(bv.shape)))
    elif av.size == 1:
        return mul(b, a)
    else:
        raise ShapeError(f"mul: incompatible shapes {av.shape} and {bv.shape}")
    return out


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values ** p)
    av = a.values
    _record((a,), (out,), lambda g: (g * p * av ** (p - 1),))
    return out


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.abs(a.values))
    sgn = np.sign(a.values)
    _record((a,), (out,), lambda g: (g * sgn,))
    return out


def matmul(a, b) -> Tensor:
    """Matrix product, optionally batched over identical leading axes.

    Supports (..., m, k) @ (k, n) and (..., m, k) @ (..., k, n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul requires 2D+ operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {av.shape} vs {bv.shape}")
    if bv.ndim == 2:
        out_v = av.reshape(-1, av.shape[-1]) @ bv
        out = Tensor(out_v.reshape(av.shape[:-1] + (bv.shape[-1],)))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ bv.T).reshape(av.shape)
            db = av.reshape(-1, av.shape[-1]).T @ g2
            return da, db

    elif av.shape[:-2] == bv.shape[:-2]:
        out = Tensor(np.matmul(av, bv))

        def backward(g):
            da = np.matmul(g, np.swapaxes(bv, -1, -2))
            db = np.matmul(np.swapaxes(av, -1, -2), g)
            return da, db

    else:
        raise ShapeError(f"matmul: batch dimensions disagree: {av.shape} vs {bv.shape}")
    _record((a, b), (out,), backward)
    return out


def linear(x, w, b=None) -> Tensor:
    """Fused affine map: x @ w + b with x of shape (..., k), w (k, n), b (n,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    xv, wv = x.values, w.values
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"linear: input width {xv.shape} does not match weight {wv.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])
    out_v = x2 @ wv
    inputs: tuple[Tensor, ...]
    if b is not None:
        b = _as_tensor(b)
        if b.values.shape != (wv.shape[1],):
            raise ShapeError(f"linear: bias shape {b.values.shape} != ({wv.shape[1]},)")
        out_v = out_v + b.values
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    out = Tensor(out_v.reshape(xv.shape[:-1] + (wv.shape[1],)))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ wv.T).reshape(xv.shape)
        dw = x2.T @ g2
        if b is not None:
            return dx, dw, g2.sum(axis=0)
        return dx, dw

    _record(inputs, (out,), backward)
    return out


# --------------------------------------------------------------------------
# Elementwise activation suite
# --------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    ov = np.exp(a.values)
    out = Tensor(ov)
    _record((a,), (out,), lambda g: (g * ov,))
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    av = a.values
    out = Tensor(np.log(av))
    _record((a,), (out,), lambda g: (g / av,))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    out = Tensor(np.maximum(a.values, 0.0))
    mask = a.values > 0
    _record((a,), (out,), lambda g: (g * mask,))
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    ov = np.tanh(a.values)
    out = Tensor(ov)
    _record((a,), (out,), lambda g: (g * (1.0 - ov * ov),))
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    ov = _sigmoid_np(a.values)
    out = Tensor(ov)
    _record((a,), (out,), lambda g: (g * ov * (1.0 - ov),))
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    av = a.values
    out = Tensor(np.logaddexp(0.0, av))
    _record((a,), (out,), lambda g: (g * _sigmoid_np(av),))
    return out


def _masked_shift(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Subtract the rowwise max, sending masked positions to -inf."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    return x - m


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Rowwise softmax over the last axis, max-subtracted for stability.

    `mask` is a boolean array broadcastable to `a`; False positions get
    exactly zero probability. Every row must keep at least one True entry.
    """
    a = _as_tensor(a)
    _check_finite(a.values)
    shifted = _masked_shift(a.values, mask)
    e = np.exp(shifted)
    ov = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(ov)

    def backward(g):
        dot = (g * ov).sum(axis=-1, keepdims=True)
        return (ov * (g - dot),)

    _record((a,), (out,), backward)
    return out


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_finite(a.values)
    shifted = _masked_shift(a.values, mask)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ov = shifted - lse
    out = Tensor(ov)
    sm = np.exp(ov)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    _record((a,), (out,), backward)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check_finite(x.values)
    xv = x.values
    d = xv.shape[-1]
    if gamma.values.shape != (d,) or beta.values.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.values.shape}/{beta.values.shape} != ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    out = Tensor(xhat * gamma.values + beta.values)
    gv = gamma.values

    def backward(g):
        dgamma = _unbroadcast_bias(g * xhat, (d,))
        dbeta = _unbroadcast_bias(g, (d,))
        dxhat = g * gv
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    _record((x, gamma, beta), (out,), backward)
    return out


# --------------------------------------------------------------------------
# Structure ops
# --------------------------------------------------------------------------


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    _record(tuple(parts), (out,), backward)
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape
    out = Tensor(a.values.reshape(shape))
    _record((a,), (out,), lambda g: (g.reshape(old),))
    return out


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.values, axes))
    _record((a,), (out,), lambda g: (np.transpose(g, inv),))
    return out


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    av = a.values
    out = Tensor(av.sum() if axis is None else av.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full_like(av, float(g.reshape(()))) if av.ndim else g.reshape(av.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    _record((a,), (out,), backward)
    return out


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids; grads scatter-add back."""
    ids = np.asarray(ids)
    v = table.values
    if ids.size and (ids.min() < 0 or ids.max() >= v.shape[0]):
        raise ContractError(f"embedding id out of range [0, {v.shape[0]})")
    out = Tensor(v[ids])

    def backward(g):
        dt = np.zeros_like(v)
        np.add.at(dt, ids, g)
        return (dt,)

    _record((table,), (out,), backward)
    return out


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """out[b] = x[b, idx[b]] for x of shape (B, T, ...)."""
    x = _as_tensor(x)
    xv = x.values
    idx = np.asarray(idx)
    if idx.shape != (xv.shape[0],):
        raise ShapeError(f"gather_rows: index shape {idx.shape} != ({xv.shape[0]},)")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[1]):
        raise ContractError(f"gather_rows: index out of range [0, {xv.shape[1]})")
    rows = np.arange(xv.shape[0])
    out = Tensor(xv[rows, idx])

    def backward(g):
        dx = np.zeros_like(xv)
        dx[rows, idx] = g
        return (dx,)

    _record((x,), (out,), backward)
    return out


def take_flat(x, flat_idx: np.ndarray) -> Tensor:
    """Gather arbitrary elements from the flattened tensor."""
    x = _as_tensor(x)
    xv = x.values
    flat_idx = np.asarray(flat_idx)
    out = Tensor(xv.reshape(-1)[flat_idx])

    def backward(g):
        dx = np.zeros(xv.size, dtype=xv.dtype)
        np.add.at(dx, flat_idx, g.reshape(-1))
        return (dx.reshape(xv.shape),)

    _record((x,), (out,), backward)
    return out


def stack_rows(rows: Sequence) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ContractError("stack_rows of an empty sequence")
    out = Tensor(np.stack([r.values for r in rows], axis=0))

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    _record(tuple(rows), (out,), backward)
    return out


def expand_tokens(x, t: int) -> Tensor:
    """Repeat (B, D) rows across a new token axis: (B, D) -> (B, t, D)."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"expand_tokens expects (B, D), got {x.shape}")
    out = Tensor(np.broadcast_to(x.values[:, None, :], (x.shape[0], t, x.shape[1])).copy())
    _record((x,), (out,), lambda g: (g.sum(axis=1),))
    return out


def time_positional(omega: Tensor, t: np.ndarray) -> Tensor:
    """Interleaved [cos(w_i t), sin(w_i t), ...] rows for each timestamp.

    `omega` is the (d,) trainable frequency vector; output is (len(t), 2d).
    Gradients flow into the frequencies.
    """
    t = np.atleast_1d(np.asarray(t, dtype=omega.values.dtype))
    if not np.isfinite(t).all():
        raise NumericError("non-finite timestamp in positional embedding")
    w = omega.values
    phase = t[:, None] * w[None, :]
    c, s = np.cos(phase), np.sin(phase)
    ov = np.empty((t.shape[0], 2 * w.shape[0]), dtype=w.dtype)
    ov[:, 0::2] = c
    ov[:, 1::2] = s
    out = Tensor(ov)

    def backward(g):
        gw = (g[:, 0::2] * (-s) + g[:, 1::2] * c) * t[:, None]
        return (gw.sum(axis=0),)

    _record((omega,), (out,), backward)
    return out


# --------------------------------------------------------------------------
# Fused linear-recurrence scan
# --------------------------------------------------------------------------


def affine_scan(a: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive prefix combine of affine maps h -> a*h + s along axis 0.

    Work-efficient up-sweep/down-sweep over the associative combine
    (a1, s1) then (a2, s2) = (a2*a1, a2*s1 + s2). Returns (P, Q) with
    h_t = P[t] * h0 + Q[t]. O(L) work, O(log L) depth.
    """
    n = a.shape[0]
    if n == 0:
        return a.copy(), s.copy()
    size = 1 << (n - 1).bit_length()
    pa = np.ones((size,) + a.shape[1:], dtype=a.dtype)
    ps = np.zeros((size,) + s.shape[1:], dtype=s.dtype)
    pa[:n], ps[:n] = a, s
    ea, es = pa.copy(), ps.copy()  # leaf copies for the inclusive fixup

    step = 1
    while step < size:
        hi = slice(2 * step - 1, None, 2 * step)
        lo = slice(step - 1, None, 2 * step)
        ps[hi] += pa[hi] * ps[lo]
        pa[hi] *= pa[lo]
        step *= 2

    pa[size - 1] = 1.0
    ps[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        hi = slice(2 * step - 1, None, 2 * step)
        lo = slice(step - 1, None, 2 * step)
        t_a, t_s = pa[lo].copy(), ps[lo].copy()
        pa[lo], ps[lo] = pa[hi], ps[hi]
        # exclusive[hi] = exclusive[parent] followed by the left block total
        ps[hi] *= t_a
        ps[hi] += t_s
        pa[hi] *= t_a
        step //= 2

    # inclusive[t] = exclusive[t] followed by element t
    qa = ea[:n] * pa[:n]
    qs = ea[:n] * ps[:n] + es[:n]
    return qa, qs


def _scan_states(abar: np.ndarray, bx: np.ndarray, h0: np.ndarray, parallel: bool) -> np.ndarray:
    """All hidden states h_1..h_L for h_t = abar_t * h_{t-1} + bx_t."""
    if parallel:
        p, q = affine_scan(abar, bx)
        return p * h0[None] + q
    hs = np.empty_like(abar)
    h = h0
    for i in range(abar.shape[0]):
        h = abar[i] * h + bx[i]
        hs[i] = h
    return hs


def ssm_scan(abar, bbar, c, x, h0, parallel: bool = False) -> tuple[Tensor, Tensor]:
    """Run the discretized state recurrence over a sequence.

    Shapes: abar, bbar (L, D, N); c (L, N) shared across channels or
    (L, N, D) per channel; x (L, D); h0 (D, N). Returns the outputs
    y (L, D) and the final hidden state (D, N). The backward rule is the
    reverse-time recurrence, computed analytically in one pass.
    """
    abar, bbar, c, x, h0 = map(_as_tensor, (abar, bbar, c, x, h0))
    av, bv, cv, xv, h0v = abar.values, bbar.values, c.values, x.values, h0.values
    if av.ndim != 3 or av.shape != bv.shape:
        raise ShapeError(f"ssm_scan: abar {av.shape} and bbar {bv.shape} must be (L, D, N)")
    length, d, n = av.shape
    if xv.shape != (length, d) or h0v.shape != (d, n):
        raise ShapeError(f"ssm_scan: x {xv.shape} or h0 {h0v.shape} inconsistent with (L, D, N)=({length},{d},{n})")
    per_channel = cv.ndim == 3
    if (per_channel and cv.shape != (length, n, d)) or (not per_channel and cv.shape != (length, n)):
        raise ShapeError(f"ssm_scan: c has shape {cv.shape}, expected ({length},{n}) or ({length},{n},{d})")

    if length == 0:
        y = Tensor(np.zeros((0, d), dtype=av.dtype))
        hT = Tensor(h0v.copy())
        _record((abar, bbar, c, x, h0), (y, hT), lambda gy, gh: (None, None, None, None, gh))
        return y, hT

    bx = bv * xv[:, :, None]
    hs = _scan_states(av, bx, h0v, parallel)
    if per_channel:
        yv = np.einsum("lnd,ldn->ld", cv, hs)
    else:
        yv = np.einsum("ldn,ln->ld", hs, cv)
    y = Tensor(yv)
    hT = Tensor(hs[-1].copy())

    def backward(gy, ghT):
        # reverse-time recurrence dh_t = abar_{t+1} dh_{t+1} + gy_t (x) c_t
        if per_channel:
            src = gy[:, :, None] * np.swapaxes(cv, 1, 2)
            dc = np.swapaxes(hs, 1, 2) * gy[:, None, :]
        else:
            src = gy[:, :, None] * cv[:, None, :]
            dc = np.einsum("ldn,ld->ln", hs, gy)
        dh_all = np.empty_like(src)
        dh = src[-1] + ghT
        dh_all[-1] = dh
        for i in range(length - 2, -1, -1):
            dh = av[i + 1] * dh + src[i]
            dh_all[i] = dh
        da = np.empty_like(dh_all)
        da[0] = dh_all[0] * h0v
        np.multiply(dh_all[1:], hs[:-1], out=da[1:])
        db = dh_all * xv[:, :, None]
        dx = (dh_all * bv).sum(axis=2)
        dh0 = av[0] * dh_all[0]
        return da, db, dc, dx, dh0

    _record((abar, bbar, c, x, h0), (y, hT), backward)
    return y, hT


def select_rows(x, idx: np.ndarray) -> Tensor:
    """Gather rows x[idx] along axis 0; repeated indices accumulate grads."""
    x = _as_tensor(x)
    xv = x.values
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
        raise ContractError(f"select_rows: index out of range [0, {xv.shape[0]})")
    out = Tensor(xv[idx])

    def backward(g):
        dx = np.zeros_like(xv)
        np.add.at(dx, idx, g)
        return (dx,)

    _record((x,), (out,), backward)
    return out


def row_mask(x, mask: np.ndarray) -> Tensor:
    """Zero out feature rows where `mask` is False; mask shape = x.shape[:-1]."""
    x = _as_tensor(x)
    if mask.shape != x.values.shape[:-1]:
        raise ShapeError(f"row_mask: mask {mask.shape} != row shape {x.values.shape[:-1]}")
    m = mask[..., None].astype(x.values.dtype)
    out = Tensor(x.values * m)
    _record((x,), (out,), lambda g: (g * m,))
    return out


_ZOH_EPS = 1e-12


def zoh_pair(a, delta, b) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of a diagonal continuous system.

    a: (D, N) diagonal transition entries; delta: (L, D) positive step
    sizes; b: (L, N) input map shared across channels or (L, N, D) per
    channel. Returns abar, bbar of shape (L, D, N) with
    abar = exp(delta*a) and bbar = ((exp(delta*a) - 1)/a) * b, switching to
    the removable-singularity limit delta*b when |a| < 1e-12.
    """
    a, delta, b = _as_tensor(a), _as_tensor(delta), _as_tensor(b)
    av, dv, bv = a.values, delta.values, b.values
    if av.ndim != 2:
        raise ShapeError(f"zoh_pair: a must be (D, N), got {av.shape}")
    d, n = av.shape
    if dv.ndim != 2 or dv.shape[1] != d:
        raise ShapeError(f"zoh_pair: delta must be (L, {d}), got {dv.shape}")
    per_channel = bv.ndim == 3
    length = dv.shape[0]
    if (per_channel and bv.shape != (length, n, d)) or (not per_channel and bv.shape != (length, n)):
        raise ShapeError(f"zoh_pair: b has shape {bv.shape}, expected ({length},{n}) or ({length},{n},{d})")
    if (dv <= 0).any():
        raise ContractError("zoh_pair: step sizes must be strictly positive")

    dcol = dv[:, :, None]
    abar_v = np.exp(dcol * av)               # (L, D, N)
    small = np.abs(av) < _ZOH_EPS            # (D, N)
    if small.any():
        safe_a = np.where(small, 1.0, av)
        phi = np.where(small[None], dcol * np.ones_like(av), (abar_v - 1.0) / safe_a[None])
    else:
        safe_a = av
        phi = (abar_v - 1.0) / av
    bmat = np.swapaxes(bv, 1, 2) if per_channel else bv[:, None, :]  # (L, D|1, N)
    bbar_v = phi * bmat
    abar = Tensor(abar_v)
    bbar = Tensor(bbar_v)

    def backward(g_abar, g_bbar):
        # d(abar)/d(delta) = a*abar, d(abar)/d(a) = delta*abar
        # d(phi)/d(delta) = abar, d(phi)/d(a) = (delta*abar - phi)/a  -> delta^2/2 at a ~ 0
        g_phi = g_bbar * bmat
        ddelta = ((g_abar * av + g_phi) * abar_v).sum(axis=2)
        dphi_da = (dcol * abar_v - phi) / safe_a
        if small.any():
            dphi_da = np.where(small[None], 0.5 * dcol * dcol * np.ones_like(av), dphi_da)
        da = (g_abar * dcol * abar_v + g_phi * dphi_da).sum(axis=0)
        gb_full = g_bbar * phi                # (L, D, N)
        db = np.swapaxes(gb_full, 1, 2) if per_channel else gb_full.sum(axis=1)
        return da, ddelta, db

    _record((a, delta, b), (abar, bbar), backward)
    return abar, bbar


def ssm_scan_batch(abar, bbar, c, x, h0, parallel: bool = False,
                   state_positions: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Batched state recurrence: independent scans over the second axis.

    Shapes: abar, bbar (B, L, D, N); c (B, L, N); x (B, L, D);
    h0 (B, D, N). Returns y (B, L, D) and per-sequence states (B, D, N)
    taken at `state_positions` (default: the last position), which lets
    ragged sequences be right-padded and still carry correct states.
    """
    abar, bbar, c, x, h0 = map(_as_tensor, (abar, bbar, c, x, h0))
    av, bv, cv, xv, h0v = abar.values, bbar.values, c.values, x.values, h0.values
    if av.ndim != 4:
        raise ShapeError(f"ssm_scan_batch: abar must be (B, L, D, N), got {av.shape}")
    bsz, length, d, n = av.shape
    if xv.shape != (bsz, length, d) or cv.shape != (bsz, length, n) or h0v.shape != (bsz, d, n):
        raise ShapeError("ssm_scan_batch: inconsistent operand shapes")

    bx = bv * xv[:, :, :, None]
    if length == 0:
        y = Tensor(np.zeros((bsz, 0, d), dtype=av.dtype))
        hT = Tensor(h0v.copy())
        _record((abar, bbar, c, x, h0), (y, hT), lambda gy, gh: (None, None, None, None, gh))
        return y, hT
    if parallel:
        p, q = affine_scan(np.swapaxes(av, 0, 1), np.swapaxes(bx, 0, 1))
        hs = np.swapaxes(p, 0, 1) * h0v[:, None] + np.swapaxes(q, 0, 1)
    else:
        hs = np.empty_like(av)
        h = h0v
        for i in range(length):
            h = av[:, i] * h + bx[:, i]
            hs[:, i] = h
    yv = np.einsum("bldn,bln->bld", hs, cv)
    y = Tensor(yv)
    rows = np.arange(bsz)
    pos = np.full(bsz, length - 1) if state_positions is None else np.asarray(state_positions)
    if pos.shape != (bsz,) or (pos < 0).any() or (pos >= length).any():
        raise ContractError(f"state_positions out of range for length {length}")
    hT = Tensor(hs[rows, pos].copy())

    def backward(gy, ghT):
        src = gy[:, :, :, None] * cv[:, :, None, :]
        dc = np.einsum("bldn,bld->bln", hs, gy)
        src[rows, pos] += ghT
        dh_all = np.empty_like(src)
        dh = src[:, -1]
        dh_all[:, -1] = dh
        for i in range(length - 2, -1, -1):
            dh = av[:, i + 1] * dh + src[:, i]
            dh_all[:, i] = dh
        da = np.empty_like(dh_all)
        da[:, 0] = dh_all[:, 0] * h0v
        np.multiply(dh_all[:, 1:], hs[:, :-1], out=da[:, 1:])
        db = dh_all * xv[:, :, :, None]
        dx = (dh_all * bv).sum(axis=3)
        dh0 = av[:, 0] * dh_all[:, 0]
        return da, db, dc, dx, dh0

    _record((abar, bbar, c, x, h0), (y, hT), backward)
    return y, hT


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be scalar-valued. The relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|). `coords` optionally limits
    the check to a subset of flat coordinate indices.
    """
    if h <= 0:
        raise ContractError(f"grad_check step must be positive, got {h}")
    probe = Tensor(x.values.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        if loss.values.size != 1:
            raise ContractError("grad_check requires a scalar-valued function")
        tape.backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.values)
    analytic = analytic.reshape(-1)

    flat = x.values.reshape(-1).copy()
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        bumped = flat.copy()
        bumped[i] += h
        f_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] -= 2 * h
        f_minus = f(Tensor(bumped.reshape(x.shape))).item()
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
