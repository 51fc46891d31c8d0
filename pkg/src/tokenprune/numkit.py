"""Small float64 tensor kernel on top of torch autograd.

Every public op checks its output for NaN/Inf and raises ``NumericError``
instead of letting non-finite values propagate into training.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Iterable, Sequence

import torch

DTYPE = torch.float64
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


@contextlib.contextmanager
def precision(name: str):
    """Switch the working dtype for tensors created inside the block.

    float64 is the reference precision; float32 only speeds up long runs.
    """
    global DTYPE
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}")
    prev, DTYPE = DTYPE, PRECISIONS[name]
    try:
        yield DTYPE
    finally:
        DTYPE = prev

Tensor = torch.Tensor


class NumericError(ArithmeticError):
    """A kernel produced or received non-finite values."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DegenerateRowError(NumericError):
    """A softmax row has no key with positive weight."""


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    return t.requires_grad_(requires_grad)


def _finite(t: Tensor, op: str) -> Tensor:
    # NaN and +-Inf both survive a sum, so one reduction checks every entry
    if not math.isfinite(float(t.detach().sum())):
        raise NumericError(f"{op}: non-finite values in output")
    return t


_mac_counters: list[Counter] = []
_tags: list[str] = []


@contextlib.contextmanager
def count_macs():
    """Record multiply-accumulates of every ``matmul`` inside the block, keyed by op tag."""
    counter: Counter = Counter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


@contextlib.contextmanager
def op_tag(name: str):
    _tags.append(name)
    try:
        yield
    finally:
        _tags.pop()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(f"matmul: batch extents {tuple(a.shape)} vs {tuple(b.shape)}") from exc
    out = a @ b
    if _mac_counters:
        macs = out.numel() * a.shape[-1]
        tag = _tags[-1] if _tags else "untagged"
        for counter in _mac_counters:
            counter[tag] += macs
    return _finite(out, "matmul")


def masked_softmax(logits: Tensor, weights: Tensor) -> Tensor:
    """Softmax along the last axis with per-key multiplicative weights.

    ``out = exp(x - rowmax) * w / sum(exp(x - rowmax) * w)``; the row max is
    taken over keys with positive weight, so with an all-ones mask this is
    exactly the ordinary max-subtracted softmax. Differentiable in both
    arguments.
    """
    try:
        torch.broadcast_shapes(logits.shape, weights.shape)
    except RuntimeError as exc:
        raise ShapeError(f"masked_softmax: {tuple(logits.shape)} vs {tuple(weights.shape)}") from exc
    if bool((weights < 0).any()) or bool((weights > 1).any()):
        raise ValueError("masked_softmax: mask weights must lie in [0, 1]")
    live = (weights > 0).expand(torch.broadcast_shapes(logits.shape, weights.shape))
    if not bool(live.any(dim=-1).all()):
        raise DegenerateRowError("masked_softmax: a row has no surviving key")
    neg_inf = torch.tensor(-math.inf, dtype=logits.dtype)
    rowmax = torch.where(live, logits, neg_inf).amax(dim=-1, keepdim=True).detach()
    # dead keys are excluded before exp so a large masked logit cannot overflow into inf * 0
    e = torch.exp(torch.where(live, logits - rowmax, neg_inf)) * weights
    denom = e.sum(dim=-1, keepdim=True)
    if not bool((denom > 0).all()):
        raise DegenerateRowError("masked_softmax: row weights underflowed to zero")
    return _finite(e / denom, "masked_softmax")


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, torch.ones_like(logits))


def _maximum(a: Tensor, b: Tensor) -> Tensor:
    # torch.maximum splits the gradient on ties; route it to the first operand
    return torch.where(a >= b, a, b)


_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "max": _maximum,
}
_UNARY = {
    "sigmoid": torch.sigmoid,
    "silu": torch.nn.functional.silu,
}


def elementwise(op: str, *inputs: Tensor, factor: float | None = None) -> Tensor:
    """Pointwise ops: add, sub, mul, max (binary), sigmoid, silu (unary), scale."""
    if op in _BINARY:
        a, b = inputs
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError as exc:
            raise ShapeError(f"{op}: {tuple(a.shape)} vs {tuple(b.shape)}") from exc
        out = _BINARY[op](a, b)
    elif op in _UNARY:
        (a,) = inputs
        out = _UNARY[op](a)
    elif op == "scale":
        (a,) = inputs
        if factor is None:
            raise ValueError("scale requires a factor")
        out = a * factor
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _finite(out, op)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def maximum(a, b):
    return elementwise("max", a, b)


def sigmoid(a):
    return elementwise("sigmoid", a)


def silu(a):
    return elementwise("silu", a)


def scale(a, factor: float):
    return elementwise("scale", a, factor=factor)


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None:
        if not -t.dim() <= axis < t.dim():
            raise ShapeError(f"reduce: axis {axis} invalid for rank {t.dim()}")
        if t.shape[axis] == 0:
            raise ShapeError("reduce: empty axis")
    elif t.numel() == 0:
        raise ShapeError("reduce: empty tensor")
    if op == "sum":
        out = t.sum() if axis is None else t.sum(dim=axis)
    elif op == "mean":
        out = t.mean() if axis is None else t.mean(dim=axis)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _finite(out, op)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    _finite(loss.detach(), "backward")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    State lives in ``self.moments`` keyed by parameter position, so two
    optimizers fed identical params and grads produce identical updates.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.moments = [(torch.zeros_like(p), torch.zeros_like(p)) for p in self.params]

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for g in grads:
            if g is not None and not bool(torch.isfinite(g).all()):
                raise NumericError("optimizer_step: non-finite gradient")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, (m, v) in zip(self.params, grads, self.moments):
            if self.weight_decay:
                p.mul_(1 - self.lr * self.weight_decay)
            if g is None:
                continue
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.eps), value=-self.lr)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def optimizer_step(params, grads, lr: float, moments=None, t: int = 0, **kw):
    """Functional AdamW step; returns ``(moments, t)`` for the next call."""
    opt = AdamW(params, lr, **kw)
    if moments is not None:
        opt.moments = moments
        opt.t = t
    opt.step(grads)
    return opt.moments, opt.t
