"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :func:`backward` replays them in reverse and accumulates gradients into
every leaf tensor that requires them (parameters, or inputs flagged by the
caller).  Outside a tape, operations run as plain numpy and record nothing.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_active_tapes: list["Tape"] = []


class Tensor:
    """A float array (float32 by default) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


class Parameter(Tensor):
    """A trainable leaf tensor; ``name`` is filled in by the owning module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` (or :func:`backward`) exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; run a fresh forward pass")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        node = loss._node
        if node is None or node.tape is not self:
            if loss.requires_grad:
                raise ValueError("loss was not produced through this tape")
            self.nodes.clear()
            return

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None and t._node.tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype)
                else:
                    t.grad = t.grad + gi
        # Drop graph references so activations can be freed.
        self.nodes.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad leaf that ``loss`` depends on."""
    tape.backward(loss)


def grad_enabled() -> bool:
    return bool(_active_tapes)


def record(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    if _active_tapes and any(t.requires_grad for t in inputs):
        tape = _active_tapes[-1]
        out.requires_grad = True
        out._node = _Node(out, tuple(inputs), backward_fn, tape)
        tape.nodes.append(out._node)
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def tsum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return record(
        np.asarray(a.data.sum(), dtype=dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype),),
    )


def tmean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.data.dtype, a.size
    return record(
        np.asarray(a.data.mean(), dtype=dtype),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).astype(dtype),),
    )


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum_i weights[i] * terms[i]`` for scalar terms, as one recorded op."""
    if len(terms) != len(weights):
        raise ValueError(f"{len(terms)} terms but {len(weights)} weights")
    dtype = terms[0].data.dtype
    w = [dtype.type(x) for x in weights]
    total = w[0] * terms[0].data
    for wi, t in zip(w[1:], terms[1:]):
        total = total + wi * t.data
    return record(
        np.asarray(total, dtype=dtype),
        tuple(terms),
        lambda g: tuple(wi * g for wi in w),
    )


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``out[n, k] = sum_d x[n, d] * weight[k, d] + bias[k]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return record(out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return record(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) via a single im2col GEMM."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols: (C, kh, kw, N, Ho, Wo) so one GEMM covers the whole batch.
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    wm = weight.data.reshape(cout, -1)
    out = wm @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def grad_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols2.T).reshape(weight.shape)
        gcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        gx = np.ascontiguousarray(gxp)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, grad_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return record(loss, (logits,), grad_fn)


def accuracy(logits: np.ndarray, labels) -> float:
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())
