"""Bilinear resizing and adaptive pooling over (N, C, H, W) tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .tensor import Tensor, record

Size = Tuple[int, int]


@dataclass(frozen=True)
class ScaleSet:
    """Ordered training resolutions; index i selects the i-th S-BN bank."""

    scales: Tuple[Size, ...]

    def __init__(self, scales: Sequence, strict: bool = False, downsample_factor: int = 4):
        sizes = tuple(_as_size(s) for s in scales)
        if not sizes:
            raise ValueError("a scale set needs at least one scale")
        for h, w in sizes:
            if h <= 0 or w <= 0:
                raise ValueError(f"scale dims must be positive, got {(h, w)}")
        if len(set(sizes)) != len(sizes):
            raise ValueError(f"scales must be pairwise distinct, got {list(sizes)}")
        if strict:
            for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
                if (h0 - h1) % downsample_factor or (w0 - w1) % downsample_factor:
                    raise ValueError(
                        f"scales {(h0, w0)} and {(h1, w1)} are not spaced by a multiple of "
                        f"the downsample factor {downsample_factor}")
        object.__setattr__(self, "scales", sizes)

    @property
    def M(self) -> int:
        return len(self.scales)

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, i) -> Size:
        return self.scales[i]

    def index_of(self, size) -> int:
        size = _as_size(size)
        try:
            return self.scales.index(size)
        except ValueError:
            raise KeyError(
                f"scale {size[0]}x{size[1]} is not registered; registered scales: "
                + ", ".join(f"{h}x{w}" for h, w in self.scales)) from None

    def nearest_index(self, size) -> int:
        h, w = _as_size(size)
        dists = [abs(h - sh) + abs(w - sw) for sh, sw in self.scales]
        return int(np.argmin(dists))

    def __str__(self) -> str:
        return ",".join(f"{h}x{w}" if h != w else str(h) for h, w in self.scales)


def _as_size(s) -> Size:
    if isinstance(s, (int, np.integer)):
        return int(s), int(s)
    h, w = s
    return int(h), int(w)


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights with half-pixel centres and edge clamping."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for d in range(dst):
        x = min(max((d + 0.5) * scale - 0.5, 0.0), src - 1.0)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, src - 1)
        frac = x - x0
        m[d, x0] += 1.0 - frac
        m[d, x1] += frac
    return m


def bilinear_resize(x: Tensor, target) -> Tensor:
    """Resize the spatial dims of ``x`` to ``target`` (align-corners false)."""
    th, tw = _as_size(target)
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {(th, tw)}")
    n, c, h, w = x.shape
    if (h, w) == (th, tw):
        return record(x.data.copy(), (x,), lambda g: (g,))
    dtype = x.data.dtype
    ry = _bilinear_matrix(h, th).astype(dtype)
    rx = _bilinear_matrix(w, tw).astype(dtype)
    out = ry @ x.data @ rx.T
    return record(out, (x,), lambda g: (ry.T @ g @ rx,))


def _windows(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def _avg_matrix(size: int, out: int) -> np.ndarray:
    m = np.zeros((out, size), dtype=np.float64)
    for i, (a, b) in enumerate(_windows(size, out)):
        m[i, a:b] = 1.0 / (b - a)
    return m


def _check_pool(x: Tensor, out) -> Size:
    oh, ow = _as_size(out)
    h, w = x.shape[2:]
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ValueError(f"adaptive pool output {(oh, ow)} must fit inside input {(h, w)}")
    return oh, ow


def adaptive_avg_pool(x: Tensor, out=(1, 1)) -> Tensor:
    oh, ow = _check_pool(x, out)
    n, c, h, w = x.shape
    if (oh, ow) == (h, w):
        return record(x.data.copy(), (x,), lambda g: (g,))
    if (oh, ow) == (1, 1):
        out_data = x.data.mean(axis=(2, 3), keepdims=True)
        inv = x.data.dtype.type(1.0 / (h * w))
        return record(out_data, (x,),
                      lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))
    py = _avg_matrix(h, oh).astype(x.data.dtype)
    px = _avg_matrix(w, ow).astype(x.data.dtype)
    return record(py @ x.data @ px.T, (x,), lambda g: (py.T @ g @ px,))


def adaptive_max_pool(x: Tensor, out=(1, 1)) -> Tensor:
    """Window max; the gradient goes to the first maximal element of each window."""
    oh, ow = _check_pool(x, out)
    n, c, h, w = x.shape
    out_data = np.empty((n, c, oh, ow), dtype=x.data.dtype)
    # Flat (row-major within window) argmax per window, mapped back to (y, x).
    ys = np.empty((n, c, oh, ow), dtype=np.intp)
    xs = np.empty((n, c, oh, ow), dtype=np.intp)
    for i, (ya, yb) in enumerate(_windows(h, oh)):
        for j, (xa, xb) in enumerate(_windows(w, ow)):
            win = x.data[:, :, ya:yb, xa:xb].reshape(n, c, -1)
            k = win.argmax(axis=2)
            out_data[:, :, i, j] = np.take_along_axis(win, k[..., None], axis=2)[..., 0]
            ys[:, :, i, j] = ya + k // (xb - xa)
            xs[:, :, i, j] = xa + k % (xb - xa)

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        for i in range(oh):
            for j in range(ow):
                np.add.at(gx, (ni, ci, ys[:, :, i, j], xs[:, :, i, j]), g[:, :, i, j])
        return (gx,)

    return record(out_data, (x,), grad_fn)


def adaptive_pool(x: Tensor, out=(1, 1), kind: str = "avg") -> Tensor:
    if kind == "avg":
        return adaptive_avg_pool(x, out)
    if kind == "max":
        return adaptive_max_pool(x, out)
    raise ValueError(f"unknown pooling kind {kind!r}; expected 'avg' or 'max'")
