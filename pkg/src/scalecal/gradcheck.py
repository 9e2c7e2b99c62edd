"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, mul, tsum


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-3,
                    probes: int = 20, seed: int = 0,
                    value_fn: Optional[Callable[[], float]] = None) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over probed elements.

    ``loss_fn`` must rebuild the scalar loss from the current ``leaves`` data.
    ``value_fn``, if given, evaluates the same loss for the finite differences
    (e.g. with a float64 final reduction).  Up to ``probes`` randomly chosen
    elements of each leaf are perturbed.
    """
    value_fn = value_fn or (lambda: float(loss_fn().data))
    rng = np.random.default_rng(seed)
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for k in picks:
            orig = flat[k]
            hi, lo = orig + t.data.dtype.type(h), orig - t.data.dtype.type(h)
            flat[k] = hi
            up = value_fn()
            flat[k] = lo
            down = value_fn()
            flat[k] = orig
            # Divide by the step actually taken after rounding to the leaf dtype.
            central = (up - down) / (float(hi) - float(lo))
            err = abs(analytic.reshape(-1)[k] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst


def op_gradient_check(op: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3,
                      probes: int = 20, seed: int = 0) -> float:
    """Gradient check of ``op`` through the scalar ``sum(op(*inputs) * R)``.

    ``R`` is a fixed random projection scaled so the loss stays O(1).
    """
    leaves = [Tensor(a) for a in arrays]
    out_shape = op(*leaves).shape
    n = int(np.prod(out_shape)) or 1
    r = np.random.default_rng(seed + 1).standard_normal(out_shape) / np.sqrt(n)
    proj = Tensor(r)
    return check_gradients(
        lambda: tsum(mul(op(*leaves), proj)), leaves, h, probes, seed,
        value_fn=lambda: float(np.sum(op(*leaves).data.astype(np.float64) * r)),
    )


def away_from_zero(x: np.ndarray, margin: float = 0.01) -> np.ndarray:
    """Push values out of ``(-margin, margin)`` so kinks sit far from the FD stencil."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)
