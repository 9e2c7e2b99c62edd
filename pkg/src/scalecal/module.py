"""Minimal module tree: named parameters, named buffers, train/eval mode."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Parameter, Tensor, conv2d, linear


class Module:
    """Attribute-registered container, walked in definition order for naming."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def _local_parameters(self) -> list[tuple[str, Parameter]]:
        """Parameters owned directly by this module; overridden by S-BN."""
        return list(self._params.items())

    def _local_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in self._buffers]

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m._named_modules(prefix + name + ".")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for prefix, m in self._named_modules():
            for name, p in m._local_parameters():
                yield prefix + name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, m in self._named_modules():
            for name, b in m._local_buffers():
                yield prefix + name, b

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent array (parameters, then buffers) under its unique name."""
        items = [(n, p.data) for n, p in self.named_parameters()]
        items.extend(self.named_buffers())
        return items

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into existing storage in place; names and shapes must match."""
        items = dict(self.state_items())
        missing = sorted(set(items) - set(arrays))
        unexpected = sorted(set(arrays) - set(items))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, dst in items.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def name_parameters(self) -> None:
        """Stamp each Parameter with its dotted path and check uniqueness."""
        seen = set()
        for name, _ in self.state_items():
            if name in seen:
                raise ValueError(f"duplicate state name {name}")
            seen.add(name)
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(din)
        self.weight = Parameter(rng.uniform(-bound, bound, (dout, din)))
        self.bias = Parameter(rng.uniform(-bound, bound, dout))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"classifier expects (N, {self.weight.shape[1]}) features, got {x.shape}")
        return linear(x, self.weight, self.bias)
