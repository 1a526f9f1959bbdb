from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MissingGradient, NumericError


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")
    return arr


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named trainable parameters plus their optimizer moments."""

    params: dict[str, Parameter] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, param: Parameter) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradient(f"parameter {name!r} has no gradient")
            out[name] = p.grad
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())


class Module:
    """Layer with an explicit forward/backward pair.

    ``forward`` caches whatever ``backward`` needs; ``backward`` takes the
    gradient of the output, accumulates parameter gradients and returns the
    gradient of the input.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for attr, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + attr, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{attr}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{attr}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy
