"""Dense layers and perceptrons on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 bias: bool = True, name: str = "linear"):
        self.weight = ad.parameter(glorot_uniform(rng, fan_in, fan_out), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros((1, fan_out)), name=f"{name}.bias") if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out

    def parameters(self) -> dict:
        params = {self.weight.name: self.weight}
        if self.bias is not None:
            params[self.bias.name] = self.bias
        return params


class MLP:
    """Stack of Linear layers; ``activations[k]`` follows layer k."""

    def __init__(self, sizes, activations, rng: np.random.Generator, name: str = "mlp"):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.layers = [Linear(sizes[k], sizes[k + 1], rng, name=f"{name}.{k}")
                       for k in range(len(sizes) - 1)]
        self.activations = list(activations)

    def __call__(self, x, return_hidden: bool = False):
        hidden = []
        for layer, act in zip(self.layers, self.activations):
            x = ACTIVATIONS[act](layer(x))
            hidden.append(x)
        return (x, hidden) if return_hidden else x

    def parameters(self) -> dict:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params
