"""Layers built on the autodiff engine: conv, batch norm, dense, NIN blocks.

Weights use fan-in-scaled Gaussian init (std sqrt(2/fan_in)); batch-norm
affine starts at gamma=1, beta=0 and all biases at 0.  Parameters carry a
``decay`` flag so the optimizer can exempt normalization and bias terms
from weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Param:
    """One learnable tensor plus its weight-decay eligibility."""

    name: str
    tensor: Tensor
    decay: bool


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Conv2d:
    def __init__(self, name: str, cin: int, cout: int, ksize: int, stride: int,
                 padding: int, rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = cin * ksize * ksize
        self.weight = Tensor(he_normal(rng, (cout, cin, ksize, ksize), fan_in, dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True,
                           name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self) -> list[Param]:
        return [Param(self.weight.name, self.weight, True),
                Param(self.bias.name, self.bias, False)]

    def state(self) -> dict[str, np.ndarray]:
        return {}


class BatchNorm:
    """Batch normalization over (N,H,W) for 4-d input or over N for 2-d."""

    def __init__(self, name: str, channels: int, dtype=np.float64,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        fn = ad.batch_norm2d if x.ndim == 4 else ad.batch_norm1d
        return fn(x, self.gamma, self.beta, self.running_mean, self.running_var,
                  training, self.eps, self.momentum)

    def params(self) -> list[Param]:
        return [Param(self.gamma.name, self.gamma, False),
                Param(self.beta.name, self.beta, False)]

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class Dense:
    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.name = name
        self.weight = Tensor(he_normal(rng, (din, dout), din, dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True,
                           name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)

    def params(self) -> list[Param]:
        return [Param(self.weight.name, self.weight, True),
                Param(self.bias.name, self.bias, False)]

    def state(self) -> dict[str, np.ndarray]:
        return {}


class ConvBlock:
    """NIN-style block: a spatial lead conv then two 1x1 convs, each followed
    by batch norm and ReLU.

    The lead conv is 3x3 (pad 1) at stride 1 and 4x4 (pad 1) at stride 2; the
    even kernel keeps (H + 2p - K)/stride + 1 an exact integer on the
    power-of-two image sizes used here.
    """

    def __init__(self, name: str, cin: int, cout: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.name = name
        lead_ksize = 4 if stride == 2 else 3
        self.convs = [
            Conv2d(f"{name}.conv1", cin, cout, lead_ksize, stride, 1, rng, dtype),
            Conv2d(f"{name}.conv2", cout, cout, 1, 1, 0, rng, dtype),
            Conv2d(f"{name}.conv3", cout, cout, 1, 1, 0, rng, dtype),
        ]
        self.bns = [BatchNorm(f"{name}.bn{i + 1}", cout, dtype) for i in range(3)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = bn(conv(x), training).relu()
        return x

    def params(self) -> list[Param]:
        out: list[Param] = []
        for conv, bn in zip(self.convs, self.bns):
            out.extend(conv.params())
            out.extend(bn.params())
        return out

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bn in self.bns:
            out.update(bn.state())
        return out


def collect_params(*layers) -> list[Param]:
    out: list[Param] = []
    for layer in layers:
        out.extend(layer.params())
    return out


def collect_state(*layers) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for layer in layers:
        out.update(layer.state())
    return out
