"""Shared neural building blocks: MLPs, strided conv stacks, recurrent cells.

All parameters are plain ``Tensor`` leaves; containers expose
``named_parameters`` so checkpoints can address every buffer by path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = ("relu", "tanh", "none")


@dataclass
class PosEncConfig:
    """Sinusoidal positional-encoding settings (k frequencies, base pi)."""

    num_frequencies: int = 6
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return ad.posenc_dim(input_dim, self.num_frequencies, self.include_input)

    def apply(self, x: Tensor) -> Tensor:
        if self.num_frequencies == 0:
            return x if isinstance(x, Tensor) else Tensor(x)
        return ad.positional_encode(x, self.num_frequencies, self.include_input)


@dataclass
class MlpParams:
    """Fully-connected stack: list of (weight, bias) with one activation kind."""

    layers: list[tuple[Tensor, Tensor]]
    activation: str = "relu"

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def named_parameters(self, prefix: str = "mlp") -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]


def mlp_init(
    dims: Sequence[int],
    activation: str = "relu",
    rng: np.random.Generator | None = None,
    final_zero: bool = False,
    name: str = "mlp",
) -> MlpParams:
    """He/Xavier-initialised MLP; ``final_zero`` zeroes the output layer."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = rng or np.random.default_rng(0)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if last and final_zero:
            w = np.zeros((fan_in, fan_out))
        elif activation == "relu":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(
            (
                Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"),
                Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.{i}.bias"),
            )
        )
    return MlpParams(layers=layers, activation=activation)


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    """Forward pass; hidden layers use the configured activation, output is linear."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    n = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(
                f"mlp layer {i} expects input dim {w.shape[0]}, got {h.shape[-1]}"
            )
        h = ad.matmul(h, w) + b
        if i < n - 1:
            if params.activation == "relu":
                h = ad.relu(h)
            elif params.activation == "tanh":
                h = ad.tanh(h)
    return h


@dataclass
class Conv2dParams:
    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    pad: int = 0

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def conv2d_init(
    in_ch: int,
    out_ch: int,
    kernel: int = 3,
    stride: int = 2,
    pad: int = 1,
    rng: np.random.Generator | None = None,
    name: str = "conv",
) -> Conv2dParams:
    rng = rng or np.random.default_rng(0)
    fan_in = in_ch * kernel * kernel
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
    return Conv2dParams(
        weight=Tensor(w, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias"),
        stride=stride,
        pad=pad,
    )


def conv2d_forward(p: Conv2dParams, x: Tensor) -> Tensor:
    return ad.conv2d(x, p.weight, p.bias, stride=p.stride, pad=p.pad)


@dataclass
class RecurrentCell:
    """Elman-style tanh cell: h' = tanh(W h + U x + b)."""

    w_hidden: Tensor  # (h, h)
    w_input: Tensor  # (in, h)
    bias: Tensor  # (h,)

    def parameters(self) -> list[Tensor]:
        return [self.w_hidden, self.w_input, self.bias]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_hidden": self.w_hidden,
            f"{prefix}.w_input": self.w_input,
            f"{prefix}.bias": self.bias,
        }

    def step(self, h: Tensor, x: Tensor) -> Tensor:
        return ad.tanh(ad.matmul(h, self.w_hidden) + ad.matmul(x, self.w_input) + self.bias)


def recurrent_cell_init(
    input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None, name: str = "cell"
) -> RecurrentCell:
    rng = rng or np.random.default_rng(0)
    scale_h = 1.0 / np.sqrt(hidden_dim)
    scale_i = 1.0 / np.sqrt(input_dim)
    return RecurrentCell(
        w_hidden=Tensor(rng.uniform(-scale_h, scale_h, (hidden_dim, hidden_dim)), requires_grad=True, name=f"{name}.w_hidden"),
        w_input=Tensor(rng.uniform(-scale_i, scale_i, (input_dim, hidden_dim)), requires_grad=True, name=f"{name}.w_input"),
        bias=Tensor(np.zeros(hidden_dim), requires_grad=True, name=f"{name}.bias"),
    )
