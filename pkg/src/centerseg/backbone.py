"""Small conv encoder-decoder that turns an image into a per-pixel feature map, plus SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class BackboneParams:
    """Conv kernels and biases, in layer order.

    Layout: three 3x3 convs (stride 2, 2, 1 for ``downsample=4``) each followed
    by relu, then a 1x1 conv to ``feature_dim`` channels with no activation.
    """

    kernels: list[Tensor]
    biases: list[Tensor]
    strides: list[int]
    feature_dim: int = 32
    downsample: int = 4

    def __post_init__(self):
        if len(self.kernels) < 3 or len(self.kernels) != len(self.biases):
            raise ContractError("backbone needs >= 3 conv layers with one bias each")

    def parameters(self) -> list[Tensor]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    @property
    def hidden(self) -> int:
        return self.kernels[0].shape[0]


def _strides_for(downsample: int) -> list[int]:
    if downsample not in (1, 2, 4):
        raise ContractError(f"downsample factor must be 1, 2 or 4, got {downsample}")
    n_stride2 = int(math.log2(downsample))
    return [2 if i < n_stride2 else 1 for i in range(3)] + [1]


def init_params(seed: int, feature_dim: int = 32, downsample: int = 4, hidden: int = 16,
                in_channels: int = 3) -> BackboneParams:
    """Glorot-uniform kernels, zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = [
        (hidden, in_channels, 3, 3),
        (hidden, hidden, 3, 3),
        (hidden, hidden, 3, 3),
        (feature_dim, hidden, 1, 1),
    ]
    kernels, biases = [], []
    for cout, cin, k, _ in shapes:
        bound = math.sqrt(6.0 / (cin * k * k + cout * k * k))
        kernels.append(Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True))
        biases.append(Tensor(np.zeros(cout), requires_grad=True))
    return BackboneParams(kernels, biases, _strides_for(downsample), feature_dim, downsample)


def glorot_bound(kernel_shape: tuple[int, ...]) -> float:
    cout, cin, k, _ = kernel_shape
    return math.sqrt(6.0 / (cin * k * k + cout * k * k))


def forward(image, params: BackboneParams) -> Tensor:
    """Map ``[3,H,W]`` (or a batch ``[N,3,H,W]``) to features ``[C,H/d,W/d]``."""
    x = T.as_tensor(image)
    h, w = x.shape[-2:]
    d = params.downsample
    if h % d or w % d:
        raise DimensionError(f"image size {h}x{w} not divisible by downsample factor {d}")
    last = len(params.kernels) - 1
    for i, (k, b, s) in enumerate(zip(params.kernels, params.biases, params.strides)):
        x = T.conv2d(x, k, b, stride=s, padding="same")
        if i < last:
            x = T.relu(x)
    return x


@dataclass
class SGD:
    """Classic momentum SGD: ``v <- 0.9 v + g + wd p``; ``p <- p - lr v``."""

    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    buffers: list[np.ndarray] = field(default_factory=list)

    def init(self, params: list[Tensor]) -> "SGD":
        self.buffers = [np.zeros_like(p.data) for p in params]
        return self


def sgd_step(params: list[Tensor], state: SGD) -> None:
    """Apply one in-place update using each parameter's ``.grad``."""
    if not state.buffers:
        state.init(params)
    if len(state.buffers) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    for p, v in zip(params, state.buffers):
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient; call backward() first")
        if v.shape != p.data.shape:
            raise ContractError("sgd_step: momentum buffer shape mismatch")
        v *= state.momentum
        v += p.grad
        v += state.weight_decay * p.data
        p.data -= (state.lr * v).astype(p.data.dtype, copy=False)


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
