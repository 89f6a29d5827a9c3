"""Module base class and the stateless/parametric layers built on autodiff."""

import logging
from typing import Dict, Iterator, List, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """Leaf tensor that a Module registers as learnable."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # ------- registration -------
    def register_buffer(self, name: str, value: np.ndarray) -> None:
        buffers = self.__dict__.setdefault("_buffer_names", [])
        if name not in buffers:
            buffers.append(name)
        setattr(self, name, np.asarray(value, dtype=np.float64))

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffer_names", []):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    # ------- modes -------
    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> None:
        """Point every stochastic layer at ``rng``."""
        for module in self.modules():
            if isinstance(module, Dropout):
                module.rng = rng

    # ------- state -------
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, target in targets.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
            target[...] = value


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3, stride: int = 1):
        self.stride = stride
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, stride=self.stride)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ad.batchnorm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.training, self.rng)


class MaxPool1d(Module):
    def __init__(self, window: int = 2, stride: int = 2):
        self.window = window
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ad.maxpool1d(x, self.window, self.stride)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.3):
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, self.slope)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.flatten(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
