"""Parameter registry and the shared-mlp building block."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, ValidationError
from .core import DiffArray, batch_norm, leaky_relu, matmul


@dataclass(frozen=True)
class BlockOptions:
    slope: float = 0.2
    bn_momentum: float = 0.99
    bn_eps: float = 1e-6


class ParamStore:
    """Named registry of trainable arrays plus non-trainable buffers.

    Buffers hold batch-norm running statistics; they are saved in checkpoints
    but excluded from parameter counts and optimizer updates.
    """

    def __init__(self):
        self.params: "OrderedDict[str, DiffArray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add_param(self, name: str, data: np.ndarray) -> DiffArray:
        if name in self.params or name in self.buffers:
            raise ValidationError(f"duplicate parameter name {name!r}")
        arr = DiffArray(data, requires_grad=True, name=name)
        self.params[name] = arr
        return arr

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ValidationError(f"duplicate buffer name {name!r}")
        buf = np.array(data, dtype=np.float64)
        self.buffers[name] = buf
        return buf

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Every named array (parameters then buffers) as plain numpy."""
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state: dict) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        unknown = set(state) - expected
        if missing or unknown:
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for name, arr in state.items():
            target = self.params[name].data if name in self.params else self.buffers[name]
            if target.shape != tuple(arr.shape):
                raise DimensionError(f"{name}: stored shape {tuple(arr.shape)} != model shape {target.shape}")
            target[...] = arr


def count_parameters(store: ParamStore) -> int:
    return int(sum(p.data.size for p in store.params.values()))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map over the trailing (channel) axis."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.c_in, self.c_out = c_in, c_out
        self.weight = store.add_param(f"{name}.weight", glorot_uniform(rng, c_in, c_out))
        self.bias = store.add_param(f"{name}.bias", np.zeros(c_out)) if bias else None

    def __call__(self, x: DiffArray) -> DiffArray:
        if x.shape[-1] != self.c_in:
            raise DimensionError(f"linear expects {self.c_in} input channels, got shape {x.shape}")
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class SharedMLP:
    """Pointwise linear -> batch norm -> leaky ReLU.

    The batch-norm shift plays the role of the bias, so the linear map is
    bias-free.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, opts: BlockOptions = BlockOptions()):
        self.opts = opts
        self.linear = Linear(store, f"{name}.linear", c_in, c_out, rng, bias=False)
        self.gamma = store.add_param(f"{name}.bn.gamma", np.ones(c_out))
        self.beta = store.add_param(f"{name}.bn.beta", np.zeros(c_out))
        self.running_mean = store.add_buffer(f"{name}.bn.running_mean", np.zeros(c_out))
        self.running_var = store.add_buffer(f"{name}.bn.running_var", np.ones(c_out))

    @property
    def c_out(self) -> int:
        return self.linear.c_out

    def __call__(self, x: DiffArray, train: bool) -> DiffArray:
        y = batch_norm(self.linear(x), self.gamma, self.beta, self.running_mean,
                       self.running_var, train, self.opts.bn_momentum, self.opts.bn_eps)
        return leaky_relu(y, self.opts.slope)
