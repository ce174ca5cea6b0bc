"""Parameter containers shared by every network component."""
import numpy as np

from src.engine import ops
from src.engine.tensor import Parameter
from src.utils.errors import CheckpointError


class Module:
    """Walks attributes to find parameters and sub-modules.

    Parameter names are dotted attribute paths (``encoder.stages.0.weight``)
    and are refreshed on every ``named_parameters`` call.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{index}", item

    def named_parameters(self, prefix=''):
        named = []
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                named.append((path, value))
            else:
                named.extend(value.named_parameters(prefix=path + '.'))
        return named

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        named = dict(self.named_parameters())
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise CheckpointError("checkpoint does not match the model",
                                  missing=missing[:10], unexpected=unexpected[:10])
        for name, p in named.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.data.dtype).copy()

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))


def uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(uniform(rng, in_features, (out_features,))) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(uniform(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(uniform(rng, fan_in, (out_channels,)))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, channels):
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, in_features, hidden, out_features, rng):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))
