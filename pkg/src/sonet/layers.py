"""Parameter containers built on the autodiff ops."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ShapeMismatchError


class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{name}.running_mean", value, "running_mean"
                yield f"{prefix}{name}.running_var", value, "running_var"
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def state_dict(self) -> dict:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, state, attr in self.named_buffers():
            out[name] = getattr(state, attr)
        return out

    def load_state_dict(self, state: dict, strict: bool = True, prefix: str = "") -> list:
        """Copy matching arrays in; returns the names that were loaded.

        Raises ShapeMismatchError naming every offending entry: unknown names
        (strict only), missing names (strict only) and shape disagreements.
        """
        own = {name: ("param", p) for name, p in self.named_parameters(prefix)}
        own.update({name: ("buffer", (s, attr)) for name, s, attr in self.named_buffers(prefix)})
        problems = []
        for name, arr in state.items():
            if name not in own:
                if strict:
                    problems.append(f"{name} (unknown)")
                continue
            kind, target = own[name]
            cur = target.data if kind == "param" else getattr(*target)
            if cur.shape != np.shape(arr):
                problems.append(f"{name} (expected {cur.shape}, got {np.shape(arr)})")
        if strict:
            problems += [f"{name} (missing)" for name in own if name not in state]
        if problems:
            raise ShapeMismatchError("checkpoint does not fit model: " + ", ".join(problems))
        loaded = []
        for name, arr in state.items():
            if name not in own:
                continue
            kind, target = own[name]
            if kind == "param":
                target.data[...] = arr
            else:
                setattr(target[0], target[1], np.array(arr, dtype=getattr(*target).dtype))
            loaded.append(name)
        return loaded

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / fan_in)
        self.W = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out, dtype), requires_grad=True)

    def __call__(self, x):
        return ad.dense(x, self.W, self.b)


class BatchNorm(Module):
    def __init__(self, features: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(features, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype), requires_grad=True)
        self.state = BatchNormState.create(features, dtype)

    def __call__(self, x):
        return ad.batchnorm(x, self.gamma, self.beta, self.state, self.training)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, size: int, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / (c_in * size * size))
        self.K = Tensor(rng.uniform(-bound, bound, (c_out, c_in, size, size)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.K, self.b)


class FCBlock(Module):
    """Shared fully connected layer followed by batch norm and ReLU."""

    def __init__(self, fan_in, fan_out, rng, dtype=np.float32):
        self.fc = Linear(fan_in, fan_out, rng, dtype)
        self.bn = BatchNorm(fan_out, dtype)

    def __call__(self, x):
        return ad.relu(self.bn(self.fc(x)))


class ConvBlock(Module):
    def __init__(self, c_in, c_out, size, rng, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, size, rng, dtype)
        self.bn = BatchNorm(c_out, dtype)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))


class SharedMLP(Module):
    def __init__(self, widths, rng, dtype=np.float32):
        widths = list(widths)
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be >= 1")
        self.layers = [FCBlock(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def out_dim(self):
        return self.layers[-1].fc.W.shape[1] if self.layers else None

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
