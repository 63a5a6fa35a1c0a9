"""Parameter containers and the Conv-BN-ReLU building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..volgrid import BatchNormState, ConvSpec, Tensor, batch_norm3d, conv3d, relu


class Module:
    """Tracks parameters, sub-modules and batch-norm states by attribute name."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
        for name, child in self._children.items():
            yield from child.named_bn_states(prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        for _, st in self.named_bn_states():
            if st.initialized:
                st.mean = st.mean.astype(dtype)
                st.var = st.var.astype(dtype)
        return self

    def init_running_stats(self) -> None:
        """Give every batch-norm layer identity statistics (mean 0, var 1)."""
        dt = self.parameters()[0].dtype if self.parameters() else np.float32
        for _, st in self.named_bn_states():
            st.reset(dt)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1, bias: bool = True,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        super().__init__()
        self.spec = ConvSpec(cin, cout, kernel, stride, "same")
        rng = rng or np.random.default_rng(0)
        fan_in = cin * int(np.prod(self.spec.kernel))
        w = he_normal(rng, (cout, cin) + self.spec.kernel, fan_in) * np.float32(init_scale)
        self.weight = Tensor(w, requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.state = BatchNormState(channels, momentum, eps)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm3d(x, self.gamma, self.beta, self.state, train)


class ConvBN(Module):
    """Bias-free convolution followed by batch norm, with optional ReLU."""

    def __init__(self, cin, cout, kernel=3, stride=1, act: bool = True, rng=None):
        super().__init__()
        self.conv = Conv3d(cin, cout, kernel, stride, bias=False, rng=rng)
        self.bn = BatchNorm3d(cout)
        self.act = act

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = self.bn(self.conv(x), train)
        return relu(y) if self.act else y


class ResBlock(Module):
    """Two Conv-BN-ReLU layers plus an identity (or 1x1x1 projected) skip.

    With ``linear_output`` the second layer is a biased conv without BN/ReLU and
    the skip is a biased 1x1x1 conv; used for the network head, where
    ``hidden`` keeps the inner width above the single output channel and
    ``output_scale`` shrinks the initial output so training starts near zero.
    """

    def __init__(self, cin: int, cout: int, rng=None, linear_output: bool = False, hidden: int | None = None,
                 output_scale: float = 1.0):
        super().__init__()
        self.linear_output = linear_output
        hidden = hidden or cout
        self.layer1 = ConvBN(cin, hidden, rng=rng)
        if linear_output:
            self.layer2 = Conv3d(hidden, cout, 3, bias=True, rng=rng, init_scale=output_scale)
            self.skip = Conv3d(cin, cout, 1, bias=True, rng=rng, init_scale=output_scale)
        else:
            self.layer2 = ConvBN(hidden, cout, rng=rng)
            self.skip = ConvBN(cin, cout, kernel=1, act=False, rng=rng) if cin != cout else None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = self.layer1(x, train)
        if self.linear_output:
            return self.layer2(y) + self.skip(x)
        y = self.layer2(y, train)
        return y + (x if self.skip is None else self.skip(x, train))


class FCNModule(Module):
    """A stack of ResBlocks; the first one may change the channel count."""

    def __init__(self, cin: int, cout: int, blocks: int, rng=None):
        super().__init__()
        self.blocks = ModuleList(ResBlock(cin if i == 0 else cout, cout, rng=rng) for i in range(blocks))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        for b in self.blocks:
            x = b(x, train)
        return x
