"""Named parameter collections and the Adam optimizer."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class ParameterSet:
    """Ordered name -> Tensor map of trainable weights, plus non-trainable buffers.

    Buffers hold batch-norm running statistics; they are checkpointed but never
    touched by the optimizer.
    """

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.adam = AdamState()

    def add(self, name: str, value, trainable: bool = True):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        if trainable:
            self.params[name] = Tensor(value, requires_grad=True)
        else:
            self.buffers[name] = np.ascontiguousarray(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Every tensor (parameters then buffers) in stable order."""
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state: dict):
        for name, arr in state.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise KeyError(f"unexpected tensor {name!r} in state")
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr

    def checksum(self) -> int:
        crc = 0
        for name, arr in self.state().items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(arr).tobytes(), crc)
        return crc


def adam_step(params: ParameterSet, lr: float):
    """One bias-corrected Adam update. Gradients are left in place; call ``zero_grad`` separately."""
    st = params.adam
    st.step += 1
    c1 = 1 - st.beta1**st.step
    c2 = 1 - st.beta2**st.step
    for name, p in params.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = st.m.setdefault(name, np.zeros_like(p.data))
        v = st.v.setdefault(name, np.zeros_like(p.data))
        m *= st.beta1
        m += (1 - st.beta1) * g
        v *= st.beta2
        v += (1 - st.beta2) * g * g
        update = (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype)
        p.data -= update


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
