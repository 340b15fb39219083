"""Parameter groups and the Adam update."""
from __future__ import annotations

import numpy as np


class OptimizerError(FloatingPointError):
    pass


class ParamGroup:
    """Named parameter tensors of a set of layers plus their Adam state.

    Tensors are shared with the owning layers, so in-place updates here are
    visible to the layers immediately.
    """

    def __init__(self, name, layers):
        self.name = name
        self.layers = [l for l in layers if l.params or l.buffers]
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def named_params(self):
        for layer in self.layers:
            for k, p in layer.params.items():
                yield f"{layer.name}/{k}", p

    def named_buffers(self):
        for layer in self.layers:
            for k, b in layer.buffers.items():
                yield f"{layer.name}/{k}", b

    def named_grads(self):
        for layer in self.layers:
            for k in layer.params:
                yield f"{layer.name}/{k}", layer.grads.get(k)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def size(self):
        return sum(p.size for _, p in self.named_params())

    def state_dict(self):
        """Copies of parameters and buffers keyed by full name."""
        out = {k: v.copy() for k, v in self.named_params()}
        out.update({k: v.copy() for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state):
        for k, v in list(self.named_params()) + list(self.named_buffers()):
            v[...] = state[k]


def adam_step(group: ParamGroup, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, grads=None):
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to the gradients the layers stored during backward.
    """
    grads = dict(group.named_grads()) if grads is None else grads
    params = dict(group.named_params())
    for name, g in grads.items():
        if g is None:
            raise OptimizerError(f"no gradient for {name}")
        if g.shape != params[name].shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {name}")
    group.step_count += 1
    t = group.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = group.m.setdefault(name, np.zeros_like(p))
        v = group.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
