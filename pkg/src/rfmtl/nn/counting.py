"""FLOP and parameter accounting from shapes alone.

FLOP convention: one multiply-accumulate counts as one FLOP. Conv2D costs
``N_out * H_out * W_out * kh * kw * depth``; Dense costs ``in * out``; every
other layer kind is free.
"""
from __future__ import annotations

from dataclasses import dataclass

from .layers import LayerSpec, output_shape

FLOP_CONVENTION = "1 multiply-accumulate = 1 FLOP"


@dataclass(frozen=True)
class ParamCount:
    weights: int = 0  # conv/dense kernels (the biasless count)
    biases: int = 0
    bn_trainable: int = 0  # gamma, beta
    bn_running: int = 0  # moving mean/variance, not trainable

    @property
    def biasless(self):
        return self.weights

    @property
    def trainable(self):
        return self.weights + self.biases + self.bn_trainable

    @property
    def total(self):
        return self.trainable + self.bn_running

    def __add__(self, other):
        return ParamCount(self.weights + other.weights, self.biases + other.biases,
                          self.bn_trainable + other.bn_trainable, self.bn_running + other.bn_running)

    def as_dict(self):
        return {"biasless": self.biasless, "trainable": self.trainable, "total": self.total,
                "weights": self.weights, "biases": self.biases,
                "bn_trainable": self.bn_trainable, "bn_running": self.bn_running}


def count_flops(spec: LayerSpec, in_shape) -> int:
    in_shape = tuple(int(v) for v in in_shape)
    out = output_shape(spec, in_shape)
    if spec.kind == "Conv2D":
        depth = in_shape[2]
        Ho, Wo, N = out
        return N * Ho * Wo * spec.kernel_h * spec.kernel_w * depth
    if spec.kind == "Dense":
        return in_shape[0] * spec.units
    return 0


def count_params(spec: LayerSpec, in_shape) -> ParamCount:
    in_shape = tuple(int(v) for v in in_shape)
    output_shape(spec, in_shape)
    if spec.kind == "Conv2D":
        w = spec.kernel_h * spec.kernel_w * in_shape[2] * spec.num_kernels
        return ParamCount(weights=w, biases=spec.num_kernels if spec.use_bias else 0)
    if spec.kind == "Dense":
        return ParamCount(weights=in_shape[0] * spec.units, biases=spec.units if spec.use_bias else 0)
    if spec.kind == "BatchNorm":
        c = in_shape[-1]
        return ParamCount(bn_trainable=2 * c, bn_running=2 * c)
    return ParamCount()


def resolve(specs, in_shape):
    """[(spec, in_shape)] for a linear chain of layer specs."""
    out = []
    shape = tuple(in_shape)
    for s in specs:
        out.append((s, shape))
        shape = output_shape(s, shape)
    return out


def chain_flops(resolved) -> int:
    return sum(count_flops(s, shp) for s, shp in resolved)


def chain_params(resolved) -> ParamCount:
    total = ParamCount()
    for s, shp in resolved:
        total = total + count_params(s, shp)
    return total
