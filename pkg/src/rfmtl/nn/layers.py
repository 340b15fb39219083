"""Layers with explicit forward/backward.

Feature maps are channels-last ``(batch, H, W, C)``; dense activations are
``(batch, features)``. Every layer caches what its backward needs during the
forward call and refuses to run backward without it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import kernels

KINDS = ("Conv2D", "MaxPool2D", "BatchNorm", "ReLU", "Dense", "Dropout", "GaussianNoise", "Flatten", "Softmax")

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class DimensionError(ValueError):
    pass


class NNStateError(RuntimeError):
    pass


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    kernel_h: int = 3
    kernel_w: int = 3
    num_kernels: int = 0
    stride: int = 1
    padding: int = 0
    pool_size: int = 2
    pool_stride: int = 1
    units: int = 0
    rate: float = 0.0
    stddev: float = 0.0
    use_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.pool_stride < 1:
            raise ValueError("strides must be >= 1")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.stddev < 0:
            raise ValueError("stddev must be >= 0")

    def to_json(self):
        d = asdict(self)
        default = LayerSpec(self.kind)
        # keep only fields that differ from defaults, plus kind/name
        return {k: v for k, v in d.items() if k in ("kind", "name") or v != getattr(default, k)}

    @classmethod
    def from_json(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def output_shape(spec: LayerSpec, in_shape):
    """Per-example output shape for a per-example input shape."""
    in_shape = tuple(in_shape)
    k = spec.kind
    if k == "Conv2D":
        if len(in_shape) != 3:
            raise DimensionError(f"Conv2D expects (H, W, C), got {in_shape}")
        H, W, _ = in_shape
        H += 2 * spec.padding
        W += 2 * spec.padding
        if H < spec.kernel_h or W < spec.kernel_w:
            raise DimensionError(f"kernel {spec.kernel_h}x{spec.kernel_w} larger than map {H}x{W}")
        return ((H - spec.kernel_h) // spec.stride + 1, (W - spec.kernel_w) // spec.stride + 1, spec.num_kernels)
    if k == "MaxPool2D":
        if len(in_shape) != 3:
            raise DimensionError(f"MaxPool2D expects (H, W, C), got {in_shape}")
        H, W, C = in_shape
        if spec.pool_size > H or spec.pool_size > W:
            raise DimensionError(f"pool {spec.pool_size} larger than map {H}x{W}")
        s = spec.pool_stride
        return ((H - spec.pool_size) // s + 1, (W - spec.pool_size) // s + 1, C)
    if k == "Dense":
        if len(in_shape) != 1:
            raise DimensionError(f"Dense expects a flat input, got {in_shape}")
        return (spec.units,)
    if k == "Flatten":
        return (int(np.prod(in_shape)),)
    return in_shape


class Layer:
    trainable = False

    def __init__(self, spec: LayerSpec, in_shape, dtype=np.float32):
        self.spec = spec
        self.name = spec.name or spec.kind.lower()
        self.in_shape = tuple(in_shape)
        self.out_shape = output_shape(spec, in_shape)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _check(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"{self.name}: expected (*, {self.in_shape}), got {x.shape}")

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NNStateError(f"{self.name}: backward called without a cached forward pass")
        return self._cache

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def _uniform_fan_in(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Conv2D(Layer):
    trainable = True

    def __init__(self, spec, in_shape, dtype=np.float32, rng=None):
        super().__init__(spec, in_shape, dtype)
        C = self.in_shape[2]
        shape = (spec.kernel_h, spec.kernel_w, C, spec.num_kernels)
        rng = rng or np.random.default_rng(0)
        self.params["kernel"] = _uniform_fan_in(rng, shape, spec.kernel_h * spec.kernel_w * C, self.dtype)
        if spec.use_bias:
            self.params["bias"] = np.zeros(spec.num_kernels, self.dtype)

    def _bias(self):
        return self.params.get("bias", np.zeros(self.spec.num_kernels, self.dtype))

    def _pad(self, x):
        p = self.spec.padding
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x

    def forward(self, x, train=False, rng=None):
        self._check(x)
        xp = self._pad(x)
        self._cache = xp
        return kernels.conv2d_forward(xp, self.params["kernel"], self._bias(), self.spec.stride)

    def backward(self, g):
        xp = self._take_cache()
        dx, dw, db = kernels.conv2d_backward(xp, self.params["kernel"], g, self.spec.stride)
        self.grads["kernel"] = dw.astype(self.dtype, copy=False)
        if "bias" in self.params:
            self.grads["bias"] = db.astype(self.dtype, copy=False)
        p = self.spec.padding
        return dx[:, p:dx.shape[1] - p, p:dx.shape[2] - p, :] if p else dx


class MaxPool2D(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        out, arg = kernels.maxpool_forward(x, self.spec.pool_size, self.spec.pool_stride)
        self._cache = (x.shape, arg)
        return out

    def backward(self, g):
        shape, arg = self._take_cache()
        return kernels.maxpool_backward(g, arg, shape, self.spec.pool_size, self.spec.pool_stride, g.dtype)


class BatchNorm(Layer):
    """Per-channel batch norm over every axis except the last."""

    trainable = True

    def __init__(self, spec, in_shape, dtype=np.float32, rng=None):
        super().__init__(spec, in_shape, dtype)
        C = self.in_shape[-1]
        self.params["gamma"] = np.ones(C, self.dtype)
        self.params["beta"] = np.zeros(C, self.dtype)
        self.buffers["moving_mean"] = np.zeros(C, self.dtype)
        self.buffers["moving_variance"] = np.ones(C, self.dtype)

    def forward(self, x, train=False, rng=None):
        self._check(x)
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            if x.shape[0] < 2:
                raise DimensionError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            mm, mv = self.buffers["moving_mean"], self.buffers["moving_variance"]
            mm *= BN_MOMENTUM
            mm += (1 - BN_MOMENTUM) * mean.astype(mm.dtype)
            mv *= BN_MOMENTUM
            mv += (1 - BN_MOMENTUM) * var.astype(mv.dtype)
        else:
            mean = self.buffers["moving_mean"]
            var = self.buffers["moving_variance"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, train)
        return (gamma * xhat + beta).astype(x.dtype, copy=False)

    def backward(self, g):
        xhat, inv, train = self._take_cache()
        axes = tuple(range(g.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["gamma"] = (g * xhat).sum(axis=axes).astype(self.dtype, copy=False)
        self.grads["beta"] = g.sum(axis=axes).astype(self.dtype, copy=False)
        dxhat = g * gamma
        if not train:
            return dxhat * inv
        m = g.size // g.shape[-1]
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._take_cache(), g, 0).astype(g.dtype, copy=False)


class Dense(Layer):
    trainable = True

    def __init__(self, spec, in_shape, dtype=np.float32, rng=None):
        super().__init__(spec, in_shape, dtype)
        n_in = self.in_shape[0]
        rng = rng or np.random.default_rng(0)
        self.params["kernel"] = _uniform_fan_in(rng, (n_in, spec.units), n_in, self.dtype)
        if spec.use_bias:
            self.params["bias"] = np.zeros(spec.units, self.dtype)

    def forward(self, x, train=False, rng=None):
        self._check(x)
        self._cache = x
        y = x @ self.params["kernel"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, g):
        x = self._take_cache()
        self.grads["kernel"] = (x.T @ g).astype(self.dtype, copy=False)
        if "bias" in self.params:
            self.grads["bias"] = g.sum(axis=0).astype(self.dtype, copy=False)
        return g @ self.params["kernel"].T


class Dropout(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        rate = self.spec.rate
        if not train or rate == 0.0:
            self._cache = 1.0
            return x
        keep = rng.random(x.shape) >= rate
        scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
        mask = keep * scale
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._take_cache()


class GaussianNoise(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        self._cache = True
        if not train or self.spec.stddev == 0.0:
            return x
        return x + (self.spec.stddev * rng.standard_normal(x.shape)).astype(x.dtype)

    def backward(self, g):
        self._take_cache()
        return g


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._take_cache())


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    def forward(self, x, train=False, rng=None):
        self._check(x)
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, g):
        p = self._take_cache()
        return p * (g - (g * p).sum(axis=-1, keepdims=True))


_CLASSES = {
    "Conv2D": Conv2D,
    "MaxPool2D": MaxPool2D,
    "BatchNorm": BatchNorm,
    "ReLU": ReLU,
    "Dense": Dense,
    "Dropout": Dropout,
    "GaussianNoise": GaussianNoise,
    "Flatten": Flatten,
    "Softmax": Softmax,
}


def make_layer(spec: LayerSpec, in_shape, dtype=np.float32, rng=None) -> Layer:
    cls = _CLASSES[spec.kind]
    if cls.trainable:
        return cls(spec, in_shape, dtype=dtype, rng=rng)
    return cls(spec, in_shape, dtype=dtype)


class Sequential:
    """Ordered layers with resolved shapes."""

    def __init__(self, specs, in_shape, dtype=np.float32, rng=None):
        self.layers: list[Layer] = []
        shape = tuple(in_shape)
        for s in specs:
            layer = make_layer(s, shape, dtype, rng)
            self.layers.append(layer)
            shape = layer.out_shape
        self.in_shape = tuple(in_shape)
        self.out_shape = shape

    def forward(self, x, train=False, rng=None, logits=False):
        """Run every layer; ``logits=True`` stops before a trailing Softmax."""
        for layer in self._active(logits):
            x = layer.forward(x, train, rng)
        return x

    def backward(self, g, logits=False):
        for layer in reversed(self._active(logits)):
            g = layer.backward(g)
        return g

    def _active(self, logits):
        if logits and self.layers and self.layers[-1].spec.kind == "Softmax":
            return self.layers[:-1]
        return self.layers

    def __iter__(self):
        return iter(self.layers)
