"""Independent oracles shared by unit and acceptance tests."""
import numpy as np

from rfmtl.nn import LayerSpec, make_layer

FD_STEP = 1e-4


def conv_oracle(x, w, b, stride=1):
    """Direct nested-loop convolution (valid padding), NHWC x, (kh, kw, C, N) w."""
    B, H, W, C = x.shape
    kh, kw, _, N = w.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    out = np.zeros((B, Ho, Wo, N))
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for n in range(N):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(C):
                                acc += x[bi, i * stride + di, j * stride + dj, c] * w[di, dj, c, n]
                    out[bi, i, j, n] = acc + (b[n] if b is not None else 0.0)
    return out


def pool_oracle(x, size, stride):
    B, H, W, C = x.shape
    Ho = (H - size) // stride + 1
    Wo = (W - size) // stride + 1
    out = np.empty((B, Ho, Wo, C))
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = -np.inf
                    for di in range(size):
                        for dj in range(size):
                            best = max(best, x[bi, i * stride + di, j * stride + dj, c])
                    out[bi, i, j, c] = best
    return out


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)))


def _distinct(rng, shape, spacing=0.01):
    """Values with pairwise gaps >= spacing, so max-pool and ReLU stay off their kinks."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n // 2) * spacing + 0.5 * spacing
    return v.reshape(shape)


LAYER_CASES = {
    "Conv2D": lambda r: (LayerSpec("Conv2D", kernel_h=int(r.integers(1, 4)), kernel_w=int(r.integers(1, 4)),
                                   num_kernels=int(r.integers(1, 4)), stride=int(r.integers(1, 3)),
                                   padding=int(r.integers(0, 2))), (int(r.integers(4, 7)), int(r.integers(4, 7)),
                                                                    int(r.integers(1, 4)))),
    "MaxPool2D": lambda r: (LayerSpec("MaxPool2D", pool_size=int(r.integers(1, 4)), pool_stride=int(r.integers(1, 3))),
                            (int(r.integers(4, 7)), int(r.integers(4, 7)), int(r.integers(1, 3)))),
    "BatchNorm": lambda r: (LayerSpec("BatchNorm"), (int(r.integers(2, 4)), int(r.integers(2, 4)), int(r.integers(1, 4)))),
    "ReLU": lambda r: (LayerSpec("ReLU"), (int(r.integers(2, 6)),)),
    "Dense": lambda r: (LayerSpec("Dense", units=int(r.integers(1, 6))), (int(r.integers(1, 8)),)),
    "Dropout": lambda r: (LayerSpec("Dropout", rate=float(r.uniform(0.1, 0.6))), (int(r.integers(2, 8)),)),
    "GaussianNoise": lambda r: (LayerSpec("GaussianNoise", stddev=float(r.uniform(0.05, 0.5))), (int(r.integers(2, 8)),)),
    "Flatten": lambda r: (LayerSpec("Flatten"), (int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 3)))),
    "Softmax": lambda r: (LayerSpec("Softmax"), (int(r.integers(2, 7)),)),
}


def gradcheck_layer(kind, seed):
    """Max relative error between analytic and central-difference gradients for one random instance.

    Covers the input gradient and every parameter gradient; the loss is
    ``sum(out * R)`` with a fixed random ``R``. Train mode is used so that
    batch statistics, dropout masks and noise are exercised (the layer rng is
    re-seeded before every forward so the mask is the same in each evaluation).
    """
    r = np.random.default_rng(seed)
    spec, shape = LAYER_CASES[kind](r)
    batch = int(r.integers(2, 5))
    layer = make_layer(spec, shape, dtype=np.float64, rng=np.random.default_rng(seed + 1))
    if layer.params.get("gamma") is not None:
        layer.params["gamma"][...] = r.uniform(0.5, 1.5, layer.params["gamma"].shape)
        layer.params["beta"][...] = r.standard_normal(layer.params["beta"].shape)
    x = _distinct(r, (batch,) + shape) if kind in ("MaxPool2D", "ReLU") else r.standard_normal((batch,) + shape)
    out_shape = (batch,) + tuple(layer.out_shape)
    R = r.standard_normal(out_shape)

    def f():
        return float(np.sum(layer.forward(x, train=True, rng=np.random.default_rng(seed + 2)) * R))

    f()
    layer.zero_grad()
    layer.forward(x, train=True, rng=np.random.default_rng(seed + 2))
    dx = layer.backward(R)
    worst = 0.0
    targets = [("x", x, dx)] + [(k, p, layer.grads[k]) for k, p in layer.params.items()]
    for _, arr, analytic in targets:
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + FD_STEP
            fp = f()
            arr[i] = old - FD_STEP
            fm = f()
            arr[i] = old
            num[i] = (fp - fm) / (2 * FD_STEP)
        worst = max(worst, rel_error(analytic, num))
    return worst
