"""Affine INT8 quantization: calibration, fake-quant training, integer inference.

A real tensor ``x`` is represented by codes ``q`` with ``x ~= s * (q - z)``.
Weights use one (s, z) per tensor; activations are quantized at the input
of every Conv2D/Dense layer using calibrated ranges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .mtl import (
    LossWeights,
    MtlModel,
    TrainConfig,
    joint_loss,
    loss_grad_logits,
    split_arrays,
    train,
)
from .nn.checkpoint import CheckpointFormatError, Reader, Writer, dump_json
from .nn.layers import softmax
from .nn.optim import adam_step

QMIN, QMAX = -128, 127
WEIGHT_KINDS = ("Conv2D", "Dense")
QMAGIC = b"RFMTLQ1"
RANGE_EPS = 1e-6


class DegenerateRangeError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


class QuantStateError(RuntimeError):
    pass


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def qparams(lo, hi, bits=8):
    """(scale, zero_point) for the real range ``[lo, hi]``."""
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("range must be finite")
    if not lo < hi:
        raise DegenerateRangeError(f"degenerate range [{lo}, {hi}]")
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    s = (hi - lo) / (qmax - qmin)
    z = int(np.clip(round_half_away(qmin - lo / s), qmin, qmax))
    return s, z


def quantize_values(x, s, z, bits=8):
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / s) + z, qmin, qmax)
    return q.astype(np.int8) if bits == 8 else q


def fake_quant(x, s, z, bits=8):
    """quantize -> dequantize, returned in the dtype of ``x``."""
    q = quantize_values(x, s, z, bits)
    return (s * (np.asarray(q, dtype=np.float64) - z)).astype(np.asarray(x).dtype)


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int8
    scale: float
    zero_point: int

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self):
        return np.float32(self.scale) * (self.values.astype(np.float32) - np.float32(self.zero_point))


def quantize_tensor(x, lo=None, hi=None) -> QuantizedTensor:
    """Quantize with range ``[lo, hi]`` (defaults to the tensor's own min/max)."""
    x = np.asarray(x)
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    s, z = qparams(lo, hi)
    return QuantizedTensor(quantize_values(x, s, z), s, z)


def dequantize(qt: QuantizedTensor):
    return qt.dequantize()


def with_zero(lo, hi):
    """Extend a range so that 0.0 is exactly representable."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if lo == hi:
        hi = lo + RANGE_EPS
    return lo, hi


# ---------------------------------------------------------------- calibration


def percentile_cut(values, lo_pct=0.1, hi_pct=99.9):
    """Order-statistic cut points: element floor(q_lo*(n-1)) and ceil(q_hi*(n-1)) of the sorted values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    k_lo = int(math.floor(lo_pct / 100.0 * (n - 1)))
    k_hi = int(math.ceil(hi_pct / 100.0 * (n - 1)))
    part = np.partition(v, [k_lo, k_hi])
    return float(part[k_lo]), float(part[k_hi])


class RangeAccumulator:
    def __init__(self, mode="percentile", lo_pct=0.1, hi_pct=99.9):
        if mode not in ("percentile", "minmax"):
            raise ValueError(f"unknown calibration mode {mode!r}")
        self.mode = mode
        self.lo_pct, self.hi_pct = lo_pct, hi_pct
        self.lo, self.hi = math.inf, -math.inf
        self.chunks = []

    def update(self, x):
        x = np.asarray(x)
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))
        if self.mode == "percentile":
            self.chunks.append(x.astype(np.float32).ravel())

    def result(self):
        if self.mode == "minmax":
            return self.lo, self.hi
        return percentile_cut(np.concatenate(self.chunks), self.lo_pct, self.hi_pct)


@dataclass
class Calibration:
    ranges: dict  # site -> (lo, hi)
    degenerate: list = field(default_factory=list)
    mode: str = "percentile"
    n_frames: int = 0


def weight_layers(model: MtlModel):
    for tag, seq in model.branches().items():
        for layer in seq.layers:
            if layer.spec is not None and layer.spec.kind in WEIGHT_KINDS:
                yield tag, layer


def _trace_sites(model: MtlModel, x, sink):
    """Inference pass that hands the input of every Conv2D/Dense layer to ``sink(name, x)``."""
    def run(seq, h):
        for layer in seq.layers:
            if layer.spec.kind in WEIGHT_KINDS:
                sink(layer.name, h)
            h = layer.forward(h, train=False)
        return h
    h = run(model.trunk, x)
    return run(model.mod_branch, h), run(model.sig_branch, h)


def calibrate(model: MtlModel, x, mode="percentile", batch=512, lo_pct=0.1, hi_pct=99.9) -> Calibration:
    """Per-site activation ranges over a calibration set (network inputs, ``(n, 16, 16, 1)``)."""
    if len(x) == 0:
        raise CalibrationError("calibration set is empty")
    acc = {name: RangeAccumulator(mode, lo_pct, hi_pct) for _, layer in weight_layers(model) for name in [layer.name]}
    for s in range(0, len(x), batch):
        _trace_sites(model, x[s:s + batch], lambda name, h: acc[name].update(h))
    ranges, degenerate = {}, []
    for name, a in acc.items():
        lo, hi = a.result()
        if not lo < hi:
            degenerate.append(name)
            lo, hi = lo - RANGE_EPS, hi + RANGE_EPS
        ranges[name] = (lo, hi)
    return Calibration(ranges, degenerate, mode, len(x))


# ---------------------------------------------------------------- quantized model


class QuantizedModel:
    """INT8 weights + activation qparams over the structure of a float model."""

    def __init__(self, model: MtlModel, calibration: Calibration):
        self.float_model = model.clone()
        self.calibration = calibration
        self.weights: dict[str, QuantizedTensor] = {}
        self.act: dict[str, tuple] = {}
        for _, layer in weight_layers(self.float_model):
            if layer.name not in calibration.ranges:
                raise QuantStateError(f"site {layer.name} was not calibrated")
            k = layer.params["kernel"]
            lo, hi = with_zero(float(k.min()), float(k.max()))
            qt = quantize_tensor(k, lo, hi)
            self.weights[layer.name] = qt
            # the float twin carries dequantized weights: the reference path
            layer.params["kernel"][...] = qt.dequantize()
            self.act[layer.name] = qparams(*with_zero(*calibration.ranges[layer.name]))

    def forward(self, x, integer=False):
        """(mod, sig) probabilities; ``integer=True`` uses int32 accumulation for Conv2D/Dense."""
        def run(seq, h):
            for layer in seq.layers:
                if layer.spec.kind in WEIGHT_KINDS:
                    h = self._weighted(layer, h, integer)
                else:
                    h = layer.forward(h, train=False)
            return h
        m = self.float_model
        h = run(m.trunk, x)
        return run(m.mod_branch, h), run(m.sig_branch, h)

    def _weighted(self, layer, h, integer):
        s_x, z_x = self.act[layer.name]
        qx = quantize_values(h, s_x, z_x)
        if not integer:
            return layer.forward((s_x * (qx.astype(np.float64) - z_x)).astype(h.dtype), train=False)
        qt = self.weights[layer.name]
        xi = qx.astype(np.int32) - np.int32(z_x)
        wi = qt.values.astype(np.int32) - np.int32(qt.zero_point)
        if layer.spec.kind == "Dense":
            acc = xi @ wi
        else:
            st = layer.spec.stride
            p = layer.spec.padding
            if p:
                xi = np.pad(xi, ((0, 0), (p, p), (p, p), (0, 0)))
            win = sliding_window_view(xi, wi.shape[:2], axis=(1, 2))[:, ::st, ::st]
            acc = np.tensordot(win, wi.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
        y = acc.astype(np.float64) * (s_x * qt.scale)
        if "bias" in layer.params:
            y = y + layer.params["bias"]
        return y.astype(h.dtype)

    def predict_arrays(self, x, integer=False, batch=2048):
        mods, sigs = [], []
        for s in range(0, len(x), batch):
            m, g = self.forward(x[s:s + batch], integer)
            mods.append(m)
            sigs.append(g)
        return np.concatenate(mods), np.concatenate(sigs)

    # ------------------------------------------------------------ serialization

    def records(self):
        """(name, tag, dtype, scale, zero_point, array) for every stored tensor."""
        out = []
        for tag, g in self.float_model.groups.items():
            for name, p in list(g.named_params()) + list(g.named_buffers()):
                layer_name, pname = name.split("/", 1)
                if pname == "kernel" and layer_name in self.weights:
                    qt = self.weights[layer_name]
                    out.append((name, tag, "i8", qt.scale, qt.zero_point, qt.values))
                else:
                    out.append((name, tag, "f32", 1.0, 0, p))
        return out

    def to_bytes(self) -> bytes:
        w = Writer()
        w.raw(QMAGIC)
        w.blob(dump_json(self.float_model.graph_json()))
        meta = {
            "mode": self.calibration.mode,
            "n_frames": self.calibration.n_frames,
            "degenerate": list(self.calibration.degenerate),
            "ranges": {k: list(v) for k, v in self.calibration.ranges.items()},
        }
        w.blob(dump_json(meta))
        recs = self.records()
        w.pack("I", len(recs))
        for name, tag, dt, scale, zp, arr in recs:
            w.short_str(name)
            w.short_str(tag, "B")
            w.short_str(dt, "B")
            w.pack("d", float(scale))
            w.pack("i", int(zp))
            w.shape(arr.shape)
            w.raw(np.ascontiguousarray(arr, dtype="i1" if dt == "i8" else "<f4").tobytes())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "QuantizedModel":
        import json

        from .mtl import MtlConfig

        r = Reader(buf)
        if r.take(len(QMAGIC)) != QMAGIC:
            raise CheckpointFormatError("bad magic")
        graph = json.loads(r.blob().decode("utf-8"))
        meta = json.loads(r.blob().decode("utf-8"))
        state, quant = {}, {}
        for _ in range(r.unpack("I")):
            name = r.short_str()
            r.short_str("B")
            dt = r.short_str("B")
            scale = r.unpack("d")
            zp = r.unpack("i")
            shape = r.shape()
            if dt == "i8":
                q = r.array("i1", shape).astype(np.int8)
                quant[name] = QuantizedTensor(q, scale, zp)
                state[name] = quant[name].dequantize()
            elif dt == "f32":
                state[name] = r.array("<f4", shape).astype(np.float32)
            else:
                raise CheckpointFormatError(f"unknown dtype tag {dt!r}")
        r.expect_end()
        model = MtlModel(MtlConfig(**graph["config"]), input_shape=tuple(graph["input_shape"]))
        model.load_state_dict(state)
        cal = Calibration({k: tuple(v) for k, v in meta["ranges"].items()}, meta["degenerate"], meta["mode"],
                          meta["n_frames"])
        qm = cls.__new__(cls)
        qm.float_model = model
        qm.calibration = cal
        qm.weights = {name.split("/", 1)[0]: qt for name, qt in quant.items()}
        qm.act = {k: qparams(*with_zero(*v)) for k, v in cal.ranges.items()}
        return qm


def quantize_model(model: MtlModel, x_calib, mode="percentile") -> QuantizedModel:
    """Post-training quantization: calibrate on ``x_calib`` then quantize every weight tensor."""
    return QuantizedModel(model, calibrate(model, x_calib, mode))


def quantized_inference(qm: QuantizedModel, frame, integer=False):
    from .waveforms import FRAME_LEN, ComplexFrame, to_network_input

    iq = frame.iq if isinstance(frame, ComplexFrame) else np.asarray(frame)
    if iq.shape != (FRAME_LEN,):
        raise ValueError(f"frame must hold {FRAME_LEN} complex samples")
    pm, ps = qm.forward(to_network_input(iq[None]), integer)
    return pm[0], ps[0]


# ---------------------------------------------------------------- QAT


class FakeQuant:
    """Activation fake-quant with a straight-through gradient inside the range."""

    spec = None

    def __init__(self, name, lo, hi, bits=8):
        self.name = name
        self.params, self.buffers, self.grads = {}, {}, {}
        self.bits = bits
        self.lo, self.hi = with_zero(lo, hi)
        self.s, self.z = qparams(self.lo, self.hi, bits)
        self._mask = None

    def forward(self, x, train=False, rng=None):
        self._mask = (x >= self.lo) & (x <= self.hi)
        return fake_quant(x, self.s, self.z, self.bits)

    def backward(self, g):
        return np.where(self._mask, g, 0).astype(g.dtype, copy=False)

    def zero_grad(self):
        pass


def insert_fake_quant(model: MtlModel, calibration: Calibration, bits=8):
    """Put a FakeQuant in front of every Conv2D/Dense layer (in place)."""
    for seq in model.branches().values():
        new = []
        for layer in seq.layers:
            if layer.spec is not None and layer.spec.kind in WEIGHT_KINDS:
                lo, hi = calibration.ranges[layer.name]
                new.append(FakeQuant(f"fq_{layer.name}", lo, hi, bits))
            new.append(layer)
        seq.layers = new
    return model


def strip_fake_quant(model: MtlModel):
    for seq in model.branches().values():
        seq.layers = [l for l in seq.layers if not isinstance(l, FakeQuant)]
    return model


def fake_quant_weight(k, bits=8):
    lo, hi = with_zero(float(k.min()), float(k.max()))
    s, z = qparams(lo, hi, bits)
    return fake_quant(k, s, z, bits)


def qat_step(model, x, y_mod, y_sig, w, lr, bits=8):
    """Train step with fake-quantized weights; the update lands on the float weights (STE)."""
    saved = []
    for _, layer in weight_layers(model):
        k = layer.params["kernel"]
        saved.append((k, k.copy()))
        k[...] = fake_quant_weight(k, bits)
    zm, zs = model.forward(x, train=True, logits=True)
    pm, ps = softmax(zm), softmax(zs)
    res = joint_loss(pm, ps, y_mod, y_sig, w)
    gm, gs = loss_grad_logits(pm, ps, y_mod, y_sig, w)
    model.backward(gm.astype(zm.dtype), gs.astype(zs.dtype))
    for k, orig in saved:
        k[...] = orig
    for g in model.groups.values():
        adam_step(g, lr=lr)
    return res


def qat_finetune(model: MtlModel, dataset, epochs, tc: TrainConfig = None, w: LossWeights = None,
                 calib_frames=1024, mode="percentile", bits=8):
    """Fine-tune ``model`` under simulated quantization; returns ``(float_model, TrainResult | None)``.

    ``epochs == 0`` returns an untouched copy (pure post-training quantization).
    """
    tc = tc or TrainConfig()
    out = model.clone()
    if epochs <= 0:
        return out, None
    xv = split_arrays(dataset, "val")[0][:calib_frames]
    cal = calibrate(out, xv, mode)
    insert_fake_quant(out, cal, bits)
    qtc = TrainConfig(max_epochs=epochs, patience=min(tc.patience, epochs - 1),
                      learning_rate=tc.learning_rate, batch_size=tc.batch_size, seed=tc.seed)
    step = lambda m, x, ym, ys, ww, lr: qat_step(m, x, ym, ys, ww, lr, bits)  # noqa: E731
    res = train(out, dataset, qtc, w or LossWeights(), step_hook=step)
    strip_fake_quant(out)
    return out, res


# ---------------------------------------------------------------- size report

REFERENCE_SIZES = {
    "fp32_model_bytes": 2.97e6,
    "int8_model_bytes": 251.6e3,
    "ratio": 11.8,
    "note": "framework container sizes; not comparable to raw weight payloads",
}
QT_OVERHEAD_BYTES = 12  # f64 scale + i32 zero point


def size_report(model: MtlModel, qm: QuantizedModel) -> dict:
    tensors = []
    fp32 = int8 = 0
    for name, tag, dt, _, _, arr in qm.records():
        b32 = 4 * arr.size
        b8 = arr.size + QT_OVERHEAD_BYTES if dt == "i8" else 4 * arr.size
        fp32 += b32
        int8 += b8
        tensors.append({"name": name, "branch": tag, "elements": int(arr.size), "dtype": dt,
                        "fp32_bytes": b32, "quantized_bytes": b8, "ratio": b32 / b8})
    w_fp32 = sum(t["fp32_bytes"] for t in tensors if t["dtype"] == "i8")
    w_int8 = sum(t["quantized_bytes"] for t in tensors if t["dtype"] == "i8")
    f32_file = len(model.to_checkpoint())
    q_file = len(qm.to_bytes())
    return {
        "payload_bytes": {"fp32": fp32, "quantized": int8, "ratio": fp32 / int8},
        "weight_tensor_bytes": {"fp32": w_fp32, "int8": w_int8, "ratio": w_fp32 / w_int8},
        "file_bytes": {"fp32": f32_file, "quantized": q_file, "ratio": f32_file / q_file},
        "tensors": tensors,
        "reference_sizes": REFERENCE_SIZES,
    }
