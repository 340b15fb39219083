import numpy as np
import pytest

from rfmtl.dataset import GenConfig, build_dataset
from rfmtl.mtl import LossWeights, MtlConfig, TrainConfig, build_model, split_arrays, train, train_step
from rfmtl.quant import (
    QMAGIC,
    CalibrationError,
    DegenerateRangeError,
    QuantizedModel,
    QuantizedTensor,
    QuantStateError,
    RangeAccumulator,
    calibrate,
    fake_quant_weight,
    insert_fake_quant,
    percentile_cut,
    qat_finetune,
    qat_step,
    qparams,
    quantize_model,
    quantize_tensor,
    quantized_inference,
    round_half_away,
    size_report,
    strip_fake_quant,
    weight_layers,
)
from rfmtl.waveforms import to_network_input

SMALL = MtlConfig.from_tuple((4, 2, 32, 2, 32))


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    iq = rng.standard_normal((n, 128)) + 1j * rng.standard_normal((n, 128))
    return to_network_input(iq / np.linalg.norm(iq, axis=1, keepdims=True))


# ---------------------------------------------------------------- tensor quantization


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.49])),
                                  [-3, -2, -1, 1, 2, 2])


def test_qparams_formula():
    s, z = qparams(-1.0, 1.0)
    assert s == 2.0 / 255
    assert z == int(round_half_away(-128 + 1.0 / s))
    # range entirely positive: zero point pinned at the bottom of the int8 range
    assert qparams(0.0, 5.0) == (5.0 / 255, -128)


def test_zero_tensor_maps_to_zero_point():
    qt = quantize_tensor(np.zeros((3, 4)), -1.0, 1.0)
    assert np.all(qt.values == qt.zero_point)
    assert np.all(qt.dequantize() == 0.0)


def test_dequantize_arithmetic():
    assert QuantizedTensor(np.array([14], np.int8), 0.5, 10).dequantize()[0] == 2.0


@pytest.mark.parametrize("n,seed", [(1000, 0), (100_000, 1)])
def test_roundtrip_error_bound(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    qt = quantize_tensor(x, -1.0, 1.0)
    assert qt.values.dtype == np.int8 and -128 <= qt.zero_point <= 127
    err = np.abs(qt.dequantize().astype(np.float64) - x)
    assert err.max() <= qt.scale / 2 + np.spacing(np.float32(1.0))


def test_degenerate_range_rejected():
    with pytest.raises(DegenerateRangeError):
        qparams(0.5, 0.5)
    with pytest.raises(DegenerateRangeError):
        quantize_tensor(np.full(4, 2.0))


# ---------------------------------------------------------------- calibration


def test_percentile_cut_matches_full_sort():
    v = np.random.default_rng(3).standard_normal(10_000)
    srt = np.sort(v)
    lo, hi = percentile_cut(v)
    n = v.size
    assert lo == srt[int(np.floor(0.001 * (n - 1)))]
    assert hi == srt[int(np.ceil(0.999 * (n - 1)))]


def test_minmax_ranges_never_shrink():
    model = build_model(SMALL, seed=0)
    x = _inputs(64)
    prev = None
    for k in (8, 16, 40, 64):
        cal = calibrate(model, x[:k], mode="minmax")
        if prev is not None:
            for site, (lo, hi) in cal.ranges.items():
                assert lo <= prev[site][0] and hi >= prev[site][1]
        prev = cal.ranges


def test_range_accumulator_modes():
    acc = RangeAccumulator("minmax")
    acc.update(np.array([1.0, 3.0]))
    acc.update(np.array([-2.0]))
    assert acc.result() == (-2.0, 3.0)
    with pytest.raises(ValueError):
        RangeAccumulator("mean")


def test_calibration_sites_and_errors():
    model = build_model(SMALL, seed=0)
    cal = calibrate(model, _inputs(300))
    assert set(cal.ranges) == {l.name for _, l in weight_layers(model)}
    assert len(cal.ranges) == 7 and cal.n_frames == 300 and not cal.degenerate
    with pytest.raises(CalibrationError):
        calibrate(model, _inputs(0))


def test_constant_site_is_widened_and_flagged():
    model = build_model(SMALL, seed=0)
    x = np.full((8, 16, 16, 1), 0.25, np.float32)
    cal = calibrate(model, x)
    first = model.trunk.layers[0].name
    assert first in cal.degenerate
    lo, hi = cal.ranges[first]
    assert lo < 0.25 < hi and hi - lo < 1e-5


def test_uncalibrated_site_is_a_state_error():
    model = build_model(SMALL, seed=0)
    cal = calibrate(model, _inputs(16))
    cal.ranges.pop(next(iter(cal.ranges)))
    with pytest.raises(QuantStateError):
        QuantizedModel(model, cal)


# ---------------------------------------------------------------- quantized inference


@pytest.fixture(scope="module")
def trained_small():
    ds = build_dataset(GenConfig.grid([10.0], 30, "awgn", seed=2))
    model = build_model(SMALL, seed=0)
    train(model, ds, TrainConfig(max_epochs=4, patience=3, learning_rate=3e-3))
    return model, ds


def test_every_weight_quantized_biases_float(trained_small):
    model, ds = trained_small
    qm = quantize_model(model, split_arrays(ds, "val")[0])
    assert set(qm.weights) == {l.name for _, l in weight_layers(model)}
    dtypes = {(name.split("/")[-1], dt) for name, _, dt, *_ in qm.records()}
    assert ("kernel", "i8") in dtypes and ("bias", "f32") in dtypes
    assert ("bias", "i8") not in dtypes and ("kernel", "f32") not in dtypes


def test_reference_path_equals_dequantize_then_float(trained_small):
    model, ds = trained_small
    qm = quantize_model(model, split_arrays(ds, "val")[0])
    x = split_arrays(ds, "test")[0]
    # independent replica: float model with dequantized kernels and fake-quantized inputs
    twin = model.clone()
    for _, layer in weight_layers(twin):
        layer.params["kernel"][...] = qm.weights[layer.name].dequantize()
    cal = qm.calibration
    insert_fake_quant(twin, cal)
    a = qm.forward(x)
    b = twin.forward(x, train=False)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-6)


def test_integer_path_agrees_with_reference(trained_small):
    model, ds = trained_small
    qm = quantize_model(model, split_arrays(ds, "val")[0])
    x = _inputs(1000, seed=4)
    ref = qm.predict_arrays(x)
    fast = qm.predict_arrays(x, integer=True)
    for u, v in zip(ref, fast):
        assert np.array_equal(u.argmax(1), v.argmax(1))
        np.testing.assert_allclose(u, v, atol=1e-3)


def test_single_frame_inference(trained_small):
    model, ds = trained_small
    qm = quantize_model(model, split_arrays(ds, "val")[0])
    pm, ps = quantized_inference(qm, ds[0].iq)
    assert pm.shape == (9,) and ps.shape == (11,) and abs(pm.sum() - 1) < 1e-5
    with pytest.raises(ValueError):
        quantized_inference(qm, np.zeros(64, complex))


def test_quantized_checkpoint_roundtrip(trained_small):
    model, ds = trained_small
    qm = quantize_model(model, split_arrays(ds, "val")[0])
    buf = qm.to_bytes()
    assert buf.startswith(QMAGIC)
    back = QuantizedModel.from_bytes(buf)
    assert back.to_bytes() == buf
    x = split_arrays(ds, "test")[0]
    for u, v in zip(qm.predict_arrays(x, integer=True), back.predict_arrays(x, integer=True)):
        np.testing.assert_array_equal(u, v)


def test_size_report_ratios():
    model = build_model(MtlConfig(), seed=0)
    qm = quantize_model(model, _inputs(256))
    rep = size_report(model, qm)
    assert rep["weight_tensor_bytes"]["ratio"] >= 3.9
    assert rep["payload_bytes"]["ratio"] > 3.5
    assert rep["file_bytes"]["quantized"] == len(qm.to_bytes())
    assert sum(t["elements"] for t in rep["tensors"] if t["dtype"] == "i8") == 253_576


# ---------------------------------------------------------------- QAT


def test_32_bit_fake_quant_is_a_no_op():
    model = build_model(SMALL, seed=1)
    x = _inputs(32)
    cal = calibrate(model, x, mode="minmax")
    twin = model.clone()
    for _, layer in weight_layers(twin):
        layer.params["kernel"][...] = fake_quant_weight(layer.params["kernel"], bits=32)
    insert_fake_quant(twin, cal, bits=32)
    for u, v in zip(model.forward(x), twin.forward(x)):
        np.testing.assert_allclose(u, v, atol=1e-6)
    strip_fake_quant(twin)
    assert [type(l) for l in twin.trunk.layers] == [type(l) for l in model.trunk.layers]


def test_on_grid_weights_are_a_fixed_point():
    rng = np.random.default_rng(0)
    q = rng.integers(-128, 128, (3, 3, 1, 4))
    q.flat[0], q.flat[1] = -128, 127
    k = (q / 128.0).astype(np.float32)
    np.testing.assert_array_equal(fake_quant_weight(k), k)

    model = build_model(SMALL, seed=2)
    for _, layer in weight_layers(model):
        shape = layer.params["kernel"].shape
        g = rng.integers(-128, 128, shape)
        g.flat[0], g.flat[1] = -128, 127
        layer.params["kernel"][...] = g / 128.0 * 0.25
    a, b = model.clone(), model.clone()
    x = _inputs(16)
    ym, ys = rng.integers(0, 9, 16), rng.integers(0, 11, 16)
    a.rng, b.rng = np.random.default_rng(7), np.random.default_rng(7)
    ra = train_step(a, x, ym, ys, LossWeights(), 1e-3)
    rb = qat_step(b, x, ym, ys, LossWeights(), 1e-3)
    assert ra.total == rb.total
    for grp in ("sh", "m", "s"):
        for (n, u), (_, v) in zip(a.groups[grp].named_params(), b.groups[grp].named_params()):
            np.testing.assert_array_equal(u, v, err_msg=n)


def test_fake_quant_gradient_is_straight_through_inside_range():
    model = build_model(SMALL, seed=0)
    cal = calibrate(model, _inputs(16))
    insert_fake_quant(model, cal)
    fq = model.trunk.layers[0]
    x = np.array([fq.lo - 1.0, 0.0, fq.hi + 1.0, (fq.lo + fq.hi) / 2])
    fq.forward(x)
    np.testing.assert_array_equal(fq.backward(np.ones(4)), [0.0, 1.0, 0.0, 1.0])


def test_qat_zero_epochs_returns_copy(trained_small):
    model, ds = trained_small
    out, res = qat_finetune(model, ds, 0)
    assert res is None and out is not model
    assert out.to_checkpoint() == model.to_checkpoint()


def test_toy_qat_not_worse_than_ptq(trained_small):
    model, ds = trained_small
    xv = split_arrays(ds, "val")[0]
    x, ym, ys, _ = split_arrays(ds, "test")

    def int8_acc(m):
        pm, ps = quantize_model(m, xv).predict_arrays(x, integer=True)
        return (np.mean(pm.argmax(1) == ym) + np.mean(ps.argmax(1) == ys)) / 2

    ptq = int8_acc(model)
    qat_model, res = qat_finetune(model, ds, 3, tc=TrainConfig(learning_rate=1e-3))
    assert 1 <= len(res.history) <= 3
    assert all(not type(l).__name__ == "FakeQuant" for l in qat_model.trunk.layers)
    assert int8_acc(qat_model) >= ptq
