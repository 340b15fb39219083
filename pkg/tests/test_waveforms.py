import math
import warnings

import numpy as np
import pytest

from rfmtl import classes
from rfmtl.waveforms import (
    FRAME_LEN,
    EmptyOutputWarning,
    NumericInputError,
    apply_awgn,
    awgn_frames,
    default_spec,
    frame_and_normalize,
    frame_array,
    gen_baseband,
    oqpsk_chip_table,
    pcw_on_count,
    to_network_input,
)


@pytest.mark.parametrize("pair", classes.PAIRS)
def test_every_pair_generates_finite_deterministic_output(pair):
    spec = default_spec(*pair)
    a = gen_baseband(spec, 1024, 7)
    b = gen_baseband(spec, 1024, 7)
    assert a.shape == (1024,) and a.dtype == np.complex128
    assert np.all(np.isfinite(a)) and np.any(a != 0)
    np.testing.assert_array_equal(a, b)
    assert spec.sample_rate > 2 * spec.occupied_bandwidth()


def test_pair_outside_table_rejected():
    with pytest.raises(classes.ClassTableError):
        default_spec("PCW", "SATCOM")
    with pytest.raises(classes.ClassTableError):
        default_spec("FMCW", "Airborne-range")


def test_short_request_rejected():
    with pytest.raises(ValueError):
        gen_baseband(default_spec("BPSK", "SATCOM"), 64, 0)


def test_bpsk_rect_has_two_constellation_points():
    from dataclasses import replace

    spec = replace(default_spec("BPSK", "SATCOM"), pulse_shape="rect")
    x = gen_baseband(spec, 1024, 3)
    # remove the random carrier phase, then only +-a remain
    x = x * np.exp(-1j * np.angle(x[0]))
    pts = np.unique(np.round(x, 9))
    assert len(pts) == 2
    np.testing.assert_allclose(pts.real, [-1.0, 1.0], atol=1e-9)


@pytest.mark.parametrize("sig", ["Airborne-detection", "Airborne-range", "Ground-mapping", "Air-Ground-MTI"])
def test_pcw_on_samples_per_pri(sig):
    spec = default_spec("PCW", sig)
    pri = int(round(spec.pulse_params.pri * spec.sample_rate))
    duty = spec.pulse_params.pulse_width / spec.pulse_params.pri
    x = gen_baseband(spec, 8 * pri, 5)
    # count over whole PRIs aligned to any start: every PRI-long window has the same count
    for s in range(0, 7 * pri, max(1, pri // 3)):
        assert np.count_nonzero(x[s:s + pri]) == math.ceil(duty * pri - 1e-9) == pcw_on_count(spec)
    mods = np.abs(x[x != 0])
    np.testing.assert_allclose(mods, mods[0], rtol=1e-12)


def test_pcw_quarter_duty_exact_count():
    spec = default_spec("PCW", "Airborne-detection")
    assert spec.pulse_params.pulse_width / spec.pulse_params.pri == 0.25
    assert pcw_on_count(spec) == math.ceil(0.25 * 64)


def test_fmcw_instantaneous_frequency_is_a_linear_sweep():
    spec = default_spec("FMCW", "Radar-Altimeter")
    fs, B = spec.sample_rate, spec.pulse_params.chirp_bandwidth
    sweep = int(round(spec.pulse_params.pri * fs))
    x = gen_baseband(spec, 4 * sweep, 11)
    f = np.diff(np.unwrap(np.angle(x))) * fs / (2 * np.pi)
    # independent oracle: a sawtooth from -B/2 rising B/sweep per sample
    slope = B / sweep
    steps = np.diff(f)
    resets = np.flatnonzero(steps < 0)
    assert len(resets) in (3, 4)
    np.testing.assert_allclose(np.delete(steps, resets), slope, rtol=1e-6)
    k0 = resets[0] + 1
    np.testing.assert_allclose(f[k0:k0 + sweep], -B / 2 + slope * np.arange(sweep), atol=1e-6)


def test_oqpsk_chip_table_is_distinct():
    t = oqpsk_chip_table()
    assert t.shape == (16, 32)
    assert len({tuple(r) for r in t}) == 16


def test_oqpsk_is_constant_envelope_after_startup():
    x = gen_baseband(default_spec("DSSS-OQPSK", "IEEE802.15.4"), 1024, 0)
    np.testing.assert_allclose(np.abs(x[4:-4]), 1.0, atol=1e-9)


def test_gfsk_is_constant_envelope():
    x = gen_baseband(default_spec("GFSK", "Bluetooth"), 512, 1)
    np.testing.assert_allclose(np.abs(x), 1.0, atol=1e-12)


# ---------------------------------------------------------------- AWGN


def test_awgn_infinite_snr_is_identity():
    x = gen_baseband(default_spec("BPSK", "SATCOM"), 256, 0)
    y = apply_awgn(x, math.inf, 1)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_awgn_rejects_non_finite():
    with pytest.raises(NumericInputError):
        apply_awgn(np.array([1.0, np.nan] * 64), 10.0, 0)


@pytest.mark.parametrize("snr_db", [-20.0, -6.0, 10.0, 18.0])
def test_awgn_monte_carlo_snr(snr_db):
    rng = np.random.default_rng(int(snr_db) + 50)
    n = 10_000
    clean = rng.standard_normal((n, FRAME_LEN)) + 1j * rng.standard_normal((n, FRAME_LEN))
    clean /= np.linalg.norm(clean, axis=1, keepdims=True)
    noisy = awgn_frames(clean, snr_db, rng)
    est = 10 * np.log10(np.sum(np.abs(clean) ** 2) / np.sum(np.abs(noisy - clean) ** 2))
    assert abs(est - snr_db) < 0.3


def test_apply_awgn_monte_carlo_on_a_long_signal():
    x = gen_baseband(default_spec("GFSK", "Bluetooth"), FRAME_LEN * 10_000, 2)
    x = frame_array(x).reshape(-1)
    y = apply_awgn(x, 10.0, 3)
    est = 10 * np.log10(np.sum(np.abs(x) ** 2) / np.sum(np.abs(y - x) ** 2))
    assert abs(est - 10.0) < 0.3


def test_canonical_snr_grid_is_accepted():
    x = frame_array(gen_baseband(default_spec("ASK", "Short-Range"), 256, 0))
    rng = np.random.default_rng(0)
    for snr in range(-20, 19, 2):
        assert np.all(np.isfinite(awgn_frames(x, float(snr), rng)))


# ---------------------------------------------------------------- framing


def test_framing_and_unit_energy():
    x = np.random.default_rng(0).standard_normal(256) * 3 + 1j
    frames = frame_and_normalize(x, 4.0, "cfg")
    assert len(frames) == 2
    for f in frames:
        # independent double-precision accumulation
        e = math.fsum(float(v) for v in (f.iq.real ** 2 + f.iq.imag ** 2))
        assert abs(e - 1.0) < 1e-9
        assert f.snr_db == 4.0 and f.config_id == "cfg"
    np.testing.assert_allclose(frames[0].iq, x[:128] / np.sqrt(np.sum(np.abs(x[:128]) ** 2)))


def test_zero_frames_dropped_and_warned():
    x = np.zeros(384, complex)
    x[200] = 1.0
    assert len(frame_and_normalize(x)) == 1
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert frame_array(np.zeros(256, complex)).shape[0] == 0
    assert any(issubclass(i.category, EmptyOutputWarning) for i in w)


def test_network_input_layout():
    iq = (np.arange(128) + 1j * (1000 + np.arange(128)))[None]
    x = to_network_input(iq)
    assert x.shape == (1, 16, 16, 1) and x.dtype == np.float32
    flat = x.reshape(-1)
    np.testing.assert_array_equal(flat[:128], np.arange(128))
    np.testing.assert_array_equal(flat[128:], 1000 + np.arange(128))
