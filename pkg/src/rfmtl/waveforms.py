"""Baseband waveform synthesis, AWGN, and frame normalization.

All generators are pure functions of ``(spec, n_samples, seed)``. Default
parameters per class live in :func:`default_spec`; every one of them is a
field on :class:`WaveformSpec` and can be overridden.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import signal as sps

from .classes import check_pair

FRAME_LEN = 128
DEFAULT_SAMPLE_RATE = 1e6


class NumericInputError(ValueError):
    pass


class EmptyOutputWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PulseParams:
    pulse_width: float  # s
    pri: float  # s
    chirp_bandwidth: float = 0.0  # Hz; FMCW sweep width


@dataclass(frozen=True)
class WaveformSpec:
    modulation: str
    signal_class: str
    symbol_rate: float
    sample_rate: float = DEFAULT_SAMPLE_RATE
    carrier_offset: float = 0.0
    pulse_params: Optional[PulseParams] = None
    pulse_shape: str = "rrc"  # "rrc" | "rect"
    rolloff: float = 0.35
    ask_levels: tuple = (0.2, 1.0)
    am_index: float = 0.5
    message_bandwidth: float = 25e3
    gfsk_bt: float = 0.5
    gfsk_h: float = 0.32

    @property
    def sps(self) -> int:
        return int(round(self.sample_rate / self.symbol_rate))

    def occupied_bandwidth(self) -> float:
        """One-sided spectral extent |f|max of the waveform, in Hz."""
        m = self.modulation
        if m in ("BPSK", "ASK"):
            half = 0.5 * self.symbol_rate * (1.0 + (self.rolloff if self.pulse_shape == "rrc" else 1.0))
        elif m in ("AM-DSB", "AM-SSB"):
            half = self.message_bandwidth
        elif m == "GFSK":
            half = 0.5 * self.symbol_rate * (1.0 + self.gfsk_h)
        elif m in ("DSSS-CCK", "DSSS-OQPSK"):
            half = 0.75 * self.symbol_rate
        elif m == "FMCW":
            half = 0.5 * self.pulse_params.chirp_bandwidth
        else:  # PCW: main lobe of the pulse envelope
            half = 1.0 / self.pulse_params.pulse_width
        return abs(self.carrier_offset) + half

    def validate(self):
        check_pair(self.modulation, self.signal_class)
        ratio = self.sample_rate / self.symbol_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise ValueError(f"sample_rate/symbol_rate = {ratio}: need an integer >= 2")
        if self.modulation in ("FMCW", "PCW") and self.pulse_params is None:
            raise ValueError(f"{self.modulation} needs pulse_params")
        if not self.sample_rate > 2.0 * self.occupied_bandwidth():
            raise ValueError(
                f"sample_rate {self.sample_rate} does not exceed 2x occupied bandwidth "
                f"{self.occupied_bandwidth()}"
            )
        return self


# per-class defaults at 1 MS/s; radar timings in seconds
_RADAR = {
    "Radar-Altimeter": PulseParams(pulse_width=64e-6, pri=64e-6, chirp_bandwidth=250e3),
    "Airborne-detection": PulseParams(pulse_width=16e-6, pri=64e-6),
    "Airborne-range": PulseParams(pulse_width=4e-6, pri=40e-6),
    "Ground-mapping": PulseParams(pulse_width=64e-6, pri=128e-6),
    "Air-Ground-MTI": PulseParams(pulse_width=5e-6, pri=20e-6),
}

_SPS = {
    "BPSK": 8,
    "ASK": 8,
    "AM-DSB": 8,
    "AM-SSB": 8,
    "GFSK": 8,
    "DSSS-CCK": 2,  # samples per chip
    "DSSS-OQPSK": 2,  # samples per chip
    "FMCW": 8,
    "PCW": 8,
}


def default_spec(modulation: str, signal_class: str, sample_rate: float = DEFAULT_SAMPLE_RATE,
                 carrier_offset: float = 0.0) -> WaveformSpec:
    check_pair(modulation, signal_class)
    return WaveformSpec(
        modulation=modulation,
        signal_class=signal_class,
        symbol_rate=sample_rate / _SPS[modulation],
        sample_rate=sample_rate,
        carrier_offset=carrier_offset,
        pulse_params=_RADAR.get(signal_class),
    ).validate()


# ---------------------------------------------------------------- pulse shapes


def rrc_taps(sps: int, rolloff: float, span: int = 8) -> np.ndarray:
    """Root-raised-cosine taps normalized to unit energy."""
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 - b + 4 * b / np.pi
        elif b > 0 and abs(abs(ti) - 1.0 / (4 * b)) < 1e-12:
            h[i] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                       + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    return h / np.sqrt(np.sum(h ** 2))


def _shape(symbols, spec: WaveformSpec, n_out):
    sps_ = spec.sps
    up = np.zeros(len(symbols) * sps_, dtype=np.complex128)
    up[::sps_] = symbols
    if spec.pulse_shape == "rect":
        return np.repeat(symbols, sps_)[:n_out]
    h = rrc_taps(sps_, spec.rolloff) * np.sqrt(sps_)
    y = np.convolve(up, h)
    d = (len(h) - 1) // 2
    return y[d:d + n_out]


def _carrier(n, spec: WaveformSpec, phase0):
    t = np.arange(n) / spec.sample_rate
    return np.exp(1j * (2 * np.pi * spec.carrier_offset * t + phase0))


# ---------------------------------------------------------------- generators


def _gen_psk_ask(spec, n, rng):
    n_sym = n // spec.sps + 2
    bits = rng.integers(0, 2, n_sym)
    if spec.modulation == "BPSK":
        sym = (2.0 * bits - 1.0).astype(np.complex128)
    else:
        lo, hi = spec.ask_levels
        sym = np.where(bits == 1, hi, lo).astype(np.complex128)
    return _shape(sym, spec, n)


def _lowpass_message(spec, n, rng):
    pad = 256
    noise = rng.standard_normal(n + 2 * pad)
    taps = sps.firwin(129, spec.message_bandwidth, fs=spec.sample_rate)
    msg = np.convolve(noise, taps, mode="same")[pad:pad + n]
    return msg / (np.max(np.abs(msg)) + 1e-30)


def _gen_am(spec, n, rng):
    msg = _lowpass_message(spec, n, rng)
    if spec.modulation == "AM-DSB":
        return (1.0 + spec.am_index * msg).astype(np.complex128)
    return sps.hilbert(msg)  # upper sideband, suppressed carrier


def _gen_gfsk(spec, n, rng):
    sps_ = spec.sps
    n_sym = n // sps_ + 8
    nrz = np.repeat(2.0 * rng.integers(0, 2, n_sym) - 1.0, sps_)
    sigma = math.sqrt(math.log(2.0)) / (2 * math.pi * spec.gfsk_bt)
    t = np.arange(-2 * sps_, 2 * sps_ + 1) / sps_
    g = np.exp(-0.5 * (t / sigma) ** 2)
    freq = np.convolve(nrz, g / g.sum(), mode="same")
    dev = 0.5 * spec.gfsk_h * spec.symbol_rate
    phase = 2 * np.pi * dev * np.cumsum(freq) / spec.sample_rate
    return np.exp(1j * phase)[:n]


_QPSK_PHASE = np.array([0.0, np.pi / 2, np.pi, 3 * np.pi / 2])


def cck_codeword(p1, p2, p3, p4):
    """8-chip complementary code keying codeword for phases (p1..p4)."""
    e = np.exp
    return np.array([
        e(1j * (p1 + p2 + p3 + p4)),
        e(1j * (p1 + p3 + p4)),
        e(1j * (p1 + p2 + p4)),
        -e(1j * (p1 + p4)),
        e(1j * (p1 + p2 + p3)),
        e(1j * (p1 + p3)),
        -e(1j * (p1 + p2)),
        e(1j * p1),
    ])


def _gen_cck(spec, n, rng):
    spc = spec.sps
    n_sym = n // (8 * spc) + 2
    q = rng.integers(0, 4, (n_sym, 4))
    phases = _QPSK_PHASE[q]
    phases[:, 0] = np.cumsum(phases[:, 0])  # first phase is differentially encoded
    chips = np.concatenate([cck_codeword(*p) for p in phases])
    return np.repeat(chips, spc)[:n]


_OQPSK_SEQ0 = np.array([int(c) for c in "11011001110000110101001000101110"])


def oqpsk_chip_table():
    """16 x 32 chip table: cyclic shifts by 4 chips, upper half with odd chips inverted."""
    rows = [np.roll(_OQPSK_SEQ0, 4 * k) for k in range(8)]
    odd = np.zeros(32, dtype=bool)
    odd[1::2] = True
    rows += [np.where(odd, 1 - r, r) for r in rows[:8]]
    return np.array(rows)


def _gen_oqpsk(spec, n, rng):
    spc = spec.sps
    table = oqpsk_chip_table()
    n_sym = n // (32 * spc) + 2
    chips = 2.0 * table[rng.integers(0, 16, n_sym)].reshape(-1) - 1.0
    i_chips, q_chips = chips[0::2], chips[1::2]
    # half-sine pulses spanning two chip periods, Q offset by one chip period
    pulse = np.sin(np.pi * np.arange(2 * spc) / (2 * spc))
    L = len(i_chips) * 2 * spc + spc
    i_sig = np.zeros(L)
    q_sig = np.zeros(L)
    for k, (ci, cq) in enumerate(zip(i_chips, q_chips)):
        s = k * 2 * spc
        i_sig[s:s + 2 * spc] += ci * pulse
        q_sig[s + spc:s + 3 * spc] += cq * pulse
    return (i_sig + 1j * q_sig)[spc:spc + n]


def fmcw_inst_freq(spec: WaveformSpec, n, start_index=0):
    """Instantaneous frequency (Hz, before carrier offset) of the sawtooth chirp."""
    pp = spec.pulse_params
    sweep = pp.pri * spec.sample_rate
    k = (np.arange(n) + start_index) % sweep
    return -0.5 * pp.chirp_bandwidth + pp.chirp_bandwidth * k / sweep


def _gen_fmcw(spec, n, rng):
    sweep = int(round(spec.pulse_params.pri * spec.sample_rate))
    start = int(rng.integers(0, sweep))
    f = fmcw_inst_freq(spec, n, start)
    phase = np.concatenate([[0.0], 2 * np.pi * np.cumsum(f[:-1]) / spec.sample_rate])
    return np.exp(1j * phase)


def pcw_on_count(spec: WaveformSpec) -> int:
    pp = spec.pulse_params
    n_pri = int(round(pp.pri * spec.sample_rate))
    return int(math.ceil(pp.pulse_width / pp.pri * n_pri - 1e-9))


def _gen_pcw(spec, n, rng):
    n_pri = int(round(spec.pulse_params.pri * spec.sample_rate))
    start = int(rng.integers(0, n_pri))
    k = (np.arange(n) + start) % n_pri
    return (k < pcw_on_count(spec)).astype(np.complex128)


_GENERATORS = {
    "BPSK": _gen_psk_ask,
    "ASK": _gen_psk_ask,
    "AM-DSB": _gen_am,
    "AM-SSB": _gen_am,
    "GFSK": _gen_gfsk,
    "DSSS-CCK": _gen_cck,
    "DSSS-OQPSK": _gen_oqpsk,
    "FMCW": _gen_fmcw,
    "PCW": _gen_pcw,
}


def gen_baseband(spec: WaveformSpec, n_samples: int, seed) -> np.ndarray:
    """Noiseless complex baseband waveform of ``n_samples`` samples.

    The carrier offset is applied with a random initial phase drawn from the
    same seeded generator.
    """
    spec.validate()
    if n_samples < FRAME_LEN:
        raise ValueError(f"n_samples must be >= {FRAME_LEN}")
    rng = np.random.default_rng(seed)
    base = _GENERATORS[spec.modulation](spec, n_samples, rng)
    phase0 = rng.uniform(0, 2 * np.pi)
    return np.asarray(base, dtype=np.complex128) * _carrier(n_samples, spec, phase0)


def with_offset(spec: WaveformSpec, carrier_offset: float) -> WaveformSpec:
    return replace(spec, carrier_offset=carrier_offset)


# ---------------------------------------------------------------- noise / framing


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericInputError("signal contains NaN or Inf")


def apply_awgn(signal, snr_db, seed=None, signal_power=None, frame_len=FRAME_LEN):
    """Add circular complex Gaussian noise at ``snr_db``.

    SNR is frame energy over expected noise energy per ``frame_len`` block.
    Signal power is measured per block unless ``signal_power`` (per sample)
    is given. ``snr_db=inf`` returns an unchanged copy.
    """
    x = np.asarray(signal, dtype=np.complex128)
    _check_finite(x)
    if snr_db is None or math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    snr_lin = 10.0 ** (snr_db / 10.0)
    if signal_power is not None:
        power = np.full(x.shape[-1], float(signal_power))
    else:
        power = np.empty(x.shape[-1])
        for s in range(0, x.shape[-1], frame_len):
            seg = x[..., s:s + frame_len]
            power[s:s + frame_len] = np.mean(np.abs(seg) ** 2)
    sigma = np.sqrt(power / snr_lin / 2.0)
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + sigma * noise


def awgn_frames(frames, snr_db, rng):
    """Batch AWGN for unit-energy frames of shape ``(n, frame_len)``."""
    if math.isinf(snr_db):
        return frames.copy()
    n, L = frames.shape
    sigma = math.sqrt(1.0 / (L * 10.0 ** (snr_db / 10.0)) / 2.0)
    noise = rng.standard_normal((n, L)) + 1j * rng.standard_normal((n, L))
    return frames + sigma * noise


@dataclass
class ComplexFrame:
    iq: np.ndarray
    snr_db: float = float("nan")
    config_id: str = ""

    def __post_init__(self):
        if self.iq.shape != (FRAME_LEN,):
            raise ValueError(f"frame must hold exactly {FRAME_LEN} samples, got {self.iq.shape}")

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.iq) ** 2))


def normalize_rows(frames):
    """Scale each row to unit energy; all-zero rows are dropped. Returns (frames, keep_mask)."""
    e = np.sum(np.abs(frames) ** 2, axis=-1)
    keep = e > 0
    return frames[keep] / np.sqrt(e[keep])[:, None], keep


def frame_array(signal, frame_len=FRAME_LEN):
    x = np.asarray(signal, dtype=np.complex128)
    if x.shape[0] < frame_len:
        raise ValueError(f"need at least {frame_len} samples")
    n = x.shape[0] // frame_len
    out, _ = normalize_rows(x[:n * frame_len].reshape(n, frame_len))
    if out.shape[0] == 0:
        warnings.warn("every frame was all-zero; nothing to keep", EmptyOutputWarning, stacklevel=2)
    return out


def frame_and_normalize(signal, snr_db=float("nan"), config_id="") -> list[ComplexFrame]:
    """Non-overlapping 128-sample frames, each scaled to unit energy."""
    return [ComplexFrame(row, snr_db, config_id) for row in frame_array(signal)]


def to_network_input(iq):
    """(..., 128) complex -> (..., 16, 16, 1) float32: I samples then Q samples, row-major."""
    iq = np.asarray(iq)
    flat = np.concatenate([iq.real, iq.imag], axis=-1).astype(np.float32)
    return flat.reshape(iq.shape[:-1] + (16, 16, 1))
