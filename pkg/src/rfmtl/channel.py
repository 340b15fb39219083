"""Dynamic channel and hardware impairments.

Order of application: sample-rate offset, carrier-frequency offset, Rician
frequency-selective fading, then AWGN. Offsets follow Gaussian random walks
folded into ``[-max, max]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import kernels
from .waveforms import DEFAULT_SAMPLE_RATE, apply_awgn


class ChannelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    cfo_stddev_per_sample: float = 0.0  # Hz
    cfo_max: float = 0.0  # Hz
    sro_stddev_per_sample: float = 0.0  # Hz
    sro_max: float = 0.0  # Hz
    fading_num_sinusoids: int = 0
    max_doppler: float = 0.0  # Hz
    rician_k: float = 0.0
    pdp_delays: tuple = (0.0,)  # fractional samples
    pdp_magnitudes: tuple = (1.0,)
    num_taps: int = 1
    awgn_snr_db: Optional[float] = None
    fading: bool = False
    cfo_initial: float = 0.0
    sro_initial: float = 0.0
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def validate(self):
        if len(self.pdp_delays) != len(self.pdp_magnitudes):
            raise ChannelConfigError("pdp_delays and pdp_magnitudes differ in length")
        if self.rician_k < 0:
            raise ChannelConfigError("rician_k must be >= 0")
        if self.fading and self.fading_num_sinusoids < 1:
            raise ChannelConfigError("fading needs at least one sinusoid")
        if self.num_taps < 1:
            raise ChannelConfigError("num_taps must be >= 1")
        for name in ("cfo_stddev_per_sample", "cfo_max", "sro_stddev_per_sample", "sro_max", "max_doppler"):
            if getattr(self, name) < 0:
                raise ChannelConfigError(f"{name} must be >= 0")
        if abs(self.cfo_initial) > self.cfo_max and (self.cfo_initial or self.cfo_max):
            raise ChannelConfigError("cfo_initial exceeds cfo_max")
        if abs(self.sro_initial) > self.sro_max and (self.sro_initial or self.sro_max):
            raise ChannelConfigError("sro_initial exceeds sro_max")
        return self

    @classmethod
    def canonical(cls, awgn_snr_db=None):
        """Dynamic settings table values."""
        return cls(
            cfo_stddev_per_sample=0.05,
            cfo_max=250.0,
            sro_stddev_per_sample=0.05,
            sro_max=60.0,
            fading_num_sinusoids=5,
            max_doppler=2.0,
            rician_k=3.0,
            pdp_delays=(0.2, 0.3, 0.1),
            pdp_magnitudes=(1.0, 0.5, 0.5),
            num_taps=5,
            awgn_snr_db=awgn_snr_db,
            fading=True,
        )

    def to_json(self):
        d = asdict(self)
        d["pdp_delays"] = list(self.pdp_delays)
        d["pdp_magnitudes"] = list(self.pdp_magnitudes)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["pdp_delays"] = tuple(d.get("pdp_delays", (0.0,)))
        d["pdp_magnitudes"] = tuple(d.get("pdp_magnitudes", (1.0,)))
        return cls(**d)


def offset_walk(n, stddev, limit, start, rng):
    """Per-sample offset track (Hz) of length ``n``; ``walk[0] == start``."""
    inc = rng.standard_normal(n) * stddev
    inc[0] = 0.0
    walk = kernels.folded_walk(inc, start, limit)
    assert np.all(np.abs(walk) <= limit * (1 + 1e-12) + 1e-12), "offset walk left its bounds"
    return walk


def _resample(x, sro, fs):
    # sample n of the output sits at input position n + accumulated rate error
    drift = np.concatenate([[0.0], np.cumsum(sro[:-1] / fs)])
    positions = np.arange(x.shape[0]) + drift
    return kernels.sinc_interp(x, positions)


def _rotate(x, cfo, fs):
    phase = 2 * np.pi / fs * np.concatenate([[0.0], np.cumsum(cfo[:-1])])
    return x * np.exp(1j * phase)


def fading_gains(n, cfg: ChannelConfig, rng):
    """Per-path complex gain tracks, shape ``(paths, n)``."""
    mags = np.asarray(cfg.pdp_magnitudes, dtype=np.float64)
    if not cfg.fading:
        return np.repeat(mags[:, None], n, axis=1).astype(np.complex128)
    t = np.arange(n) / cfg.sample_rate
    K = cfg.rician_k
    M = cfg.fading_num_sinusoids
    fd = cfg.max_doppler
    gains = np.empty((len(mags), n), dtype=np.complex128)
    for i, m in enumerate(mags):
        theta = rng.uniform(-np.pi, np.pi)
        phi0 = rng.uniform(-np.pi, np.pi)
        los = np.exp(1j * (2 * np.pi * fd * np.cos(theta) * t + phi0))
        alpha = rng.uniform(-np.pi, np.pi, M)
        phi = rng.uniform(-np.pi, np.pi, M)
        diffuse = np.exp(1j * (2 * np.pi * fd * np.cos(alpha)[:, None] * t + phi[:, None])).sum(0) / np.sqrt(M)
        gains[i] = m * (np.sqrt(K / (K + 1)) * los + np.sqrt(1 / (K + 1)) * diffuse)
    return gains


def _multipath(x, gains, cfg: ChannelConfig):
    T = cfg.num_taps
    ks = np.arange(T) - (T - 1) // 2  # centered FIR
    delays = np.asarray(cfg.pdp_delays, dtype=np.float64)
    interp = np.sinc(ks[None, :] - delays[:, None])  # (paths, taps)
    taps = interp.T @ gains  # (taps, n)
    n = x.shape[0]
    y = np.zeros(n, dtype=np.complex128)
    for j, k in enumerate(ks):
        shifted = np.zeros(n, dtype=np.complex128)
        if k >= 0:
            shifted[k:] = x[:n - k]
        else:
            shifted[:k] = x[-k:]
        y += taps[j] * shifted
    return y


def apply_dynamic_channel(signal, cfg: ChannelConfig, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    x = np.asarray(signal, dtype=np.complex128)
    n = x.shape[0]
    fs = cfg.sample_rate
    if cfg.sro_stddev_per_sample > 0 or cfg.sro_initial != 0:
        sro = offset_walk(n, cfg.sro_stddev_per_sample, cfg.sro_max, cfg.sro_initial, rng)
        x = _resample(x, sro, fs)
    if cfg.cfo_stddev_per_sample > 0 or cfg.cfo_initial != 0:
        cfo = offset_walk(n, cfg.cfo_stddev_per_sample, cfg.cfo_max, cfg.cfo_initial, rng)
        x = _rotate(x, cfo, fs)
    x = _multipath(x, fading_gains(n, cfg, rng), cfg)
    if cfg.awgn_snr_db is not None:
        x = apply_awgn(x, cfg.awgn_snr_db, rng)
    return x
