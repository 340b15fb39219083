"""Labeled dataset assembly, stratified splits, and the container file format.

Container layout (all integers little-endian)::

    b"RFMTL1"  u16 version
    u32 len + UTF-8 JSON class tables
    u32 len + UTF-8 JSON manifest
    3 x (u32 count + u32 sorted ids)      train, val, test
    u32 record count
    records: u32 id, u8 mod, u8 sig, i16 snr (centi-dB), 256 x f32 (I[0:128], Q[0:128])
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import classes
from .channel import ChannelConfig, apply_dynamic_channel
from .waveforms import (
    FRAME_LEN,
    WaveformSpec,
    PulseParams,
    awgn_frames,
    default_spec,
    frame_array,
    gen_baseband,
    normalize_rows,
    with_offset,
)

MAGIC = b"RFMTL1"
VERSION = 1
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.7, 0.2, 0.1)

_RECORD = np.dtype([
    ("id", "<u4"),
    ("mod", "u1"),
    ("sig", "u1"),
    ("snr", "<i2"),
    ("iq", "<f4", (2 * FRAME_LEN,)),
])


class SplitInfeasibleError(ValueError):
    pass


class ContainerFormatError(ValueError):
    pass


@dataclass
class LabeledExample:
    id: int
    iq: np.ndarray
    mod_label: int
    sig_label: int
    snr_db: float


# ---------------------------------------------------------------- generation config


@dataclass
class Cell:
    spec: WaveformSpec
    snr_db: float
    channel: Optional[ChannelConfig] = None

    def to_json(self):
        s = self.spec
        d = {
            "modulation": s.modulation,
            "signal_class": s.signal_class,
            "symbol_rate": s.symbol_rate,
            "sample_rate": s.sample_rate,
            "carrier_offset": s.carrier_offset,
            "pulse_shape": s.pulse_shape,
            "rolloff": s.rolloff,
            "ask_levels": list(s.ask_levels),
            "am_index": s.am_index,
            "message_bandwidth": s.message_bandwidth,
            "gfsk_bt": s.gfsk_bt,
            "gfsk_h": s.gfsk_h,
            "pulse_params": None if s.pulse_params is None else [
                s.pulse_params.pulse_width, s.pulse_params.pri, s.pulse_params.chirp_bandwidth],
        }
        return {"spec": d, "snr_db": self.snr_db,
                "channel": None if self.channel is None else self.channel.to_json()}

    @classmethod
    def from_json(cls, d):
        s = dict(d["spec"])
        pp = s.pop("pulse_params")
        s["ask_levels"] = tuple(s["ask_levels"])
        spec = WaveformSpec(pulse_params=None if pp is None else PulseParams(*pp), **s)
        ch = d.get("channel")
        return cls(spec=spec, snr_db=d["snr_db"], channel=None if ch is None else ChannelConfig.from_json(ch))


@dataclass
class GenConfig:
    cells: list
    per_cell: int
    seed: int = 0
    frames_per_burst: int = 8
    carrier_span: float = 5e3  # Hz; per-burst carrier drawn from U(-span, span)

    @classmethod
    def grid(cls, snrs_db, per_cell, mode="awgn", seed=0, pairs=classes.PAIRS, channel=None, **kw):
        """Every (pair, SNR) combination; ``mode='dynamic'`` attaches the canonical channel."""
        if mode not in ("awgn", "dynamic"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "dynamic" and channel is None:
            channel = ChannelConfig.canonical()
        ch = channel if mode == "dynamic" else None
        cells = [Cell(default_spec(m, s), float(snr), ch) for (m, s) in pairs for snr in snrs_db]
        return cls(cells=cells, per_cell=per_cell, seed=seed, **kw)

    def to_json(self):
        return {
            "cells": [c.to_json() for c in self.cells],
            "per_cell": self.per_cell,
            "seed": self.seed,
            "frames_per_burst": self.frames_per_burst,
            "carrier_span": self.carrier_span,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            cells=[Cell.from_json(c) for c in d["cells"]],
            per_cell=d["per_cell"],
            seed=d["seed"],
            frames_per_burst=d.get("frames_per_burst", 8),
            carrier_span=d.get("carrier_span", 5e3),
        )


def cell_seeds(seed, n_cells):
    """Independent 63-bit sub-seeds, one per cell."""
    root = np.random.SeedSequence(seed)
    return [int(s.generate_state(2, np.uint64)[0] >> np.uint64(1)) for s in root.spawn(n_cells)]


def generate_cell(cell: Cell, n, seed, frames_per_burst=8, carrier_span=5e3):
    """``n`` unit-energy noisy frames for one cell, shape ``(n, 128)``."""
    rng = np.random.default_rng(seed)
    got = []
    total = 0
    burst_len = frames_per_burst * FRAME_LEN
    while total < n:
        spec = with_offset(cell.spec, cell.spec.carrier_offset + rng.uniform(-carrier_span, carrier_span))
        x = gen_baseband(spec, burst_len, int(rng.integers(2 ** 63)))
        if cell.channel is not None:
            ch = cell.channel
            # a folded walk is uniform in steady state; start each burst there
            ch = replace(
                ch,
                cfo_initial=rng.uniform(-ch.cfo_max, ch.cfo_max),
                sro_initial=rng.uniform(-ch.sro_max, ch.sro_max),
                awgn_snr_db=None,
            )
            x = apply_dynamic_channel(x, ch, int(rng.integers(2 ** 63)))
        f = frame_array(x)
        got.append(f)
        total += f.shape[0]
    frames = np.concatenate(got)[:n]
    noisy = awgn_frames(frames, cell.snr_db, rng)
    out, keep = normalize_rows(noisy)
    assert keep.all()
    return out


def _cell_job(args):
    cell, n, seed, fpb, span = args
    return generate_cell(cell, n, seed, fpb, span)


def n_workers():
    try:
        return max(1, int(os.environ.get("RFMTL_THREADS", "1")))
    except ValueError:
        return 1


def split_counts(n):
    if n < 10:
        raise SplitInfeasibleError(f"cell has {n} examples; at least 10 are needed for a 70/20/10 split")
    n_train = int(round(SPLIT_RATIOS[0] * n))
    n_val = int(round(SPLIT_RATIOS[1] * n))
    return n_train, n_val, n - n_train - n_val


def build_dataset(gen: GenConfig) -> "DatasetContainer":
    split_counts(gen.per_cell)
    seeds = cell_seeds(gen.seed, len(gen.cells))
    jobs = [(c, gen.per_cell, s, gen.frames_per_burst, gen.carrier_span) for c, s in zip(gen.cells, seeds)]
    workers = min(n_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            blocks = list(ex.map(_cell_job, jobs))
    else:
        blocks = [_cell_job(j) for j in jobs]

    n = gen.per_cell
    mods, sigs, snrs, cell_ids = [], [], [], []
    for k, c in enumerate(gen.cells):
        mods.append(np.full(n, classes.mod_index(c.spec.modulation), np.uint8))
        sigs.append(np.full(n, classes.sig_index(c.spec.signal_class), np.uint8))
        snrs.append(np.full(n, snr_to_centi(c.snr_db), np.int16))
        cell_ids.append(np.full(n, k))
    cell_ids = np.concatenate(cell_ids)
    ids = np.arange(len(cell_ids), dtype=np.uint32)

    split_rng = np.random.default_rng(np.random.SeedSequence([gen.seed, 0x5EED]))
    splits = {name: [] for name in SPLITS}
    for k in range(len(gen.cells)):
        members = ids[cell_ids == k]
        perm = members[split_rng.permutation(len(members))]
        a, b, _ = split_counts(len(members))
        splits["train"].append(perm[:a])
        splits["val"].append(perm[a:a + b])
        splits["test"].append(perm[a + b:])
    splits = {k: np.sort(np.concatenate(v)).astype(np.uint32) for k, v in splits.items()}

    manifest = {"generator": gen.to_json(), "cell_seeds": seeds, "split_ratios": list(SPLIT_RATIOS)}
    return DatasetContainer(
        ids=ids,
        mod=np.concatenate(mods),
        sig=np.concatenate(sigs),
        snr_centi=np.concatenate(snrs),
        iq=np.concatenate(blocks).astype(np.complex64),
        splits=splits,
        manifest=manifest,
    )


def snr_to_centi(snr_db):
    return int(round(float(snr_db) * 100))


# ---------------------------------------------------------------- container


@dataclass
class DatasetContainer:
    ids: np.ndarray
    mod: np.ndarray
    sig: np.ndarray
    snr_centi: np.ndarray
    iq: np.ndarray  # complex64 (n, 128), unit energy rows
    splits: dict
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, id_) -> LabeledExample:
        k = self._pos[int(id_)]
        return LabeledExample(int(self.ids[k]), self.iq[k], int(self.mod[k]), int(self.sig[k]),
                              self.snr_centi[k] / 100.0)

    @property
    def snr_db(self):
        return self.snr_centi / 100.0

    def index(self, split):
        return np.array([self._pos[int(i)] for i in self.splits[split]], dtype=np.int64)

    def arrays(self, split):
        """(iq, mod, sig, snr_db) for one split."""
        k = self.index(split)
        return self.iq[k], self.mod[k], self.sig[k], self.snr_centi[k] / 100.0

    def validate(self):
        all_ids = set(int(i) for i in self.ids)
        seen = set()
        for name in SPLITS:
            s = set(int(i) for i in self.splits[name])
            if s & seen:
                raise ContainerFormatError("splits overlap")
            seen |= s
        if seen != all_ids:
            raise ContainerFormatError("splits do not partition the id set")
        if np.any(self.mod >= classes.NUM_MOD) or np.any(self.sig >= classes.NUM_SIG):
            raise ContainerFormatError("label out of range")
        for m, s in set(zip(self.mod.tolist(), self.sig.tolist())):
            classes.check_pair(classes.MODULATIONS[m], classes.SIGNALS[s])
        return self

    @classmethod
    def from_arrays(cls, iq, mod, sig, snr_db, seed=0, manifest=None):
        """Import externally captured frames; frames are renormalized and split per (pair, SNR) cell."""
        iq = np.asarray(iq, dtype=np.complex128)
        iq, keep = normalize_rows(iq)
        mod = np.asarray(mod, dtype=np.uint8)[keep]
        sig = np.asarray(sig, dtype=np.uint8)[keep]
        snr = np.array([snr_to_centi(v) for v in np.asarray(snr_db, dtype=np.float64)[keep]], dtype=np.int16)
        ids = np.arange(len(mod), dtype=np.uint32)
        rng = np.random.default_rng(seed)
        splits = {name: [] for name in SPLITS}
        keys = np.stack([mod.astype(np.int64), sig.astype(np.int64), snr.astype(np.int64)], axis=1)
        for key in np.unique(keys, axis=0):
            members = ids[np.all(keys == key, axis=1)]
            perm = members[rng.permutation(len(members))]
            a, b, _ = split_counts(len(members))
            splits["train"].append(perm[:a])
            splits["val"].append(perm[a:a + b])
            splits["test"].append(perm[a + b:])
        splits = {k: np.sort(np.concatenate(v)).astype(np.uint32) for k, v in splits.items()}
        out = cls(ids, mod, sig, snr, iq.astype(np.complex64), splits, dict(manifest or {"imported": True}))
        return out.validate()

    # ------------------------------------------------------------ file io

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<H", VERSION)]
        for obj in (classes.table_json(), self.manifest):
            blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
            parts += [struct.pack("<I", len(blob)), blob]
        for name in SPLITS:
            s = np.asarray(self.splits[name], dtype="<u4")
            parts += [struct.pack("<I", len(s)), s.tobytes()]
        rec = np.zeros(len(self.ids), dtype=_RECORD)
        rec["id"] = self.ids
        rec["mod"] = self.mod
        rec["sig"] = self.sig
        rec["snr"] = self.snr_centi
        rec["iq"][:, :FRAME_LEN] = self.iq.real
        rec["iq"][:, FRAME_LEN:] = self.iq.imag
        parts += [struct.pack("<I", len(rec)), rec.tobytes()]
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DatasetContainer":
        if buf[:6] != MAGIC:
            raise ContainerFormatError("bad magic")
        (version,) = struct.unpack_from("<H", buf, 6)
        if version != VERSION:
            raise ContainerFormatError(f"unsupported version {version}")
        off = 8
        blobs = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", buf, off)
            blobs.append(json.loads(buf[off + 4:off + 4 + n].decode("utf-8")))
            off += 4 + n
        table, manifest = blobs
        if table != classes.table_json():
            raise ContainerFormatError("class table does not match this build")
        splits = {}
        for name in SPLITS:
            (n,) = struct.unpack_from("<I", buf, off)
            splits[name] = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 4).astype(np.uint32)
            off += 4 + 4 * n
        (n,) = struct.unpack_from("<I", buf, off)
        rec = np.frombuffer(buf, dtype=_RECORD, count=n, offset=off + 4)
        if off + 4 + n * _RECORD.itemsize != len(buf):
            raise ContainerFormatError("trailing or missing bytes")
        iq = (rec["iq"][:, :FRAME_LEN] + 1j * rec["iq"][:, FRAME_LEN:]).astype(np.complex64)
        return cls(
            ids=rec["id"].astype(np.uint32),
            mod=rec["mod"].astype(np.uint8),
            sig=rec["sig"].astype(np.uint8),
            snr_centi=rec["snr"].astype(np.int16),
            iq=iq,
            splits=splits,
            manifest=manifest,
        )

    @classmethod
    def load(cls, path) -> "DatasetContainer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
