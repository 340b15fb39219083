"""Modulation / signal class tables and the legal pairings between them."""

MODULATIONS = (
    "BPSK",
    "ASK",
    "AM-DSB",
    "AM-SSB",
    "GFSK",
    "DSSS-CCK",
    "DSSS-OQPSK",
    "FMCW",
    "PCW",
)

SIGNALS = (
    "SATCOM",
    "Short-Range",
    "AM-Radio",
    "Bluetooth",
    "IEEE802.11bg",
    "IEEE802.15.4",
    "Radar-Altimeter",
    "Airborne-detection",
    "Airborne-range",
    "Ground-mapping",
    "Air-Ground-MTI",
)

# (modulation, signal) pairs in table order; one entry per distinct waveform
PAIRS = (
    ("BPSK", "SATCOM"),
    ("ASK", "Short-Range"),
    ("AM-DSB", "AM-Radio"),
    ("AM-SSB", "AM-Radio"),
    ("GFSK", "Bluetooth"),
    ("DSSS-CCK", "IEEE802.11bg"),
    ("DSSS-OQPSK", "IEEE802.15.4"),
    ("FMCW", "Radar-Altimeter"),
    ("PCW", "Airborne-detection"),
    ("PCW", "Airborne-range"),
    ("PCW", "Ground-mapping"),
    ("PCW", "Air-Ground-MTI"),
)

# signal classes whose reference captures come from an external interference
# dataset; locally they exist only as synthetic stand-ins or imported frames
EXTERNAL_SIGNALS = ("Bluetooth", "IEEE802.11bg", "IEEE802.15.4")

# the nine waveforms that are fully synthesized (6 modulations, 8 signals)
LOCAL_PAIRS = tuple(p for p in PAIRS if p[1] not in EXTERNAL_SIGNALS)

NUM_MOD = len(MODULATIONS)
NUM_SIG = len(SIGNALS)


class ClassTableError(ValueError):
    """A (modulation, signal) pair outside the class table."""


def mod_index(name):
    return MODULATIONS.index(name)


def sig_index(name):
    return SIGNALS.index(name)


def check_pair(modulation, signal):
    if (modulation, signal) not in PAIRS:
        raise ClassTableError(f"({modulation!r}, {signal!r}) is not in the class table")


def table_json():
    return {"modulations": list(MODULATIONS), "signals": list(SIGNALS), "pairs": [list(p) for p in PAIRS]}
