"""Accuracy curves, confusion matrices, latency and model comparison reports."""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel, classes
from .mtl import MtlModel, split_arrays
from .waveforms import to_network_input

TASKS = ("mod", "sig")
REFERENCE_LATENCY_MS = 8.4


class EvalError(ValueError):
    pass


def _predict(model, x):
    """Dispatch to ``predict_arrays`` or a plain callable returning (mod probs, sig probs)."""
    if hasattr(model, "predict_arrays"):
        return model.predict_arrays(x)
    return model(x)


def _labels(task):
    if task not in TASKS:
        raise EvalError(f"unknown task {task!r}")
    return classes.MODULATIONS if task == "mod" else classes.SIGNALS


# ---------------------------------------------------------------- accuracy


def accuracy_table(pred_mod, pred_sig, y_mod, y_sig, snr):
    """{task: {snr: accuracy}} from label arrays; empty SNR cells never appear."""
    out = {}
    for task, p, y in (("mod", pred_mod, y_mod), ("sig", pred_sig, y_sig)):
        p, y = np.asarray(p), np.asarray(y)
        out[task] = {float(s): float(np.mean(p[snr == s] == y[snr == s])) for s in np.unique(snr)}
    return out


def accuracy_by_snr(model, dataset, split="test"):
    x, ym, ys, snr = split_arrays(dataset, split)
    if len(x) == 0:
        raise EvalError(f"{split} split is empty")
    pm, ps = _predict(model, x)
    return accuracy_table(pm.argmax(1), ps.argmax(1), ym, ys, snr)


def accuracy_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["snr_db", "mod_acc", "sig_acc"])
    for s in sorted(set(table["mod"]) | set(table["sig"])):
        w.writerow([s, table["mod"].get(s, ""), table["sig"].get(s, "")])
    return buf.getvalue()


def snr_spearman(curve: dict) -> float:
    """Spearman rank correlation between SNR and accuracy for one task curve."""
    from scipy.stats import spearmanr

    snrs = sorted(curve)
    if len(snrs) < 2 or len({curve[s] for s in snrs}) == 1:
        return float("nan")  # undefined for a flat curve
    return float(spearmanr(snrs, [curve[s] for s in snrs])[0])


# ---------------------------------------------------------------- confusion


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction
    labels: tuple
    normalization: str = "none"

    @classmethod
    def from_labels(cls, truth, pred, labels):
        k = len(labels)
        c = np.zeros((k, k), dtype=np.int64)
        np.add.at(c, (np.asarray(truth), np.asarray(pred)), 1)
        return cls(c, tuple(labels))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def normalized(self):
        """Row-normalized copy; rows without examples stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self, normalized=False) -> str:
        m = self.normalized() if normalized else self.counts
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred", *self.labels])
        for name, row in zip(self.labels, m):
            w.writerow([name, *(repr(float(v)) if normalized else int(v) for v in row)])
        return buf.getvalue()


def confusion(model, dataset, task, snr, split="test") -> ConfusionMatrix:
    labels = _labels(task)
    x, ym, ys, snrs = split_arrays(dataset, split)
    sel = np.isclose(snrs, snr)
    if not sel.any():
        raise EvalError(f"no {split} examples at {snr} dB")
    pm, ps = _predict(model, x[sel])
    p, y = (pm, ym) if task == "mod" else (ps, ys)
    return ConfusionMatrix.from_labels(y[sel], p.argmax(1), labels)


# ---------------------------------------------------------------- latency


def environment_fingerprint():
    import numpy

    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "numpy": numpy.__version__,
        "backend": _accel.backend(),
    }


def benchmark_latency(model, n_frames=200, repetitions=3, warmup=100, seed=0, predictor=None):
    """Single-frame wall-clock latency (ms), after a ``warmup``-frame warm-up."""
    rng = np.random.default_rng(seed)
    iq = rng.standard_normal((n_frames, 128)) + 1j * rng.standard_normal((n_frames, 128))
    iq /= np.linalg.norm(iq, axis=1, keepdims=True)
    x = to_network_input(iq)
    run = predictor or (lambda v: _predict(model, v))
    for i in range(warmup):
        run(x[i % n_frames][None])
    times = []
    outputs = None
    for _ in range(repetitions):
        preds = []
        for i in range(n_frames):
            t0 = time.perf_counter()
            pm, ps = run(x[i][None])
            times.append(time.perf_counter() - t0)
            preds.append((int(pm.argmax()), int(ps.argmax())))
        if outputs is None:
            outputs = preds
        elif preds != outputs:
            raise EvalError("predictions changed between repetitions")
    ms = np.asarray(times) * 1e3
    return {
        "median_ms": float(np.median(ms)),
        "mean_ms": float(ms.mean()),
        "p95_ms": float(np.percentile(ms, 95)),
        "n_frames": n_frames,
        "repetitions": repetitions,
        "warmup": warmup,
        "reference_ms": REFERENCE_LATENCY_MS,
        "environment": environment_fingerprint(),
    }


# ---------------------------------------------------------------- comparison


@dataclass
class ModelReport:
    name: str
    config: tuple
    flops: int
    params_biasless: int
    params_trainable: int
    params_total: int
    weight_payload_bytes: int
    latency: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    reductions: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def reduction_pct(value, baseline):
    return 100.0 * (1.0 - value / baseline)


def model_report(name, model: MtlModel, dataset=None, latency=True, latency_frames=100) -> ModelReport:
    pc = model.count_params()
    return ModelReport(
        name=name,
        config=model.cfg.as_tuple(),
        flops=model.count_flops(),
        params_biasless=pc.biasless,
        params_trainable=pc.trainable,
        params_total=pc.total,
        weight_payload_bytes=4 * pc.total,
        latency=benchmark_latency(model, n_frames=latency_frames, repetitions=1) if latency else {},
        accuracy=accuracy_by_snr(model, dataset) if dataset is not None else {},
    )


def compare_models(models, baseline=None, dataset=None, latency=True, latency_frames=100):
    """One ModelReport per ``(name, model)``; reductions are relative to ``baseline`` (a name).

    A positive reduction means the named model needs less than the baseline.
    """
    reports = [model_report(n, m, dataset, latency, latency_frames) for n, m in models]
    add_reductions(reports, baseline or reports[0].name)
    return reports


def add_reductions(reports, baseline):
    base = next((r for r in reports if r.name == baseline), None)
    if base is None:
        raise EvalError(f"baseline {baseline!r} not among the reports")
    for r in reports:
        r.reductions = {
            "baseline": baseline,
            "flops_pct": reduction_pct(r.flops, base.flops),
            "params_trainable_pct": reduction_pct(r.params_trainable, base.params_trainable),
            "params_biasless_pct": reduction_pct(r.params_biasless, base.params_biasless),
        }
    return reports


def reports_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
