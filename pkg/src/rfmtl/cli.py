"""``rfmtl`` command line: gen, train, eval, quantize, bench.

Every command writes into its own run directory, which holds the exact
resolved config (``config.json``) next to the artifacts. Passing that file
back through ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("rfmtl")

DATASET_FILE = "dataset.rfmtl"
CKPT_FILE = "model.ckpt"
PTQ_FILE = "ptq.qckpt"
QAT_FILE = "qat.qckpt"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def parse_snr_grid(text):
    """``start:stop:step`` in dB, stop inclusive; a bare number is a single point."""
    parts = [float(p) for p in str(text).split(":")]
    if len(parts) == 1:
        return parts
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise CliError(f"bad SNR grid {text!r}; expected start:stop:step with step > 0")
    start, stop, step = parts
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 6) for k in range(n)]


def parse_model_config(text):
    vals = tuple(int(v) for v in str(text).replace("(", "").replace(")", "").split(","))
    if len(vals) != 5:
        raise CliError(f"model config needs 5 integers (C_sh,C_m,F_m,C_s,F_s), got {text!r}")
    return vals


def resolve(args, defaults):
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        cfg.update({k: v for k, v in loaded.items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def open_run_dir(out, command):
    path = Path(out) if out else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if path.exists() and any(path.iterdir()):
        raise CliError(f"run directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger("rfmtl")
    for h in [h for h in logger.handlers if isinstance(h, logging.FileHandler)]:
        logger.removeHandler(h)
        h.close()
    handler = logging.FileHandler(path / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    return path


def write_config(run, command, cfg):
    (run / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def file_magic(path):
    with open(path, "rb") as f:
        head = f.read(8)
    for magic, kind in ((b"RFMTLQ1", "quantized"), (b"RFMTLW1", "checkpoint"), (b"RFMTL1", "dataset")):
        if head.startswith(magic):
            return kind
    return None


def validate_outputs(run, expected):
    """``expected`` maps file name -> kind ('dataset', 'checkpoint', 'quantized', 'json', 'csv')."""
    for name, kind in expected.items():
        p = run / name
        if not p.is_file():
            raise CliError(f"missing output {p}")
        if kind == "json":
            json.loads(p.read_text())
        elif kind == "csv":
            rows = list(csv.reader(io.StringIO(p.read_text())))
            if not rows:
                raise CliError(f"empty CSV {p}")
        elif file_magic(p) != kind:
            raise CliError(f"{p} does not carry the {kind} magic")


def load_model(path, allow_quantized=False):
    from .mtl import MtlModel
    from .quant import QuantizedModel

    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found")
    kind = file_magic(path)
    if kind == "checkpoint":
        return MtlModel.from_checkpoint(path.read_bytes())
    if kind == "quantized":
        if not allow_quantized:
            raise CliError(f"{path} is a quantized checkpoint; pass --quantized to evaluate it")
        return QuantizedModel.from_bytes(path.read_bytes())
    raise CliError(f"{path} is not a model checkpoint")


def load_dataset(path):
    from .dataset import DatasetContainer

    if not Path(path).is_file():
        raise CliError(f"dataset {path} not found")
    return DatasetContainer.load(path)


# ---------------------------------------------------------------- commands

GEN_DEFAULTS = {"mode": "awgn", "snr": "-20:18:2", "per_cell": 100, "seed": 0, "pairs": "all",
                "frames_per_burst": 8, "carrier_span": 5e3}


def cmd_gen(args):
    from . import classes
    from .dataset import GenConfig, build_dataset

    cfg = resolve(args, GEN_DEFAULTS)
    run = open_run_dir(args.out, "gen")
    write_config(run, "gen", cfg)
    pairs = {"all": classes.PAIRS, "local": classes.LOCAL_PAIRS}.get(cfg["pairs"])
    if pairs is None:
        raise CliError(f"--pairs must be 'all' or 'local', got {cfg['pairs']!r}")
    gen = GenConfig.grid(parse_snr_grid(cfg["snr"]), cfg["per_cell"], cfg["mode"], cfg["seed"], pairs,
                         frames_per_burst=cfg["frames_per_burst"], carrier_span=cfg["carrier_span"])
    t0 = time.perf_counter()
    ds = build_dataset(gen)
    ds.save(run / DATASET_FILE)
    (run / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    log.info("generated %d frames in %.1f s", len(ds.ids), time.perf_counter() - t0)
    validate_outputs(run, {DATASET_FILE: "dataset", "manifest.json": "json", "config.json": "json"})
    return run


TRAIN_DEFAULTS = {"data": None, "model_config": "8,4,256,4,256", "w_mod": 0.2, "w_sig": 0.8, "epochs": 30,
                  "patience": 5, "lr": 1e-3, "batch_size": 64, "seed": 0}


def cmd_train(args):
    from .mtl import LossWeights, MtlConfig, TrainConfig, build_model, train

    cfg = resolve(args, TRAIN_DEFAULTS)
    if not cfg["data"]:
        raise CliError("--data is required")
    ds = load_dataset(cfg["data"])
    run = open_run_dir(args.out, "train")
    write_config(run, "train", cfg)
    model = build_model(MtlConfig.from_tuple(parse_model_config(cfg["model_config"])), seed=cfg["seed"])
    tc = TrainConfig(max_epochs=cfg["epochs"], patience=cfg["patience"], learning_rate=cfg["lr"],
                     batch_size=cfg["batch_size"], seed=cfg["seed"])
    w = LossWeights(cfg["w_mod"], cfg["w_sig"])
    try:
        res = train(model, ds, tc, w, log=lambda row: log.info("epoch %s", row))
    except Exception:
        log.exception("training failed")
        raise
    (run / "history.csv").write_text(res.history_csv())
    (run / CKPT_FILE).write_bytes(model.to_checkpoint())
    (run / "summary.json").write_text(json.dumps(
        {"best_epoch": res.best_epoch, "stopped": res.stopped, "epochs_run": len(res.history)}, indent=2) + "\n")
    validate_outputs(run, {CKPT_FILE: "checkpoint", "history.csv": "csv", "summary.json": "json"})
    return run


EVAL_DEFAULTS = {"data": None, "ckpt": None, "snr": [-2.0, 0.0, 10.0], "quantized": False, "integer": False}


def cmd_eval(args):
    from .evalbench import ConfusionMatrix, accuracy_csv, accuracy_table, snr_spearman
    from .mtl import split_arrays

    cfg = resolve(args, EVAL_DEFAULTS)
    if not cfg["data"] or not cfg["ckpt"]:
        raise CliError("--data and --ckpt are required")
    model = load_model(cfg["ckpt"], allow_quantized=cfg["quantized"])
    ds = load_dataset(cfg["data"])
    run = open_run_dir(args.out, "eval")
    write_config(run, "eval", cfg)
    x, ym, ys, snr = split_arrays(ds, "test")
    if len(x) == 0:
        raise CliError("test split is empty")
    if cfg["quantized"]:
        pm, ps = model.predict_arrays(x, integer=cfg["integer"])
    else:
        pm, ps = model.predict_arrays(x)
    table = accuracy_table(pm.argmax(1), ps.argmax(1), ym, ys, snr)
    (run / "accuracy.csv").write_text(accuracy_csv(table))
    from . import classes

    expected = {"accuracy.csv": "csv", "eval.json": "json"}
    rho = {t: snr_spearman(table[t]) for t in table}
    summary = {"spearman": {t: (None if np.isnan(v) else v) for t, v in rho.items()}, "confusion": {}}
    for s in cfg["snr"]:
        sel = np.isclose(snr, s)
        if not sel.any():
            raise CliError(f"no test examples at {s} dB")
        for task, p, y, labels in (("mod", pm, ym, classes.MODULATIONS), ("sig", ps, ys, classes.SIGNALS)):
            cm = ConfusionMatrix.from_labels(y[sel], p[sel].argmax(1), labels)
            name = f"confusion_{task}_{s:g}dB.csv"
            (run / name).write_text(cm.to_csv())
            expected[name] = "csv"
            summary["confusion"][name] = {"total": cm.total, "accuracy": cm.accuracy}
    (run / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    validate_outputs(run, expected)
    return run


QUANT_DEFAULTS = {"data": None, "ckpt": None, "qat_epochs": 0, "calib_frames": 1024, "calib_mode": "percentile",
                  "w_mod": 0.2, "w_sig": 0.8, "lr": 1e-3, "batch_size": 64, "seed": 0}


def cmd_quantize(args):
    from .evalbench import accuracy_table
    from .mtl import LossWeights, TrainConfig, split_arrays
    from .quant import qat_finetune, quantize_model, size_report

    cfg = resolve(args, QUANT_DEFAULTS)
    if not cfg["data"] or not cfg["ckpt"]:
        raise CliError("--data and --ckpt are required")
    model = load_model(cfg["ckpt"])
    ds = load_dataset(cfg["data"])
    run = open_run_dir(args.out, "quantize")
    write_config(run, "quantize", cfg)
    xc = split_arrays(ds, "val")[0][:cfg["calib_frames"]]
    x, ym, ys, snr = split_arrays(ds, "test")

    def acc(pm, ps):
        return accuracy_table(pm.argmax(1), ps.argmax(1), ym, ys, snr)

    report = {"fp32": acc(*model.predict_arrays(x))}
    ptq = quantize_model(model, xc, cfg["calib_mode"])
    (run / PTQ_FILE).write_bytes(ptq.to_bytes())
    report["ptq"] = acc(*ptq.predict_arrays(x))
    report["degenerate_sites"] = ptq.calibration.degenerate
    expected = {PTQ_FILE: "quantized", "size_report.json": "json", "accuracy.json": "json"}
    if cfg["qat_epochs"] > 0:
        tc = TrainConfig(learning_rate=cfg["lr"],
                         batch_size=cfg["batch_size"], seed=cfg["seed"])
        tuned, _ = qat_finetune(model, ds, cfg["qat_epochs"], tc, LossWeights(cfg["w_mod"], cfg["w_sig"]),
                                cfg["calib_frames"], cfg["calib_mode"])
        qat = quantize_model(tuned, xc, cfg["calib_mode"])
        (run / QAT_FILE).write_bytes(qat.to_bytes())
        report["qat"] = acc(*qat.predict_arrays(x))
        expected[QAT_FILE] = "quantized"
    (run / "size_report.json").write_text(json.dumps(size_report(model, ptq), indent=2, sort_keys=True) + "\n")
    (run / "accuracy.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    validate_outputs(run, expected)
    return run


BENCH_DEFAULTS = {"ckpt": None, "configs": ["8,4,256,4,256"], "baseline": None, "latency_frames": 100,
                  "data": None}


def cmd_bench(args):
    from .evalbench import add_reductions, model_report, reports_json
    from .mtl import MtlConfig, build_model

    cfg = resolve(args, BENCH_DEFAULTS)
    models = []
    if cfg["ckpt"]:
        models.append(("checkpoint", load_model(cfg["ckpt"])))
    for c in cfg["configs"]:
        t = parse_model_config(c)
        models.append(("(" + ",".join(map(str, t)) + ")", build_model(MtlConfig.from_tuple(t), seed=0)))
    ds = load_dataset(cfg["data"]) if cfg["data"] else None
    run = open_run_dir(args.out, "bench")
    write_config(run, "bench", cfg)
    reports = [model_report(n, m, ds if n == "checkpoint" else None, True, cfg["latency_frames"])
               for n, m in models]
    add_reductions(reports, cfg["baseline"] or reports[0].name)
    (run / "report.json").write_text(reports_json(reports) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "flops", "params_biasless", "params_trainable", "params_total", "payload_bytes",
                "median_ms", "flops_reduction_pct", "params_reduction_pct"])
    for r in reports:
        w.writerow([r.name, r.flops, r.params_biasless, r.params_trainable, r.params_total,
                    r.weight_payload_bytes, r.latency.get("median_ms", ""),
                    r.reductions["flops_pct"], r.reductions["params_trainable_pct"]])
    (run / "report.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    validate_outputs(run, {"report.json": "json", "report.csv": "csv"})
    return run


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="rfmtl", description="Multi-task RF signal classification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (e.g. a previous run's config.json)")
        sp.add_argument("--out", help="run directory (must not exist or be empty)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="synthesize a dataset container")
    common(g)
    g.add_argument("--mode", choices=["awgn", "dynamic"])
    g.add_argument("--snr", help="SNR grid start:stop:step in dB (stop inclusive)")
    g.add_argument("--per-cell", dest="per_cell", type=int)
    g.add_argument("--pairs", choices=["all", "local"])
    g.add_argument("--frames-per-burst", dest="frames_per_burst", type=int)
    g.add_argument("--carrier-span", dest="carrier_span", type=float, help="Hz")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a multi-task model")
    common(t)
    t.add_argument("--data")
    t.add_argument("--model-config", dest="model_config", help="C_sh,C_m,F_m,C_s,F_s")
    t.add_argument("--w-mod", dest="w_mod", type=float)
    t.add_argument("--w-sig", dest="w_sig", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy curves and confusion matrices")
    common(e)
    e.add_argument("--data")
    e.add_argument("--ckpt")
    e.add_argument("--snr", type=float, nargs="+", help="operating points for confusion matrices")
    e.add_argument("--quantized", action="store_true", default=None, help="checkpoint is an INT8 model")
    e.add_argument("--integer", action="store_true", default=None, help="use the integer fast path")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="INT8 post-training quantization and optional QAT")
    common(q)
    q.add_argument("--data")
    q.add_argument("--ckpt")
    q.add_argument("--qat-epochs", dest="qat_epochs", type=int)
    q.add_argument("--calib-frames", dest="calib_frames", type=int)
    q.add_argument("--calib-mode", dest="calib_mode", choices=["percentile", "minmax"])
    q.add_argument("--w-mod", dest="w_mod", type=float)
    q.add_argument("--w-sig", dest="w_sig", type=float)
    q.add_argument("--lr", type=float)
    q.add_argument("--batch-size", dest="batch_size", type=int)
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bench", help="FLOPs / params / latency comparison table")
    common(b)
    b.add_argument("--ckpt")
    b.add_argument("--data")
    b.add_argument("--configs", nargs="+", help="model configs C_sh,C_m,F_m,C_s,F_s")
    b.add_argument("--baseline", help="report name used as the reduction baseline")
    b.add_argument("--latency-frames", dest="latency_frames", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    for h in [h for h in log.handlers if isinstance(h, logging.StreamHandler)
              and not isinstance(h, logging.FileHandler)]:
        log.removeHandler(h)
    log.addHandler(console)
    log.propagate = False
    log.setLevel(logging.INFO)  # run.log always gets the INFO lines
    try:
        run = args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"rfmtl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())

