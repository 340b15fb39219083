"""Hard-parameter-shared multi-task network: graph, joint loss, training."""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import classes
from .nn import counting
from .nn.checkpoint import TensorRecord, read_checkpoint, write_checkpoint
from .nn.layers import DimensionError, LayerSpec, Sequential, softmax
from .nn.optim import ParamGroup, adam_step
from .waveforms import FRAME_LEN, ComplexFrame, to_network_input

INPUT_SHAPE = (16, 16, 1)
BRANCHES = ("sh", "m", "s")
LOG_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class MtlConfig:
    c_sh: int = 8
    c_m: int = 4
    f_m: int = 256
    c_s: int = 4
    f_s: int = 256
    kernel_size: int = 3
    pool_size: int = 2
    pool_stride: int = 1
    dropout_shared: float = 0.25
    dropout_task_conv: float = 0.25
    dropout_task_dense: float = 0.5
    num_mod_classes: int = classes.NUM_MOD
    num_sig_classes: int = classes.NUM_SIG
    augment_noise_stddev: float = 0.1

    @classmethod
    def from_tuple(cls, t, **kw):
        """Build from the (C_sh, C_m, F_m, C_s, F_s) notation."""
        c_sh, c_m, f_m, c_s, f_s = t
        return cls(c_sh=c_sh, c_m=c_m, f_m=f_m, c_s=c_s, f_s=f_s, **kw)

    def as_tuple(self):
        return (self.c_sh, self.c_m, self.f_m, self.c_s, self.f_s)

    def validate(self):
        for name in ("c_sh", "c_m", "f_m", "c_s", "f_s", "kernel_size", "num_mod_classes", "num_sig_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("dropout_shared", "dropout_task_conv", "dropout_task_dense"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.augment_noise_stddev < 0:
            raise ConfigError("augment_noise_stddev must be >= 0")
        return self


@dataclass
class LossWeights:
    w_m: float = 0.2
    w_s: float = 0.8

    def validate(self):
        if self.w_m < 0 or self.w_s < 0 or abs(self.w_m + self.w_s - 1.0) > 1e-9:
            raise ConfigError(f"loss weights must be non-negative and sum to 1, got ({self.w_m}, {self.w_s})")
        return self


@dataclass
class TrainConfig:
    max_epochs: int = 30
    patience: int = 5
    learning_rate: float = 0.001
    batch_size: int = 64
    seed: int = 0

    def validate(self):
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        return self


def branch_specs(cfg: MtlConfig):
    """Layer specs per branch tag."""
    k = cfg.kernel_size
    trunk = [
        LayerSpec("Conv2D", "sh_conv", kernel_h=k, kernel_w=k, num_kernels=cfg.c_sh),
        LayerSpec("BatchNorm", "sh_bn"),
        LayerSpec("ReLU", "sh_relu"),
        LayerSpec("MaxPool2D", "sh_pool", pool_size=cfg.pool_size, pool_stride=cfg.pool_stride),
        LayerSpec("Dropout", "sh_drop", rate=cfg.dropout_shared),
        LayerSpec("GaussianNoise", "sh_noise", stddev=cfg.augment_noise_stddev),
    ]

    def task(tag, c, f, n_out):
        return [
            LayerSpec("Conv2D", f"{tag}_conv", kernel_h=k, kernel_w=k, num_kernels=c),
            LayerSpec("BatchNorm", f"{tag}_bn"),
            LayerSpec("ReLU", f"{tag}_relu"),
            LayerSpec("Dropout", f"{tag}_drop1", rate=cfg.dropout_task_conv),
            LayerSpec("Flatten", f"{tag}_flat"),
            LayerSpec("Dense", f"{tag}_dense", units=f),
            LayerSpec("ReLU", f"{tag}_relu2"),
            LayerSpec("Dropout", f"{tag}_drop2", rate=cfg.dropout_task_dense),
            LayerSpec("Dense", f"{tag}_out", units=n_out),
            LayerSpec("Softmax", f"{tag}_softmax"),
        ]

    return {
        "sh": trunk,
        "m": task("m", cfg.c_m, cfg.f_m, cfg.num_mod_classes),
        "s": task("s", cfg.c_s, cfg.f_s, cfg.num_sig_classes),
    }


class MtlModel:
    """Shared trunk feeding a modulation head and a signal head."""

    def __init__(self, cfg: MtlConfig, seed=0, dtype=np.float32, zero_heads=False, input_shape=INPUT_SHAPE):
        self.cfg = cfg.validate()
        self.input_shape = tuple(input_shape)
        specs = branch_specs(cfg)
        init = np.random.default_rng(seed)
        try:
            self.trunk = Sequential(specs["sh"], self.input_shape, dtype, init)
            self.mod_branch = Sequential(specs["m"], self.trunk.out_shape, dtype, init)
            self.sig_branch = Sequential(specs["s"], self.trunk.out_shape, dtype, init)
        except DimensionError as e:
            raise ConfigError(f"graph does not fit a {self.input_shape} input: {e}") from e
        if zero_heads:
            for branch in (self.mod_branch, self.sig_branch):
                for p in branch.layers[-2].params.values():
                    p[...] = 0
        self.groups = {
            "sh": ParamGroup("sh", self.trunk.layers),
            "m": ParamGroup("m", self.mod_branch.layers),
            "s": ParamGroup("s", self.sig_branch.layers),
        }
        self.rng = np.random.default_rng([seed, 1])

    # ------------------------------------------------------------ passes

    def forward(self, x, train=False, logits=False):
        """Return ``(mod, sig)`` probabilities (or pre-softmax logits)."""
        h = self.trunk.forward(x, train, self.rng)
        return (self.mod_branch.forward(h, train, self.rng, logits=logits),
                self.sig_branch.forward(h, train, self.rng, logits=logits))

    def backward(self, g_mod, g_sig, logits=True):
        """Backpropagate head gradients; returns the input gradient."""
        gh = self.mod_branch.backward(g_mod, logits) + self.sig_branch.backward(g_sig, logits)
        return self.trunk.backward(gh)

    def predict_arrays(self, x, batch=2048):
        mods, sigs = [], []
        for s in range(0, x.shape[0], batch):
            m, g = self.forward(x[s:s + batch])
            mods.append(m)
            sigs.append(g)
        if not mods:
            return np.zeros((0, self.cfg.num_mod_classes)), np.zeros((0, self.cfg.num_sig_classes))
        return np.concatenate(mods), np.concatenate(sigs)

    def predict_iq(self, iq):
        return self.predict_arrays(to_network_input(iq))

    # ------------------------------------------------------------ structure

    def branches(self):
        return {"sh": self.trunk, "m": self.mod_branch, "s": self.sig_branch}

    def resolved(self):
        out = []
        for seq in self.branches().values():
            out += counting.resolve([l.spec for l in seq.layers], seq.in_shape)
        return out

    def count_flops(self):
        return counting.chain_flops(self.resolved())

    def count_params(self):
        return counting.chain_params(self.resolved())

    def graph_json(self):
        return {
            "input_shape": list(self.input_shape),
            "config": asdict(self.cfg),
            "layers": [dict(l.spec.to_json(), branch=tag) for tag, seq in self.branches().items() for l in seq.layers],
        }

    def state_dict(self):
        out = {}
        for g in self.groups.values():
            out.update(g.state_dict())
        return out

    def load_state_dict(self, state):
        for g in self.groups.values():
            g.load_state_dict(state)

    def tensor_records(self):
        recs = []
        for tag, g in self.groups.items():
            for name, p in list(g.named_params()) + list(g.named_buffers()):
                recs.append(TensorRecord(name, tag, p))
        return recs

    def to_checkpoint(self) -> bytes:
        return write_checkpoint(self.graph_json(), self.tensor_records())

    @classmethod
    def from_checkpoint(cls, buf: bytes):
        graph, records = read_checkpoint(buf)
        model = cls(MtlConfig(**graph["config"]), input_shape=tuple(graph["input_shape"]))
        model.load_state_dict({r.name: r.array for r in records})
        return model

    def clone(self):
        return copy.deepcopy(self)


def build_model(cfg: MtlConfig, seed=0, input_shape=INPUT_SHAPE, **kw) -> MtlModel:
    return MtlModel(cfg, seed=seed, input_shape=input_shape, **kw)


# ---------------------------------------------------------------- loss


@dataclass
class LossResult:
    total: float
    mod: float
    sig: float
    clamped: int = 0  # true-label probabilities below the log floor


def _xent(probs, labels):
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    clamped = int(np.sum(p < LOG_FLOOR))
    return float(-np.mean(np.log(np.maximum(p, LOG_FLOOR)))), clamped


def joint_loss(mod_probs, sig_probs, mod_labels, sig_labels, w: LossWeights) -> LossResult:
    """Weighted sum of the per-task mean categorical cross-entropies."""
    lm, cm = _xent(mod_probs, mod_labels)
    ls, cs = _xent(sig_probs, sig_labels)
    return LossResult(w.w_m * lm + w.w_s * ls, lm, ls, cm + cs)


def loss_grad_logits(mod_probs, sig_probs, mod_labels, sig_labels, w: LossWeights):
    """Gradients of the joint loss with respect to both heads' logits."""
    def one(p, y, weight):
        g = p.copy()
        g[np.arange(len(y)), y] -= 1
        return (weight / len(y)) * g
    return one(mod_probs, mod_labels, w.w_m), one(sig_probs, sig_labels, w.w_s)


def train_step(model: MtlModel, x, y_mod, y_sig, w: LossWeights, lr):
    """One forward/backward/Adam step. Returns the batch LossResult."""
    zm, zs = model.forward(x, train=True, logits=True)
    pm, ps = softmax(zm), softmax(zs)
    res = joint_loss(pm, ps, y_mod, y_sig, w)
    gm, gs = loss_grad_logits(pm, ps, y_mod, y_sig, w)
    model.backward(gm.astype(zm.dtype), gs.astype(zs.dtype))
    for g in model.groups.values():
        adam_step(g, lr=lr)
    return res


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: MtlModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped: str = "max_epochs"

    def history_csv(self):
        return history_csv(self.history)


def history_csv(history):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "train_loss", "val_loss", "mod_acc", "sig_acc"])
    for h in history:
        wr.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["mod_acc"]), repr(h["sig_acc"])])
    return buf.getvalue()


def evaluate_arrays(model, x, y_mod, y_sig, w: LossWeights):
    pm, ps = model.predict_arrays(x)
    res = joint_loss(pm, ps, y_mod, y_sig, w)
    return res, float(np.mean(pm.argmax(1) == y_mod)), float(np.mean(ps.argmax(1) == y_sig))


def split_arrays(dataset, split):
    iq, m, s, snr = dataset.arrays(split)
    return to_network_input(iq), m.astype(np.int64), s.astype(np.int64), snr


def train(model: MtlModel, dataset, tc: TrainConfig = None, w: LossWeights = None, step_hook=None,
          log=None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation joint loss.

    ``step_hook(model)`` (if given) wraps each batch step; the quantizer uses
    it for fake-quantized weights.
    """
    tc = (tc or TrainConfig()).validate()
    w = (w or LossWeights()).validate()
    xt, mt, st, _ = split_arrays(dataset, "train")
    xv, mv, sv, _ = split_arrays(dataset, "val")
    if len(xt) < 2 or len(xv) == 0:
        raise TrainingError("train split needs >= 2 examples and val split >= 1")
    model.rng = np.random.default_rng([tc.seed, 1])
    order_rng = np.random.default_rng([tc.seed, 2])
    step = step_hook or (lambda m, *a: train_step(m, *a))

    best = (math.inf, model.state_dict(), 0)
    result = TrainResult(model)
    wait = 0
    for epoch in range(1, tc.max_epochs + 1):
        perm = order_rng.permutation(len(xt))
        tot, seen = 0.0, 0
        for s in range(0, len(perm), tc.batch_size):
            idx = perm[s:s + tc.batch_size]
            if len(idx) < 2:
                continue
            res = step(model, xt[idx], mt[idx], st[idx], w, tc.learning_rate)
            tot += res.total * len(idx)
            seen += len(idx)
        train_loss = tot / seen
        vres, macc, sacc = evaluate_arrays(model, xv, mv, sv, w)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": vres.total, "mod_acc": macc, "sig_acc": sacc}
        if not (math.isfinite(train_loss) and math.isfinite(vres.total)):
            result.stopped = "diverged"
            break
        result.history.append(row)
        if log:
            log(row)
        if vres.total < best[0]:
            best = (vres.total, model.state_dict(), epoch)
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                result.stopped = "early_stopping"
                break
    model.load_state_dict(best[1])
    result.best_epoch = best[2]
    return result


# ---------------------------------------------------------------- inference


def predict(model: MtlModel, frame):
    """(mod probabilities, sig probabilities) for one 128-sample frame."""
    iq = frame.iq if isinstance(frame, ComplexFrame) else np.asarray(frame)
    if iq.shape != (FRAME_LEN,):
        raise InputError(f"frame must hold {FRAME_LEN} complex samples, got shape {iq.shape}")
    pm, ps = model.forward(to_network_input(iq[None]))
    return pm[0], ps[0]


def task_weight_sweep(dataset, grid=None, cfg: MtlConfig = None, tc: TrainConfig = None, target_snr=-2.0):
    """Train one model per ``w_m`` in ``grid`` (``w_s = 1 - w_m``); report test accuracy at ``target_snr``."""
    grid = [round(0.1 * k, 10) for k in range(11)] if grid is None else list(grid)
    cfg = cfg or MtlConfig()
    tc = tc or TrainConfig()
    x, m, s, snr = split_arrays(dataset, "test")
    sel = np.isclose(snr, target_snr)
    rows = []
    for w_m in grid:
        w = LossWeights(w_m, 1.0 - w_m).validate()
        model = build_model(cfg, seed=tc.seed)
        train(model, dataset, tc, w)
        pm, ps = model.predict_arrays(x[sel])
        rows.append({
            "w_m": w.w_m,
            "w_s": w.w_s,
            "mod_acc": float(np.mean(pm.argmax(1) == m[sel])) if sel.any() else float("nan"),
            "sig_acc": float(np.mean(ps.argmax(1) == s[sel])) if sel.any() else float("nan"),
        })
    return rows
