import math

import numpy as np
import pytest

from rfmtl import classes
from rfmtl.dataset import DatasetContainer, GenConfig, build_dataset
from rfmtl.mtl import (
    ConfigError,
    InputError,
    LossWeights,
    MtlConfig,
    MtlModel,
    TrainConfig,
    build_model,
    joint_loss,
    loss_grad_logits,
    predict,
    task_weight_sweep,
    train,
)
from rfmtl.nn import softmax
from rfmtl.waveforms import ComplexFrame, to_network_input


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, patience=5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ValueError):
        LossWeights(0.5, 0.6).validate()
    with pytest.raises(ConfigError):
        MtlConfig(c_sh=0).validate()


def test_canonical_shape_chain():
    m = build_model(MtlConfig())
    assert m.trunk.out_shape == (13, 13, 8)
    for branch, k in ((m.mod_branch, 9), (m.sig_branch, 11)):
        shapes = [l.out_shape for l in branch.layers]
        assert (11, 11, 4) in shapes and (484,) in shapes and (256,) in shapes
        assert branch.out_shape == (k,)


def test_minimal_graph_shapes():
    m = build_model(MtlConfig.from_tuple((1, 1, 1, 1, 1)))
    assert [l.out_shape for l in m.trunk.layers][:4] == [(14, 14, 1), (14, 14, 1), (14, 14, 1), (13, 13, 1)]
    assert (121,) in [l.out_shape for l in m.mod_branch.layers]
    assert m.mod_branch.out_shape == (9,) and m.sig_branch.out_shape == (11,)


def test_underflowing_graph_rejected():
    with pytest.raises(ConfigError):
        MtlModel(MtlConfig(kernel_size=9))


def test_canonical_counts():
    m = build_model(MtlConfig())
    pc = m.count_params()
    assert m.count_flops() == 336_736
    assert (pc.biasless, pc.trainable, pc.total) == (253_576, 254_156, 254_188)
    assert abs(pc.trainable - 253_000) / 253_000 < 0.02


# ---------------------------------------------------------------- loss


def _rand_probs(rng, n, k):
    return softmax(rng.standard_normal((n, k)))


def test_uniform_and_perfect_losses():
    n = 7
    y9, y11 = np.arange(n) % 9, np.arange(n) % 11
    res = joint_loss(np.full((n, 9), 1 / 9), np.full((n, 11), 1 / 11), y9, y11, LossWeights())
    assert math.isclose(res.mod, math.log(9), rel_tol=1e-12)
    assert math.isclose(res.sig, math.log(11), rel_tol=1e-12)
    assert math.isclose(res.total, 0.2 * math.log(9) + 0.8 * math.log(11), rel_tol=1e-12)
    assert abs(res.total - 2.3578) < 1e-4
    perfect = joint_loss(np.eye(9)[y9], np.eye(11)[y11], y9, y11, LossWeights())
    assert perfect.total == 0.0 and perfect.clamped == 0


def test_loss_is_linear_in_weights():
    rng = np.random.default_rng(0)
    pm, ps = _rand_probs(rng, 10, 9), _rand_probs(rng, 10, 11)
    ym, ys = rng.integers(0, 9, 10), rng.integers(0, 11, 10)
    # independently computed components
    lm = -np.mean(np.log(pm[np.arange(10), ym]))
    ls = -np.mean(np.log(ps[np.arange(10), ys]))
    for w_m in np.linspace(0, 1, 11):
        res = joint_loss(pm, ps, ym, ys, LossWeights(w_m, 1 - w_m))
        assert math.isclose(res.total, w_m * lm + (1 - w_m) * ls, rel_tol=1e-12, abs_tol=1e-15)
    zero = joint_loss(pm, ps, ym, ys, LossWeights(0.0, 1.0))
    assert zero.total == 1.0 * zero.sig


def test_zero_true_probability_is_clamped_and_counted():
    pm = np.eye(9)[[1, 1]]
    res = joint_loss(pm, np.eye(11)[[0, 0]], np.array([0, 1]), np.array([0, 0]), LossWeights())
    assert res.clamped == 1
    assert math.isclose(res.mod, -math.log(1e-12) / 2)


def test_logit_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    zm, zs = rng.standard_normal((4, 9)), rng.standard_normal((4, 11))
    ym, ys = rng.integers(0, 9, 4), rng.integers(0, 11, 4)
    w = LossWeights(0.3, 0.7)
    gm, gs = loss_grad_logits(softmax(zm), softmax(zs), ym, ys, w)
    h = 1e-6
    for z, g, which in ((zm, gm, 0), (zs, gs, 1)):
        for idx in [(0, 0), (2, 5), (3, 8)]:
            zp, zn = z.copy(), z.copy()
            zp[idx] += h
            zn[idx] -= h
            args_p = (softmax(zp), softmax(zs)) if which == 0 else (softmax(zm), softmax(zp))
            args_n = (softmax(zn), softmax(zs)) if which == 0 else (softmax(zm), softmax(zn))
            num = (joint_loss(*args_p, ym, ys, w).total - joint_loss(*args_n, ym, ys, w).total) / (2 * h)
            assert abs(num - g[idx]) < 1e-7


# ---------------------------------------------------------------- gradients through the model


def _shared_grads(model, x, ym, ys, w):
    model.forward(x, train=False, logits=True)
    zm, zs = model.forward(x, train=False, logits=True)
    for g in model.groups.values():
        g.zero_grad()
    gm, gs = loss_grad_logits(softmax(zm), softmax(zs), ym, ys, w)
    model.backward(gm, gs)
    return {k: {n: v.copy() for n, v in g.named_grads()} for k, g in model.groups.items()}


def test_task_weight_linearity_and_endpoints():
    # BatchNorm uses running statistics in this check so that each pass is a
    # fixed function of the weights; the loss gradient alone carries the weights.
    model = build_model(MtlConfig(), seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 16, 16, 1)) * 0.1
    ym, ys = rng.integers(0, 9, 6), rng.integers(0, 11, 6)
    g_m = _shared_grads(model, x, ym, ys, LossWeights(1.0, 0.0))
    g_s = _shared_grads(model, x, ym, ys, LossWeights(0.0, 1.0))
    for n, v in g_m["s"].items():
        assert not np.any(v), n
    for n, v in g_s["m"].items():
        assert not np.any(v), n
    for w_m in (0.2, 0.5, 0.9):
        g = _shared_grads(model, x, ym, ys, LossWeights(w_m, 1 - w_m))
        for grp in ("sh", "m", "s"):
            for n in g[grp]:
                np.testing.assert_allclose(g[grp][n], w_m * g_m[grp][n] + (1 - w_m) * g_s[grp][n], atol=1e-12)


# ---------------------------------------------------------------- predict


def test_zero_head_model_is_uniform():
    m = build_model(MtlConfig(), zero_heads=True)
    pm, ps = predict(m, ComplexFrame(np.exp(1j * np.arange(128) * 0.1) / np.sqrt(128)))
    np.testing.assert_allclose(pm, 1 / 9, atol=1e-7)
    np.testing.assert_allclose(ps, 1 / 11, atol=1e-7)


def test_predict_outputs_are_distributions_and_shift_invariant():
    m = build_model(MtlConfig(), seed=3)
    iq = np.random.default_rng(0).standard_normal(128) + 0j
    pm, ps = predict(m, iq)
    assert abs(pm.sum() - 1) < 1e-6 and abs(ps.sum() - 1) < 1e-6
    zm, zs = m.forward(to_network_input(iq[None]), logits=True)
    np.testing.assert_allclose(softmax(zm + 123.0)[0], pm, atol=1e-6)
    np.testing.assert_allclose(softmax(zs - 40.0)[0], ps, atol=1e-6)
    assert softmax(zm + 5.0).argmax() == pm.argmax()


def test_predict_rejects_wrong_length():
    with pytest.raises(InputError):
        predict(build_model(MtlConfig()), np.zeros(100, complex))


def test_checkpoint_roundtrip_preserves_predictions():
    m = build_model(MtlConfig.from_tuple((4, 2, 16, 2, 16)), seed=1)
    buf = m.to_checkpoint()
    m2 = MtlModel.from_checkpoint(buf)
    assert m2.to_checkpoint() == buf
    x = np.random.default_rng(0).standard_normal((5, 16, 16, 1)).astype(np.float32)
    np.testing.assert_array_equal(m.predict_arrays(x)[0], m2.predict_arrays(x)[0])


# ---------------------------------------------------------------- training


def _toy(snr=18.0, per_cell=50, pairs=(("BPSK", "SATCOM"), ("FMCW", "Radar-Altimeter"))):
    return build_dataset(GenConfig.grid([snr], per_cell, "awgn", seed=0, pairs=pairs))


def test_toy_training_beats_uniform_baseline():
    ds = _toy(per_cell=100)
    m = build_model(MtlConfig.from_tuple((4, 2, 32, 2, 32)), seed=0)
    # 140 training frames give few steps per epoch; a small batch and a long run let the
    # batch-norm moving moments (momentum 0.99) settle so inference mode matches training
    res = train(m, ds, TrainConfig(max_epochs=50, patience=49, batch_size=8), LossWeights())
    assert min(h["val_loss"] for h in res.history) < math.log(2)
    assert 1 <= res.best_epoch <= len(res.history)


def test_single_class_dataset_learns_quickly():
    ds = _toy(per_cell=60, pairs=(("BPSK", "SATCOM"),))
    m = build_model(MtlConfig.from_tuple((4, 2, 32, 2, 32)), seed=0)
    res = train(m, ds, TrainConfig(max_epochs=3, patience=2, learning_rate=0.01))
    assert res.history[1]["mod_acc"] == 1.0 and res.history[1]["sig_acc"] == 1.0


def test_training_is_deterministic():
    ds = _toy(per_cell=20)

    def run():
        m = build_model(MtlConfig.from_tuple((2, 2, 8, 2, 8)), seed=5)
        return train(m, ds, TrainConfig(max_epochs=3, patience=2, seed=5)).history_csv(), m.to_checkpoint()

    assert run() == run()


def test_early_stopping_restores_best_snapshot():
    ds = _toy(per_cell=20)
    m = build_model(MtlConfig.from_tuple((2, 2, 8, 2, 8)), seed=0)
    res = train(m, ds, TrainConfig(max_epochs=8, patience=1, learning_rate=0.05))
    best = min(res.history, key=lambda h: h["val_loss"])
    assert res.best_epoch == best["epoch"]
    from rfmtl.mtl import evaluate_arrays, split_arrays

    xv, mv, sv, _ = split_arrays(ds, "val")
    assert math.isclose(evaluate_arrays(m, xv, mv, sv, LossWeights())[0].total, best["val_loss"], rel_tol=1e-9)


def test_empty_validation_split_rejected():
    iq = np.random.default_rng(0).standard_normal((10, 128)) + 0j
    ds = DatasetContainer.from_arrays(iq, [0] * 10, [0] * 10, [0.0] * 10)
    ds.splits["val"] = np.zeros(0, np.uint32)
    from rfmtl.mtl import TrainingError

    with pytest.raises(TrainingError):
        train(build_model(MtlConfig.from_tuple((1, 1, 1, 1, 1))), ds, TrainConfig(max_epochs=2, patience=1))


def test_task_weight_sweep_table_shape():
    ds = _toy(per_cell=10)
    rows = task_weight_sweep(ds, cfg=MtlConfig.from_tuple((1, 1, 4, 1, 4)),
                             tc=TrainConfig(max_epochs=2, patience=1), target_snr=18.0)
    assert len(rows) == 11
    assert [r["w_m"] for r in rows] == pytest.approx([k / 10 for k in range(11)])
    assert all(0 <= r["mod_acc"] <= 1 and 0 <= r["sig_acc"] <= 1 for r in rows)


def test_class_table_used_by_heads():
    cfg = MtlConfig()
    assert cfg.num_mod_classes == len(classes.MODULATIONS) == 9
    assert cfg.num_sig_classes == len(classes.SIGNALS) == 11
