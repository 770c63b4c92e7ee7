import dataclasses
import math

import numpy as np
import pytest
import torch

from dtsformer.dataflow import SyntheticConfig, WindowSet, ZScoreScaler, generate_synthetic, make_windows, zscore_fit_apply
from dtsformer.fusion import DTSFormer, ModelConfig
from dtsformer.training import (
    AdamState,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    dataset_loss,
    evaluate,
    optimizer_step,
    train,
)

MICRO = ModelConfig(input_len=16, horizon=2, scales=2, d_model=8, heads=2, d_ff=32, e_layers=1, seed=0)


@pytest.fixture(scope="module")
def micro_data():
    s = zscore_fit_apply(generate_synthetic(SyntheticConfig(length=320, seed=2)), 0.7)
    return make_windows(s, 16, 2)


def adam_oracle(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook recursion, returns the parameter trajectory from 0."""
    p, m, v, out = 0.0, 0.0, 0.0, []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


# ---------------------------------------------------------------- optimizer_step


def _state(shape):
    return [(torch.zeros(shape, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))]


def test_zero_gradient_leaves_params():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    optimizer_step([p], [torch.zeros(2, dtype=torch.float64)], _state(2), 1e-3, 1)
    assert p.tolist() == [1.0, -2.0]


def test_first_step_hand_value():
    p = torch.zeros(1, dtype=torch.float64)
    optimizer_step([p], [torch.ones(1, dtype=torch.float64)], _state(1), 1e-3, 1)
    # m_hat = 1, v_hat = 1, step = 1e-3 / (1 + 1e-8)
    assert p.item() == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)


def test_trajectory_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=50)
    p, moments = torch.zeros(1, dtype=torch.float64), _state(1)
    traj = []
    for t, g in enumerate(grads, start=1):
        optimizer_step([p], [torch.tensor([g], dtype=torch.float64)], moments, 1e-2, t)
        traj.append(p.item())
    np.testing.assert_allclose(traj, adam_oracle(grads, 1e-2), rtol=1e-12, atol=1e-15)


def test_constant_gradient_step_tends_to_lr():
    p, moments = torch.zeros(1, dtype=torch.float64), _state(1)
    prev = 0.0
    for t in range(1, 2001):
        optimizer_step([p], [torch.tensor([0.37], dtype=torch.float64)], moments, 1e-3, t)
        step, prev = abs(p.item() - prev), p.item()
    assert step == pytest.approx(1e-3, rel=0.05)


def test_step_counter_starts_at_one():
    with pytest.raises(ValueError):
        optimizer_step([torch.zeros(1)], [torch.zeros(1)], _state(1), 1e-3, 0)


def test_adam_state_keys():
    model = DTSFormer(MICRO)
    st = AdamState(model.named_parameters())
    assert set(st.moments) == {k for k, _ in model.named_parameters()} and st.t == 0


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"patience": 50, "max_epochs": 10},
                                {"loss": "mae"}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.patience, cfg.max_epochs, cfg.min_delta) == (1e-3, 64, 40, 200, 1e-6)


# ---------------------------------------------------------------- train


def test_zero_target_loss_decreases(micro_data):
    tr, va, _ = micro_data
    zero_tr = WindowSet(tr.history, np.zeros_like(tr.target), tr.calendar, tr.anchors)
    zero_va = WindowSet(va.history, np.zeros_like(va.target), va.calendar, va.anchors) if len(va) else zero_tr
    _, hist = train(DTSFormer(MICRO), zero_tr, zero_va, TrainConfig(max_epochs=5, patience=5, seed=1))
    losses = [r.train_loss for r in hist.records]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_patience_one_on_train_as_val(micro_data):
    tr, _, _ = micro_data
    model, hist = train(DTSFormer(MICRO), tr, tr, TrainConfig(max_epochs=60, patience=1, seed=0))
    assert hist.stopping_reason == "patience"
    vals = [r.val_loss for r in hist.records]
    # the run ends on the first epoch that fails to improve on the best so far
    assert vals[-1] >= min(vals[:-1]) - 1e-6
    assert all(vals[i] < min(vals[:i]) - 1e-6 for i in range(1, len(vals) - 1))


def test_best_snapshot_is_returned(micro_data):
    tr, va, te = micro_data
    model, hist = train(DTSFormer(MICRO), tr, te, TrainConfig(max_epochs=6, patience=6, seed=0))
    best = min(r.val_loss for r in hist.records)
    assert hist.best_val_loss == best
    assert hist.records[hist.best_epoch - 1].val_loss == best
    assert dataset_loss(model, te) == pytest.approx(best, rel=1e-12)


def test_training_is_bitwise_reproducible(micro_data, tmp_path):
    tr, va, te = micro_data
    cfg = TrainConfig(max_epochs=3, patience=3, seed=4)
    m1, h1 = train(DTSFormer(MICRO), tr, te, cfg)
    m2, h2 = train(DTSFormer(MICRO), tr, te, cfg)
    assert [(r.train_loss, r.val_loss) for r in h1.records] == [(r.train_loss, r.val_loss) for r in h2.records]
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)
    h1.to_csv(tmp_path / "a.csv")
    h2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,seconds"


def test_history_csv_wallclock_optional(tmp_path):
    h = TrainHistory()
    from dtsformer.training import EpochRecord
    h.records.append(EpochRecord(1, 0.5, 0.25, 1.2345))
    h.to_csv(tmp_path / "a.csv", include_wallclock=True)
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "1,0.5,0.25,1.234"


def test_shape_mismatch_rejected(micro_data):
    tr, va, _ = micro_data
    with pytest.raises(ValueError):
        train(DTSFormer(dataclasses.replace(MICRO, horizon=3)), tr, tr, TrainConfig(max_epochs=1, patience=1))
    empty = tr.subset(np.arange(0))
    with pytest.raises(ValueError):
        train(DTSFormer(MICRO), tr, empty, TrainConfig(max_epochs=1, patience=1))


def test_non_finite_loss_aborts_with_diagnostics(micro_data):
    tr, _, _ = micro_data
    bad = WindowSet(tr.history, tr.target.copy(), tr.calendar, tr.anchors)
    bad.target[:] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(DTSFormer(MICRO), bad, tr, TrainConfig(max_epochs=1, patience=1))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_exploding_forward_aborts(micro_data):
    tr, _, _ = micro_data
    model = DTSFormer(MICRO)
    with torch.no_grad():
        model.head_weight.fill_(math.inf)
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(model, tr, tr, TrainConfig(max_epochs=1, patience=1))


# ---------------------------------------------------------------- evaluate


def _standardized_windows(rng, count, m, n):
    h = rng.normal(size=(count, m))
    h = (h - h.mean(1, keepdims=True)) / h.std(1, keepdims=True)
    return WindowSet(h, rng.normal(2.0, 3.0, size=(count, n)), None, np.arange(count))


def test_evaluate_constant_head_gives_target_variance():
    rng = np.random.default_rng(5)
    data = _standardized_windows(rng, 40, 16, 2)
    model = DTSFormer(MICRO)
    with torch.no_grad():
        model.head_weight.zero_()
        model.head_bias.copy_(torch.from_numpy(data.target.mean(0)))
    res = evaluate(model, data)
    assert res.mse == pytest.approx(float(data.target.var(0).mean()), rel=1e-10)


def test_evaluate_pure_and_repeatable(micro_data):
    tr, _, te = micro_data
    model = DTSFormer(MICRO)
    before = [p.detach().clone() for p in model.parameters()]
    a, b = evaluate(model, te), evaluate(model, te)
    assert a.mse == b.mse and np.array_equal(a.predictions, b.predictions)
    c = evaluate(model, tr)
    assert evaluate(model, te).mse == a.mse and c.mse != a.mse
    for p, q in zip(before, model.parameters()):
        assert torch.equal(p, q)


def test_loss_normalized_metrics_original_space(micro_data):
    tr, _, te = micro_data
    model = DTSFormer(MICRO)
    scaler = ZScoreScaler()
    scaler.mean_, scaler.scale_ = 500.0, 40.0
    res = evaluate(model, te, scaler)
    plain = evaluate(model, te)
    assert res.mse == plain.mse
    np.testing.assert_allclose(res.predictions, plain.predictions * 40.0 + 500.0)
    np.testing.assert_allclose(res.targets, te.target * 40.0 + 500.0)
    orig_mse = np.mean((res.predictions - res.targets) ** 2)
    assert orig_mse == pytest.approx(plain.mse * 1600.0, rel=1e-10)


def test_evaluate_empty_rejected(micro_data):
    with pytest.raises(ValueError):
        evaluate(DTSFormer(MICRO), micro_data[0].subset(np.arange(0)))
