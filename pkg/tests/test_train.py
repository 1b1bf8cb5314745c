import numpy as np
import pytest
import torch

from tempattn.encoder import EncoderConfig
from tempattn.evaluation import evaluate
from tempattn.temporal import TemporalConfig, predict
from tempattn.train import (
    TrainConfig, TrainingDiverged, augment, batch_loss, build_model, collate, sampler_weights, train_loop,
)
from tempattn.trajgen import Label, SyntheticSpec, Trajectory, generate_dataset, split_dataset

TINY_ENC = EncoderConfig(image_size=(16, 16), conv_blocks=[(4, 3, 2), (8, 3, 2)], embed_dim=8)
TINY_TEMP = TemporalConfig(n_layers=1, n_heads=2, model_dim=8, dropout=0.1)
NO_AUG = dict(p_hflip=0.0, p_vflip=0.0, p_jitter=0.0, p_blur=0.0, p_end_mask=0.0)


def _traj(T=40, seed=0, label=Label.MITOSIS, size=16):
    rng = np.random.default_rng(seed)
    return Trajectory(frames=rng.random((T, 3, size, size)).astype(np.float32), label=label,
                      traj_id=f"t{seed}", masks=(rng.random((T, size, size)) > 0.5).astype(np.uint8))


# ---------------------------------------------------------------- sampler

def test_sampler_balanced_input():
    w = sampler_weights([0] * 4 + [1] * 4)
    assert np.all(w == w[0])


def test_sampler_inverse_frequency():
    labels = [Label.MITOSIS] * 90 + [Label.APOPTOSIS] * 10
    w = sampler_weights(labels)
    assert w[-1] / w[0] == pytest.approx(9.0)
    mass = w / w.sum()
    assert mass[:90].sum() == pytest.approx(0.5) and mass[90:].sum() == pytest.approx(0.5)


def test_sampler_test_composition_ratio():
    w = sampler_weights(["mitosis"] * 1650 + ["apoptosis"] * 439)
    assert w[-1] / w[0] == pytest.approx(1650 / 439)
    assert round(w[-1] / w[0], 2) == 3.76


def test_sampler_single_class_rejected():
    with pytest.raises(ValueError):
        sampler_weights([Label.MITOSIS] * 5)


# ---------------------------------------------------------------- augment

def test_augment_all_zero_is_identity():
    tr = _traj()
    out = augment(tr, TrainConfig(**NO_AUG), np.random.default_rng(0))
    assert out.frames.tobytes() == tr.frames.tobytes()
    assert out.n_valid == tr.length


@pytest.mark.parametrize("seed", range(20))
def test_end_mask_bounds(seed):
    tr = _traj(T=40)
    cfg = TrainConfig(**{**NO_AUG, "p_end_mask": 1.0})
    out = augment(tr, cfg, np.random.default_rng(seed))
    masked = out.length - out.n_valid
    assert 4 <= masked <= 20
    valid = out.valid_mask()
    assert valid[: out.n_valid].all() and not valid[out.n_valid:].any()
    assert np.all(out.frames[out.n_valid:] == 0)
    assert out.frames[: out.n_valid].tobytes() == tr.frames[: out.n_valid].tobytes()


@pytest.mark.parametrize("seed", range(20))
def test_head_crop_keeps_a_suffix(seed):
    tr = _traj(T=30)
    cfg = TrainConfig(**{**NO_AUG, "p_head_crop": 1.0, "head_crop_min_frames": 6})
    out = augment(tr, cfg, np.random.default_rng(seed))
    assert 6 <= out.length <= 30 and out.n_valid == out.length
    assert out.frames.tobytes() == tr.frames[-out.length:].tobytes()
    assert out.masks.tobytes() == tr.masks[-out.length:].tobytes()


def test_head_crop_then_end_mask():
    tr = _traj(T=40)
    cfg = TrainConfig(**{**NO_AUG, "p_head_crop": 1.0, "p_end_mask": 1.0})
    lengths = set()
    for seed in range(30):
        out = augment(tr, cfg, np.random.default_rng(seed))
        lengths.add(out.length)
        assert 5 <= out.n_valid < out.length
        assert out.frames[: out.n_valid].tobytes() == tr.frames[40 - out.length: 40 - out.length + out.n_valid].tobytes()
    assert len(lengths) > 5


def test_head_crop_skips_short_sequences():
    tr = _traj(T=5)
    cfg = TrainConfig(**{**NO_AUG, "p_head_crop": 1.0, "head_crop_min_frames": 5})
    assert augment(tr, cfg, np.random.default_rng(0)) is tr


def test_double_hflip_is_identity():
    tr = _traj()
    cfg = TrainConfig(**{**NO_AUG, "p_hflip": 1.0})
    once = augment(tr, cfg, np.random.default_rng(0))
    twice = augment(once, cfg, np.random.default_rng(1))
    assert not np.array_equal(once.frames, tr.frames)
    np.testing.assert_array_equal(twice.frames, tr.frames)
    np.testing.assert_array_equal(twice.masks, tr.masks)


def test_augment_keeps_range_and_does_not_mutate():
    tr = _traj()
    before = tr.frames.copy()
    cfg = TrainConfig(p_hflip=1.0, p_vflip=1.0, p_jitter=1.0, p_blur=1.0, p_end_mask=1.0)
    out = augment(tr, cfg, np.random.default_rng(3))
    out.validate()
    np.testing.assert_array_equal(tr.frames, before)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(end_mask_range=(0.5, 0.1))
    with pytest.raises(ValueError):
        TrainConfig(head_crop_min_frames=0)
    with pytest.raises(ValueError):
        TrainConfig(p_head_crop=1.5)
    with pytest.raises(ValueError):
        TrainConfig(p_blur=1.5)


# ---------------------------------------------------------------- collate

def test_collate_padding_counts():
    batch = [_traj(T, i) for i, T in enumerate([12, 20, 17, 20])]
    frames, mask, labels = collate(batch)
    assert frames.shape[1] == 20
    assert (20 - mask.sum(dim=1)).tolist() == [8, 0, 3, 0]
    assert labels.tolist() == [0.0] * 4


@pytest.mark.parametrize("lengths", [[15], [14, 14, 14]])
def test_collate_no_padding(lengths):
    _, mask, _ = collate([_traj(T, i) for i, T in enumerate(lengths)])
    assert mask.all()


def test_collate_empty_batch():
    with pytest.raises(ValueError):
        collate([])


# ---------------------------------------------------------------- loss properties

def test_duplicated_batch_loss_equals_single():
    model = build_model(TINY_ENC, TINY_TEMP, seed=0).eval()
    tr = _traj(15, label=Label.APOPTOSIS)
    single = batch_loss(model, [tr])
    dup = batch_loss(model, [tr, tr, tr])
    assert abs((single - dup).item()) < 1e-6


def test_end_mask_matches_hard_truncation():
    model = build_model(TINY_ENC, TINY_TEMP, seed=1).eval()
    tr = _traj(30)
    cfg = TrainConfig(**{**NO_AUG, "p_end_mask": 1.0})
    masked = augment(tr, cfg, np.random.default_rng(5))
    n = masked.n_valid
    hard = tr.replace(frames=tr.frames[:n], masks=tr.masks[:n])
    a, b = predict(model, [masked, hard], batch_size=1)
    assert abs(a.logit - b.logit) < 1e-5
    np.testing.assert_allclose(a.attention.real(), b.attention.weights, atol=1e-6)


# ---------------------------------------------------------------- training loop

def _tiny_data(n=60, seed=0, **spec_kw):
    spec = SyntheticSpec(n_sequences=n, length_range=(20, 24), patch_size=(16, 16),
                         base_major_axis=(3.0, 4.0), master_seed=seed, **spec_kw)
    trajs = generate_dataset(spec)
    split = split_dataset([(t.traj_id, t.label) for t in trajs], seed=seed)
    by = {t.traj_id: t for t in trajs}
    return [[by[i] for i in ids] for ids in (split.train, split.val, split.test)]


def test_training_is_bit_reproducible(tmp_path):
    train, val, _ = _tiny_data()
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=2, master_seed=4)
    a = train_loop(train, val, TINY_ENC, TINY_TEMP, cfg, log_path=tmp_path / "a.csv")
    b = train_loop(train, val, TINY_ENC, TINY_TEMP, cfg, log_path=tmp_path / "b.csv")
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and va.numpy().tobytes() == vb.numpy().tobytes()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(a.log) == strip(b.log)


def test_early_stopping_keeps_best_snapshot():
    train, val, _ = _tiny_data()
    cfg = TrainConfig(batch_size=8, learning_rate=3e-3, max_epochs=6, patience=2, master_seed=1)
    res = train_loop(train, val, TINY_ENC, TINY_TEMP, cfg)
    losses = [r["val_loss"] for r in res.log]
    assert res.state.best_val_loss == min(losses)
    assert losses[res.state.best_epoch - 1] == min(losses)
    assert len(res.log) <= cfg.max_epochs
    if len(res.log) < cfg.max_epochs:
        assert res.state.epochs_without_improvement == cfg.patience
    from tempattn.train import evaluate_loss

    val_loss, _ = evaluate_loss(res.model, val, cfg.eval_batch_size)
    assert val_loss == pytest.approx(min(losses), rel=1e-6)


def test_divergence_aborts(monkeypatch):
    import tempattn.train as train_mod

    train, val, _ = _tiny_data()
    real = train_mod.batch_loss
    calls = []

    def poisoned(model, batch):
        calls.append(1)
        loss = real(model, batch)
        return loss * torch.nan if len(calls) == 3 else loss

    monkeypatch.setattr(train_mod, "batch_loss", poisoned)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=3, master_seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite training loss at epoch 1, step 2"):
        train_loop(train, val, TINY_ENC, TINY_TEMP, cfg)


def test_zero_signal_data_is_not_learnable():
    null = dict(noise_std=0.0, intensity_gain=0.0, decoy_gain=0.0, mitosis_growth=1.0, circularization=0.0,
                apoptosis_growth=1.0, decoy_growth=1.0)
    train, val, test = _tiny_data(n=300, seed=2, **null)
    cfg = TrainConfig(batch_size=16, learning_rate=1e-3, max_epochs=3, master_seed=2)
    res = train_loop(train, val, TINY_ENC, TINY_TEMP, cfg)
    bacc = evaluate(res.model, test).metrics["bacc"]
    assert 0.45 <= bacc <= 0.55
