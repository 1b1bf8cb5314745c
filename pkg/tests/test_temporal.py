import math

import numpy as np
import pytest
import torch

from tempattn.encoder import EmbeddingSequence, EncoderConfig
from tempattn.gradcheck import check_gradients
from tempattn.temporal import (
    FateModel, TemporalConfig, TemporalModel, batch_frames, extract_attention, forward, positional_encoding, predict,
)
from tempattn.trajgen import Label, Trajectory


def _model(seed=0, dtype=torch.float32, **kw):
    torch.manual_seed(seed)
    cfg = TemporalConfig(**{"n_layers": 2, "n_heads": 2, "model_dim": 16, "dropout": 0.0, **kw})
    return TemporalModel(cfg).to(dtype).eval()


# ---------------------------------------------------------------- positional encoding

def test_pe_position_zero():
    pe = positional_encoding(5, 8)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)


def test_pe_closed_form():
    pe = positional_encoding(3, 4)
    assert pe[1, 0] == math.sin(1.0) and pe[1, 1] == math.cos(1.0)
    assert pe[2, 2] == pytest.approx(math.sin(2 / 100.0))
    assert pe[2, 3] == pytest.approx(math.cos(2 / 100.0))


def test_pe_rejects_odd_dim():
    with pytest.raises(ValueError):
        positional_encoding(4, 7)


def test_config_invariants():
    with pytest.raises(ValueError):
        TemporalConfig(model_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        TemporalConfig(dropout=1.0)
    assert TemporalConfig().ff_dim == 256


# ---------------------------------------------------------------- forward

@pytest.mark.parametrize("seed", range(5))
def test_padding_invariance(seed):
    model = _model(seed)
    g = torch.Generator().manual_seed(seed)
    T = 4 + seed
    x = torch.randn(1, T, 16, generator=g)
    logit, w = model(x, torch.ones(1, T, dtype=torch.bool))
    n_pad = 5 + 3 * seed
    xp = torch.cat([x, torch.randn(1, n_pad, 16, generator=g)], dim=1)
    mask = torch.cat([torch.ones(1, T, dtype=torch.bool), torch.zeros(1, n_pad, dtype=torch.bool)], dim=1)
    logit_p, wp = model(xp, mask)
    assert abs((logit - logit_p).item()) < 1e-5
    assert torch.all(wp[0, T:] == 0)
    torch.testing.assert_close(wp[0, :T], w[0], atol=1e-6, rtol=0)


def test_batch_padding_matches_single():
    model = _model(1)
    a = torch.randn(1, 6, 16)
    b = torch.randn(1, 9, 16)
    la, _ = model(a, torch.ones(1, 6, dtype=torch.bool))
    batch = torch.zeros(2, 9, 16)
    batch[0, :6] = a[0]
    batch[1] = b[0]
    mask = torch.ones(2, 9, dtype=torch.bool)
    mask[0, 6:] = False
    lb, _ = model(batch, mask)
    assert abs((lb[0] - la[0]).item()) < 1e-5


def test_permutation_symmetry_without_pe():
    model = _model(2, use_positional_encoding=False)
    x = torch.randn(1, 8, 16)
    mask = torch.ones(1, 8, dtype=torch.bool)
    ref, w = model(x, mask)
    for s in range(5):
        perm = torch.randperm(8, generator=torch.Generator().manual_seed(s))
        out, wp = model(x[:, perm], mask)
        assert abs((out - ref).item()) < 1e-4
        torch.testing.assert_close(wp[0], w[0, perm], atol=1e-6, rtol=0)


def test_positional_encoding_breaks_symmetry():
    model = _model(2)
    x = torch.randn(1, 8, 16)
    mask = torch.ones(1, 8, dtype=torch.bool)
    ref, _ = model(x, mask)
    out, _ = model(x.flip(1), mask)
    assert abs((out - ref).item()) > 1e-3


def test_single_frame_profile():
    model = _model(3)
    emb = EmbeddingSequence(values=torch.randn(1, 16), pad_mask=torch.ones(1, dtype=torch.bool))
    pred = forward(emb, model)
    np.testing.assert_array_equal(pred.attention.weights, [1.0])


def test_attention_on_simplex():
    model = _model(4)
    x = torch.randn(3, 10, 16)
    mask = torch.ones(3, 10, dtype=torch.bool)
    mask[1, 7:] = False
    mask[2, 2:] = False
    _, w = model(x, mask)
    assert torch.all(w >= 0)
    assert torch.all(w[~mask] == 0)
    torch.testing.assert_close(w.sum(dim=1), torch.ones(3), atol=1e-5, rtol=0)


def test_all_pad_input_raises():
    model = _model()
    mask = torch.zeros(1, 4, dtype=torch.bool)
    with pytest.raises(ValueError):
        model(torch.randn(1, 4, 16), mask)


def test_prediction_fields():
    model = _model(5)
    emb = EmbeddingSequence(values=torch.randn(7, 16), pad_mask=torch.ones(7, dtype=torch.bool))
    p = forward(emb, model, threshold=0.5)
    assert p.probability == pytest.approx(1 / (1 + math.exp(-p.logit)))
    assert p.label is (Label.APOPTOSIS if p.probability >= 0.5 else Label.MITOSIS)
    assert p.attention.length == 7


def test_dropout_uses_explicit_generator():
    model = _model(6, dropout=0.3)
    x = torch.randn(2, 5, 16)
    mask = torch.ones(2, 5, dtype=torch.bool)
    model.train()
    outs = []
    for _ in range(2):
        model.generator = torch.Generator().manual_seed(11)
        outs.append(model(x, mask)[0])
    assert torch.equal(outs[0], outs[1])
    model.eval()
    assert torch.equal(model(x, mask)[0], model(x, mask)[0])


# ---------------------------------------------------------------- gradients

def _grad_case(dtype, seed):
    model = _model(seed, dtype, n_layers=1, n_heads=2, model_dim=8)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 8, generator=g, dtype=dtype)
    mask = torch.ones(2, 3, dtype=torch.bool)
    return model, (lambda: (model(x, mask)[0] * torch.tensor([1.0, -0.5], dtype=dtype)).sum())


@pytest.mark.parametrize("seed", range(3))
def test_temporal_gradients_double(seed):
    model, loss = _grad_case(torch.float64, seed)
    assert check_gradients(loss, model.parameters()) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_temporal_gradients_single(seed):
    model, loss = _grad_case(torch.float32, seed)
    assert check_gradients(loss, model.parameters()) < 1e-3


# ---------------------------------------------------------------- full model helpers

def _trajs(lengths, seed=0):
    rng = np.random.default_rng(seed)
    return [Trajectory(frames=rng.random((T, 3, 8, 8)).astype(np.float32), label=Label(i % 2), traj_id=f"t{i}")
            for i, T in enumerate(lengths)]


def _fate(seed=0):
    torch.manual_seed(seed)
    enc = EncoderConfig(image_size=(8, 8), conv_blocks=[(4, 3, 2)], embed_dim=8)
    return FateModel(enc, TemporalConfig(n_layers=1, n_heads=2, model_dim=8, dropout=0.1)).eval()


def test_batch_frames_pads_and_zeroes_invalid():
    trajs = _trajs([12, 15])
    trajs[1] = trajs[1].replace(valid=np.array([True] * 11 + [False] * 4))
    frames, mask = batch_frames(trajs)
    assert frames.shape == (2, 15, 3, 8, 8)
    assert mask.sum(dim=1).tolist() == [12, 11]
    assert torch.all(frames[0, 12:] == 0) and torch.all(frames[1, 11:] == 0)


def test_predict_is_batch_size_independent():
    model = _fate()
    trajs = _trajs([12, 20, 15, 13])
    a = predict(model, trajs, batch_size=1)
    b = predict(model, trajs, batch_size=4)
    for p, q in zip(a, b):
        assert abs(p.logit - q.logit) < 1e-5
        assert p.attention.weights.shape == q.attention.weights.shape


def test_extract_attention_deterministic():
    model = _fate()
    tr = _trajs([14])[0]
    twin = tr.replace(traj_id="twin")
    a = extract_attention(model, tr)
    b = extract_attention(model, twin)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.length == 14 and a.weights.sum() == pytest.approx(1.0, abs=1e-5)
