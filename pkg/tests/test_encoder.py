import numpy as np
import pytest
import torch

from tempattn.encoder import EncoderConfig, FrameEncoder, embed_frames
from tempattn.gradcheck import activation_pattern, check_gradients

SMALL = dict(in_channels=3, image_size=(8, 8), conv_blocks=[(4, 3, 2), (6, 3, 2)], embed_dim=8)


def _encoder(dtype=torch.float32, seed=0, **kw):
    torch.manual_seed(seed)
    return FrameEncoder(EncoderConfig(**{**SMALL, **kw})).to(dtype)


def test_output_shape_and_padding_zeros():
    enc = _encoder()
    frames = torch.rand(2, 5, 3, 8, 8)
    mask = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
    out = enc.encode_sequences(frames, mask)
    assert out.shape == (2, 5, 8)
    assert torch.all(out[1, 3:] == 0)
    assert torch.isfinite(out).all()


def test_duplicate_frames_embed_identically():
    enc = _encoder()
    frames = np.random.default_rng(0).random((6, 3, 8, 8)).astype(np.float32)
    frames[4] = frames[1]
    emb = embed_frames(frames, enc)
    assert torch.equal(emb.values[1], emb.values[4])


def test_frames_are_embedded_independently():
    enc = _encoder()
    a = torch.rand(7, 3, 8, 8)
    b = torch.rand(7, 3, 8, 8)
    b[2] = a[2]
    ea = embed_frames(a, enc).values
    eb = embed_frames(b, enc).values
    assert torch.equal(ea[2], eb[2])


def test_zero_projection_gives_zero_embeddings():
    enc = _encoder()
    torch.nn.init.zeros_(enc.proj.weight)
    torch.nn.init.zeros_(enc.proj.bias)
    assert torch.all(embed_frames(torch.rand(4, 3, 8, 8), enc).values == 0)


def test_shape_mismatch_raises():
    enc = _encoder()
    with pytest.raises(ValueError):
        embed_frames(torch.rand(4, 2, 8, 8), enc)
    with pytest.raises(ValueError):
        embed_frames(torch.rand(4, 3, 9, 8), enc)
    with pytest.raises(ValueError):
        embed_frames(torch.rand(3, 8, 8), enc)


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=4)
    with pytest.raises(ValueError):
        EncoderConfig(conv_blocks=[])
    assert FrameEncoder(EncoderConfig()).proj.out_features == 64


def _grad_case(dtype, seed):
    enc = _encoder(dtype, seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=dtype)
    r = torch.randn(2, 8, generator=g, dtype=dtype)
    return enc, (lambda: (enc(x) * r).sum())


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradients_double(seed):
    enc, loss = _grad_case(torch.float64, seed)
    assert check_gradients(loss, enc.parameters()) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradients_single(seed):
    enc, loss = _grad_case(torch.float32, seed)
    err = check_gradients(loss, enc.parameters(), pattern=activation_pattern(list(enc.convs)))
    assert err < 1e-3
