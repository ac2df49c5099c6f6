import math

import numpy as np
import pytest

from kala import numerics as nx
from kala.errors import ConfigError, ContractError
from kala.kfm import ModulationParams
from kala.numerics import Tensor
from kala.transformer import (Encoder, FeedForward, MultiHeadAttention, TransformerConfig,
                              attention_block, feed_forward_block)


def make_encoder(seed=0, **kw):
    params = dict(num_layers=2, hidden=8, intermediate=16, num_heads=2, vocab_size=20,
                  max_len=16, dropout=0.0, kfm_locations=(1, 2))
    params.update(kw)
    return Encoder(TransformerConfig(**params), np.random.default_rng(seed))


def test_hidden_state_shapes():
    enc = make_encoder()
    states = enc.encode(np.arange(5))
    assert len(states) == 3
    assert all(s.shape == (5, 8) for s in states.layers)


@pytest.mark.parametrize("locations", [(1,), (2,), (1, 2)])
def test_identity_modulation_is_bit_identical(locations):
    enc = make_encoder(kfm_locations=locations)
    ids = np.random.default_rng(3).integers(0, 20, size=(2, 7))
    plain = enc.encode(ids)
    mods = {l: ModulationParams.identity((2, 7, 8)) for l in locations}
    modulated = enc.encode(ids, modulation=mods)
    for a, b in zip(plain.layers, modulated.layers):
        assert np.array_equal(a.data, b.data)


def test_modulation_on_plain_layer_rejected():
    enc = make_encoder(kfm_locations=(2,))
    with pytest.raises(ConfigError):
        enc.encode(np.arange(4), modulation={1: ModulationParams.identity((1, 4, 8))})


def test_kfm_location_outside_encoder_rejected():
    with pytest.raises(ConfigError):
        make_encoder(kfm_locations=(3,))


def test_first_site_scale_replayed_by_hand():
    enc = make_encoder(kfm_locations=(1,))
    ids = np.arange(6)[None, :]
    ones, zeros = np.ones((1, 6, 8)), np.zeros((1, 6, 8))
    mod = ModulationParams(Tensor(2 * ones), Tensor(zeros), Tensor(ones), Tensor(zeros))
    got = enc.encode(ids, modulation={1: mod})[1].data

    block = enc.blocks[0]
    h0 = enc.embed(ids)
    h_hat = block.ln1(nx.add(h0, block.attention(h0)))
    doubled = nx.scale(h_hat, 2.0)
    expected = block.ln2(nx.add(doubled, block.ff(doubled))).data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-14)


def test_block_outputs_are_normalised():
    enc = make_encoder()
    states = enc.encode(np.random.default_rng(0).integers(0, 20, size=(3, 9)))
    for h in states.layers[1:]:
        assert np.all(np.abs(h.data.mean(axis=-1)) < 1e-9)


def test_encode_is_deterministic():
    ids = np.arange(8)[None, :]
    runs = []
    for _ in range(2):
        enc = make_encoder(seed=5, dropout=0.2)
        runs.append(enc.encode(ids, training=True, rng=np.random.default_rng(9)).final.data)
    assert np.array_equal(*runs)


def test_training_needs_rng():
    with pytest.raises(ContractError):
        make_encoder(dropout=0.1).encode(np.arange(3), training=True)


def test_sequence_too_long():
    with pytest.raises(ContractError):
        make_encoder().encode(np.zeros(17, dtype=int))


def test_single_token_attention_is_one():
    att = MultiHeadAttention(8, 2, np.random.default_rng(0))
    _, weights = attention_block(att, Tensor(np.random.default_rng(1).normal(size=(1, 8))),
                                 return_weights=True)
    assert np.array_equal(weights.data, np.ones((2, 1, 1)))


def test_attention_rows_sum_to_one(rng):
    att = MultiHeadAttention(8, 4, rng)
    _, weights = attention_block(att, Tensor(rng.normal(size=(6, 8))), return_weights=True)
    assert np.all(np.abs(weights.data.sum(axis=-1) - 1) < 1e-12)


def test_two_token_attention_by_hand(rng):
    att = MultiHeadAttention(2, 1, rng)
    for lin in (att.query, att.key, att.value, att.output):
        lin.weight.data[...] = np.eye(2)
        lin.bias.data[...] = 0.0
    out = attention_block(att, Tensor(np.eye(2))).data
    p = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    np.testing.assert_allclose(out, [[p, 1 - p], [1 - p, p]], rtol=1e-14)


def test_feed_forward_zero_first_layer(rng):
    ff = FeedForward(8, 16, rng)
    ff.fc1.weight.data[...] = 0.0
    ff.fc2.bias.data[...] = 0.0
    out = feed_forward_block(ff, Tensor(rng.normal(size=(5, 8))))
    assert out.shape == (5, 8)
    assert np.array_equal(out.data, np.zeros((5, 8)))


def test_feed_forward_gradient(rng):
    ff = FeedForward(4, 6, rng)
    for p in ff.parameters():
        p.data += rng.normal(size=p.shape) * 0.3
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    f = lambda: nx.tsum(nx.mul(ff(x), w))
    nx.backward(f())
    with nx.no_grad():
        numeric = nx.finite_difference_gradient(lambda: f().item(), ff.parameters())
    for p, num in zip(ff.parameters(), numeric):
        assert nx.relative_error(p.grad, num) < 1e-4


def test_init_std_scales_every_weight():
    enc = make_encoder(hidden=32, intermediate=64, init_std=0.1, vocab_size=200)
    for name, p in enc.named_parameters():
        if p.ndim == 2:
            assert abs(p.data.std() - 0.1) < 0.02, name
    with pytest.raises(ConfigError):
        make_encoder(init_std=0.0)
