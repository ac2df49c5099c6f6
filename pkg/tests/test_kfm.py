import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kala.errors import AnnotationError, ConfigError, DimensionError
from kala.kfm import (NULL_ENTITY, SITES, KfmConfig, KfmLayer, apply_modulation,
                      compute_modulation)
from kala.numerics import Tensor


def trained_layer(d=6, seed=0, **flags):
    rng = np.random.default_rng(seed)
    layer = KfmLayer(d, KfmConfig(**flags), rng)
    for p in layer.parameters():
        p.data += rng.normal(size=p.shape)
    return layer


def test_apply_identity_is_exact(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    out = apply_modulation(x, Tensor(np.ones((4, 6))), Tensor(np.zeros((4, 6))))
    assert np.array_equal(out.data, x.data)


def test_apply_zero_gamma_gives_beta(rng):
    x, beta = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    out = apply_modulation(Tensor(x), Tensor(np.zeros((4, 6))), Tensor(beta))
    assert np.array_equal(out.data, beta)


def test_apply_doubling_then_subtracting(rng):
    x = rng.normal(size=(4, 6))
    out = apply_modulation(Tensor(x), Tensor(np.full((4, 6), 2.0)), Tensor(-x))
    assert np.array_equal(out.data, x)


def test_apply_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        apply_modulation(Tensor(np.ones((4, 6))), Tensor(np.ones((3, 6))), Tensor(np.zeros((4, 6))))


def test_null_entity_rows_are_identity(rng):
    layer = trained_layer()
    mods = compute_modulation(layer, {"E1": rng.normal(size=6)}, [(NULL_ENTITY, 0, 1), ("E1", 3, 3)], 5)
    for site, t in mods.as_dict().items():
        expected = 1.0 if site.startswith("gamma") else 0.0
        assert np.all(t.data[:3] == expected)
        assert not np.all(t.data[3] == expected)


def test_mention_tokens_share_rows(rng):
    layer = trained_layer()
    mods = compute_modulation(layer, {"E1": rng.normal(size=6)}, [("E1", 1, 2)], 4)
    for t in mods.as_dict().values():
        assert np.array_equal(t.data[1], t.data[2])


def test_fresh_layer_is_identity_everywhere(rng):
    layer = KfmLayer(6, KfmConfig(), rng)
    vectors = {"A": rng.normal(size=6), "B": rng.normal(size=6)}
    mods = compute_modulation(layer, vectors, [("A", 0, 1), ("B", 3, 4)], 6)
    assert np.array_equal(mods.gamma1.data, np.ones((6, 6)))
    assert np.array_equal(mods.beta2.data, np.zeros((6, 6)))


@pytest.mark.parametrize("disabled", SITES)
def test_disabled_site_stays_identity(rng, disabled):
    layer = trained_layer(**{disabled: False})
    mods = compute_modulation(layer, {"A": rng.normal(size=6)}, [("A", 0, 2)], 4)
    expected = np.ones((4, 6)) if disabled.startswith("gamma") else np.zeros((4, 6))
    assert np.array_equal(getattr(mods, disabled).data, expected)


def test_all_sites_disabled_rejected(rng):
    with pytest.raises(ConfigError):
        KfmLayer(6, KfmConfig(False, False, False, False), rng)


@pytest.mark.parametrize("mentions", [[("A", 1, 3), ("B", 3, 4)], [("A", 2, 6)], [("A", -1, 0)],
                                      [("A", 3, 2)]])
def test_bad_mentions(rng, mentions):
    layer = trained_layer()
    vectors = {"A": rng.normal(size=6), "B": rng.normal(size=6)}
    with pytest.raises(AnnotationError):
        compute_modulation(layer, vectors, mentions, 6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_identity_outside_mentions_and_shared_inside(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 20))
    layer = trained_layer(seed=seed % 7)
    cuts = np.sort(r.choice(np.arange(n + 1), size=min(n + 1, 2 * int(r.integers(0, 4))), replace=False))
    mentions = [(f"E{k % 2}", int(s), int(e) - 1) for k, (s, e) in enumerate(zip(cuts[::2], cuts[1::2]))
                if e > s]
    vectors = {"E0": r.normal(size=6), "E1": r.normal(size=6)}
    mods = compute_modulation(layer, vectors, mentions, n)
    covered = np.zeros(n, dtype=bool)
    for _, s, e in mentions:
        covered[s:e + 1] = True
    for site, t in mods.as_dict().items():
        identity = 1.0 if site.startswith("gamma") else 0.0
        assert np.all(t.data[~covered] == identity)
        for _, s, e in mentions:
            assert np.all(t.data[s:e + 1] == t.data[s])
