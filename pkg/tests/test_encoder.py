import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slac_time import encoder as enc
from slac_time.triplets import bin_average, RawWindow
from tiny import TINY, classify_loss_fn, forecast_loss_fn, gradient_errors, tiny_model, tiny_sets


@pytest.fixture(scope="module")
def params():
    return enc.init_params(TINY, 0)


def shuffled(s: enc.TripletSet, perm) -> enc.TripletSet:
    return enc.TripletSet(s.times[perm], s.variables[perm], s.values[perm], s.static)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            enc.EncoderConfig(n_variables=3, d=50, n_heads=4)

    def test_defaults_valid(self):
        c = enc.EncoderConfig(n_variables=8)
        assert (c.ffn_units, c.n_blocks, c.n_heads, c.dropout) == (100, 2, 4, 0.2)
        assert c.cve_hidden == math.ceil(math.sqrt(c.d))

    @pytest.mark.parametrize("kw", [{"dropout": 1.0}, {"n_blocks": 0}, {"d": 0}, {"n_static": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            enc.EncoderConfig(n_variables=3, **{"d": 8, "n_heads": 2, **kw})


class TestInit:
    def test_same_seed(self):
        a, b = enc.init_params(TINY, 4), enc.init_params(TINY, 4)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)

    def test_different_seed(self):
        a, b = enc.init_params(TINY, 4), enc.init_params(TINY, 5)
        assert not np.array_equal(a["block0.wq"].data, b["block0.wq"].data)

    def test_shapes_and_zero_biases(self, params):
        h = TINY.cve_hidden
        assert params["cve_time.w1"].shape == (1, h)
        assert params["cve_value.w2"].shape == (h, TINY.d)
        assert params["variable_table"].shape == (3, TINY.d)
        assert params["block0.ff.w1"].shape == (TINY.d, TINY.ffn_units)
        assert "block1.wq" not in params
        for name, p in params.items():
            if name.endswith((".b", ".b1", ".b2")):
                assert not p.data.any(), name

    def test_glorot_bounds(self, params):
        w = params["block0.ff.w1"].data
        assert np.abs(w).max() <= math.sqrt(6 / (TINY.d + TINY.ffn_units))


class TestEmbedding:
    def test_cve_deterministic_and_shape(self, params):
        a, b = enc.cve_embed(0.3, params), enc.cve_embed(0.3, params)
        assert a.shape == (TINY.d,)
        np.testing.assert_array_equal(a, b)

    def test_cve_continuous(self, params):
        assert np.abs(enc.cve_embed(0.3, params) - enc.cve_embed(0.3 + 1e-8, params)).max() < 1e-6

    def test_variable_difference(self, params):
        diff = enc.embed_triplet(0.2, 0, 1.5, params) - enc.embed_triplet(0.2, 2, 1.5, params)
        table = params["variable_table"].data
        np.testing.assert_allclose(diff, table[0] - table[2], atol=1e-15)

    def test_zero_cve_gives_variable_row(self):
        p = enc.init_params(TINY, 1)
        for name in p:
            if name.startswith("cve_"):
                p[name].data[:] = 0.0
        np.testing.assert_array_equal(enc.embed_triplet(0.7, 1, -3.0, p), p["variable_table"].data[1])

    def test_out_of_range_variable(self, params):
        with pytest.raises(IndexError):
            enc.embed_triplet(0.1, 3, 0.0, params)


class TestEncode:
    def test_single_triplet_fusion(self, params):
        s = enc.TripletSet(np.array([0.4]), np.array([1]), np.array([0.5]))
        rep, w = enc.forward(params, TINY, enc.collate([s]), return_weights=True)
        assert w[0, 0] == 1.0
        assert rep.shape == (1, TINY.d)

    def test_inference_bit_identical(self, params):
        s = tiny_sets()[0]
        np.testing.assert_array_equal(enc.encode(s, params, TINY), enc.encode(s, params, TINY))

    def test_train_mode_uses_dropout(self, params):
        s = tiny_sets()[0]
        a = enc.encode(s, params, TINY, mode="train", rng=np.random.default_rng(0))
        assert not np.array_equal(a, enc.encode(s, params, TINY))

    def test_bad_mode(self, params):
        with pytest.raises(ValueError):
            enc.encode(tiny_sets()[0], params, TINY, mode="eval")

    def test_empty_rejected(self, params):
        empty = enc.TripletSet(np.zeros(0), np.zeros(0, dtype=int), np.zeros(0))
        with pytest.raises(ValueError):
            enc.encode(empty, params, TINY)

    def test_fusion_weights_sum_to_one(self, params):
        _, w = enc.forward(params, TINY, enc.collate(tiny_sets()), return_weights=True)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w[1, 3:] == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_permutation_invariance(self, params, data):
        n = data.draw(st.integers(1, 12))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
        s = enc.TripletSet(rng.random(n), rng.integers(0, 3, n), rng.normal(size=n))
        perm = np.array(data.draw(st.permutations(range(n))))
        np.testing.assert_allclose(
            enc.encode(s, params, TINY), enc.encode(shuffled(s, perm), params, TINY), atol=1e-9, rtol=0
        )

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 20))
    def test_padding_never_changes_representation(self, params, extra):
        sets = tiny_sets()
        tight = enc.forward(params, TINY, enc.collate(sets)).data
        padded = enc.forward(params, TINY, enc.collate(sets, pad_to=5 + extra)).data
        np.testing.assert_allclose(tight, padded, atol=1e-12, rtol=0)

    def test_batch_matches_single(self, params):
        sets = tiny_sets()
        batch = enc.encode_all(sets, params, TINY, batch_size=1)
        for s, row in zip(sets, enc.encode_all(sets, params, TINY)):
            np.testing.assert_allclose(enc.encode(s, params, TINY), row, atol=1e-12)
        np.testing.assert_allclose(batch, enc.encode_all(sets, params, TINY), atol=1e-12)

    def test_pad_too_short(self):
        with pytest.raises(ValueError):
            enc.collate(tiny_sets(), pad_to=3)


class TestStatic:
    def test_static_features_change_representation(self):
        config = enc.EncoderConfig(n_variables=3, d=8, ffn_units=16, n_blocks=1, n_heads=2, n_static=2)
        p = enc.init_params(config, 0)
        a, b = tiny_sets(n_static=2)[0], tiny_sets(n_static=2)[0]
        b.static = b.static + 1.0
        assert not np.allclose(enc.encode(a, p, config), enc.encode(b, p, config))

    def test_static_required_when_configured(self):
        config = enc.EncoderConfig(n_variables=3, d=8, ffn_units=16, n_blocks=1, n_heads=2, n_static=2)
        with pytest.raises(ValueError):
            enc.encode(tiny_sets()[0], enc.init_params(config, 0), config)

    def test_static_gradients(self):
        config = enc.EncoderConfig(n_variables=3, d=8, ffn_units=16, n_blocks=1, n_heads=2, n_static=2)
        params, head = tiny_model(config)
        errors = gradient_errors(classify_loss_fn(params, head, config, tiny_sets(n_static=2)), {**params, **head})
        assert max(errors.values()) < 1e-4, errors


class TestCapping:
    def test_under_cap_keeps_everything(self):
        assert list(enc.cap_indices(np.arange(5.0), np.zeros(5, int), 8)) == list(range(5))

    def test_budget_split_across_variables(self):
        t = np.arange(30.0)
        f = np.array([0] * 24 + [1] * 4 + [2] * 2)
        keep = enc.cap_indices(t, f, 12)
        assert keep.size == 12
        counts = np.bincount(f[keep], minlength=3)
        assert list(counts) == [6, 4, 2]

    def test_sample_triplets_time_scaled(self):
        w = RawWindow("P", 0, 0.0, 1800.0, np.array([5.0, 1795.0]), np.array([0, 1]), np.array([1.0, 2.0]))
        s = enc.sample_triplets(bin_average(w), 64)
        np.testing.assert_allclose(s.times, [5 / 1800, 1795 / 1800])
        assert np.all((s.times >= 0) & (s.times < 1))

    def test_max_bin_restricts(self):
        w = RawWindow("P", 0, 0.0, 1800.0, np.array([5.0, 300.0]), np.array([0, 1]), np.array([1.0, 2.0]))
        assert len(enc.sample_triplets(bin_average(w), 64, max_bin=20)) == 1

    def test_cap_is_order_free(self):
        rng = np.random.default_rng(0)
        t, f, v = rng.random(100) * 1800, rng.integers(0, 3, 100), rng.normal(size=100)
        perm = rng.permutation(100)
        a = enc.make_triplet_set(t, f, v, 1800.0, 16)
        b = enc.make_triplet_set(t[perm], f[perm], v[perm], 1800.0, 16)
        np.testing.assert_array_equal(a.values, b.values)


class TestGradients:
    def test_forecast_loss_inference(self):
        params, head = tiny_model(out=3)
        errors = gradient_errors(forecast_loss_fn(params, head, TINY, tiny_sets()), {**params, **head})
        assert max(errors.values()) < 1e-4, errors

    def test_classify_loss_with_fixed_dropout_masks(self):
        params, head = tiny_model(out=3)
        loss = classify_loss_fn(params, head, TINY, tiny_sets(), training=True)
        errors = gradient_errors(loss, {**params, **head})
        assert max(errors.values()) < 1e-4, errors

    def test_two_blocks(self):
        config = enc.EncoderConfig(n_variables=3, d=8, ffn_units=16, n_blocks=2, n_heads=4)
        params, head = tiny_model(config)
        errors = gradient_errors(forecast_loss_fn(params, head, config, tiny_sets()), {**params, **head})
        assert max(errors.values()) < 1e-4, errors
