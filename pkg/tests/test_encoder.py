import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vatt import numerics as nx
from vatt.encoder import (
    PRESETS, Encoder, EncoderConfig, encoder_param_count, mha_forward, preset, relative_bias_lookup,
)
from vatt.numerics import DimensionError, Rng, Tensor, grad_check
from vatt.tokenizers import TokenSequence

F64 = np.float64
SMALL = EncoderConfig(2, 16, 32, 2, name="micro")


def _enc(cfg=SMALL, seed=0, std=0.3):
    return Encoder(cfg, Rng(seed), F64, std)


def _seq(n, d, seed=1, batch=None, valid=None):
    shape = (batch, n, d) if batch else (n, d)
    x = Tensor(Rng(seed).normal(size=shape))
    pos = np.arange(n) if batch is None else np.tile(np.arange(n), (batch, 1))
    return TokenSequence(x, pos, "test", valid=valid)


class TestMHA:
    def test_single_token_is_value_output_path(self):
        layer = _enc().layers[0]
        x = Rng(2).normal(size=(1, 16))
        out = mha_forward(Tensor(x), layer, 2).data
        v = x @ layer["wv"].data + layer["bv"].data
        np.testing.assert_allclose(out, v @ layer["wo"].data + layer["bo"].data, rtol=1e-12)

    def test_attention_rows_sum_to_one(self):
        layer = _enc().layers[0]
        _, probs = mha_forward(Tensor(Rng(3).normal(size=(2, 5, 16))), layer, 2, return_probs=True)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_permutation_equivariance(self):
        layer = _enc().layers[0]
        x = Rng(4).normal(size=(6, 16))
        perm = Rng(5).gen.permutation(6)
        a = mha_forward(Tensor(x), layer, 2).data
        b = mha_forward(Tensor(x[perm]), layer, 2).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_bias_shape_mismatch(self):
        layer = _enc().layers[0]
        with pytest.raises(DimensionError):
            mha_forward(Tensor(np.ones((3, 16))), layer, 2, bias=np.zeros((2, 4, 4)))

    def test_masked_keys_ignored(self):
        layer = _enc().layers[0]
        x = Rng(6).normal(size=(1, 4, 16))
        y = x.copy()
        y[0, 3] = 99.0
        mask = np.array([[True, True, True, False]])
        a = mha_forward(Tensor(x), layer, 2, key_mask=mask).data
        b = mha_forward(Tensor(y), layer, 2, key_mask=mask).data
        np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-12)


class TestRelativeBias:
    def test_index_arithmetic(self):
        table = Tensor(np.arange(2 * 31, dtype=F64).reshape(2, 31))
        b = relative_bias_lookup(2, table, 16).data
        # offsets i - j in {-1, 0, +1} map to columns 14, 15, 16
        np.testing.assert_array_equal(b[0], [[15, 14], [16, 15]])

    def test_translation_property(self):
        table = Tensor(Rng(1).normal(size=(3, 31)))
        b = relative_bias_lookup(10, table, 16).data
        for i in range(10):
            for j in range(10):
                np.testing.assert_array_equal(b[:, i, j], table.data[:, i - j + 15])

    def test_too_long(self):
        with pytest.raises(ValueError):
            relative_bias_lookup(17, Tensor(np.zeros((2, 31))), 16)

    def test_zero_table_equals_disabled(self):
        enc = _enc(SMALL.with_relative_bias(True))
        seq = _seq(5, 16)
        np.testing.assert_allclose(enc(seq, relative_bias=True)[0].data, enc(seq, relative_bias=False)[0].data)

    def test_first_layer_only(self):
        enc = _enc(SMALL.with_relative_bias(True))
        enc.rel_table.data[...] = Rng(9).normal(size=enc.rel_table.shape)
        seq = _seq(5, 16)
        calls = []
        orig = mha_forward

        import vatt.encoder as E

        def spy(x, layer, heads, bias=None, key_mask=None, return_probs=False):
            calls.append(bias is not None)
            return orig(x, layer, heads, bias, key_mask, return_probs)

        E.mha_forward = spy
        try:
            enc(seq, relative_bias=True)
        finally:
            E.mha_forward = orig
        assert calls == [True, False]


class TestEncoder:
    def test_output_shapes(self):
        z, z0 = _enc()(_seq(5, 16))
        assert z.shape == (6, 16) and z0.shape == (16,)
        np.testing.assert_array_equal(z.data[0], z0.data)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            _enc()(_seq(5, 8))

    def test_zero_output_projections_make_blocks_identity(self):
        enc = _enc()
        for layer in enc.layers:
            for k in ("wo", "bo", "w2", "b2"):
                layer[k].data[...] = 0
        seq = _seq(4, 16)
        z, _ = enc(seq)
        zin = np.concatenate([enc.x_agg.data[None], seq.tokens.data])
        ref = nx.layer_norm(Tensor(zin), enc.ln_g, enc.ln_b, 1e-6).data
        np.testing.assert_allclose(z.data, ref, atol=1e-12)

    def test_permutation_property(self):
        enc = _enc()
        x = Rng(7).normal(size=(6, 16))
        perm = Rng(8).gen.permutation(6)
        z, z0 = enc(TokenSequence(Tensor(x), np.arange(6), "t"))
        zp, z0p = enc(TokenSequence(Tensor(x[perm]), np.arange(6), "t"))
        np.testing.assert_allclose(z0p.data, z0.data, atol=1e-10)
        np.testing.assert_allclose(zp.data[1:], z.data[1:][perm], atol=1e-10)

    def test_padding_does_not_leak(self):
        enc = _enc(SMALL.with_relative_bias(True))
        enc.rel_table.data[...] = Rng(9).normal(size=enc.rel_table.shape)
        x = Rng(7).normal(size=(1, 6, 16))
        y = x.copy()
        y[0, 4:] = 50.0
        valid = np.array([[True] * 4 + [False] * 2])
        a = enc(TokenSequence(Tensor(x), np.arange(6)[None], "text", valid=valid), relative_bias=True)[1]
        b = enc(TokenSequence(Tensor(y), np.arange(6)[None], "text", valid=valid), relative_bias=True)[1]
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_finite_for_large_inputs(self):
        enc = _enc(std=0.02)
        for s in range(100):
            x = Rng(s).uniform(-100, 100, size=(2, 5, 16))
            z, _ = enc(TokenSequence(Tensor(x), np.tile(np.arange(5), (2, 1)), "t"))
            assert np.all(np.isfinite(z.data))

    def test_gradcheck_tiny(self):
        enc = _enc(SMALL.with_relative_bias(True))
        enc.rel_table.data[...] = Rng(9).normal(size=enc.rel_table.shape) * 0.3
        seq = _seq(5, 16, batch=2, valid=np.array([[True] * 5, [True] * 3 + [False] * 2]))
        probe = Tensor(Rng(11).normal(size=(2, 6, 16)))
        params = enc.params()
        rep = grad_check(lambda: nx.sum_(nx.mul(enc(seq, relative_bias=True)[0], probe)),
                         list(params.values()), max_coords=4, names=list(params))
        assert rep.passed, rep

    def test_param_count_matches_closed_form(self):
        for cfg in (SMALL, SMALL.with_relative_bias(True), PRESETS["tiny"]):
            assert Encoder(cfg, Rng(0)).param_count() == encoder_param_count(cfg)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(["small", "base", "medium", "large"]))
    def test_presets_divisible(self, name):
        cfg = preset(name)
        assert cfg.hidden % cfg.heads == 0

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            preset("huge")

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            EncoderConfig(1, 10, 20, 3)
