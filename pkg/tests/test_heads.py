import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vatt.heads import ProjectionHeads, cosine_similarity, project
from vatt.numerics import DimensionError, Rng, Tensor


def _heads(d=8, va=4, vt=2, seed=0):
    return ProjectionHeads(d, d, d, va, vt, Rng(seed), np.float64, std=0.5)


def _bn(x, gain, bias, eps=1e-5):
    mu, var = x.mean(axis=0), x.var(axis=0)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


class TestProject:
    def test_zero_weights_give_zero(self):
        h = _heads()
        for p in h.params().values():
            p.data[...] = 0
        z = Tensor(Rng(1).normal(size=(5, 8)))
        e = project(z, z, z, h)
        for t in (e.va_video, e.va_audio, e.vt_video, e.vt_text):
            np.testing.assert_array_equal(t.data, 0)

    def test_hierarchy(self):
        h = _heads()
        z = Tensor(Rng(1).normal(size=(6, 8)))
        e = project(z, None, None, h, "infer")
        again = h.video_vt(h.video_va(z, False), False)
        np.testing.assert_array_equal(e.vt_video.data, again.data)

    def test_hand_composed_oracle(self):
        h = _heads()
        r = Rng(2)
        for p in h.params().values():
            if p.name.endswith(("gain", "bias")):
                p.data[...] = r.normal(size=p.shape)
        zv, za, zt = (r.normal(size=(7, 8)) for _ in range(3))
        e = project(Tensor(zv), Tensor(za), Tensor(zt), h, "train")
        P = {k: v.data for k, v in h.params().items()}
        lin = lambda x, n: x @ P[n + ".w"] + P[n + ".b"]
        bn = lambda x, n: _bn(x, P[n + ".gain"], P[n + ".bias"])
        va_v = bn(lin(np.maximum(bn(lin(zv, "v_va1"), "v_va1_bn"), 0), "v_va2"), "v_va2_bn")
        np.testing.assert_allclose(e.va_video.data, va_v, atol=1e-6)
        np.testing.assert_allclose(e.va_audio.data, bn(lin(za, "a_va"), "a_va_bn"), atol=1e-6)
        np.testing.assert_allclose(e.vt_video.data, bn(lin(va_v, "v_vt"), "v_vt_bn"), atol=1e-6)
        np.testing.assert_allclose(e.vt_text.data, bn(lin(zt, "t_vt"), "t_vt_bn"), atol=1e-6)

    def test_default_widths(self):
        h = ProjectionHeads(16, 16, 16, rng=Rng(0))
        z = Tensor(Rng(1).normal(size=(3, 16)).astype(np.float32))
        e = project(z, z, z, h)
        assert e.va_video.shape[-1] == 512 and e.vt_text.shape[-1] == 256

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            project(Tensor(np.ones((2, 5))), None, None, _heads())

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            project(None, None, None, _heads(), "eval")

    def test_infer_is_pure(self):
        h = _heads()
        z = Tensor(Rng(3).normal(size=(4, 8)))
        project(z, z, z, h, "train")  # moves running statistics
        a = project(z, z, z, h, "infer")
        b = project(z, z, z, h, "infer")
        np.testing.assert_array_equal(a.vt_video.data, b.vt_video.data)

    def test_running_stats_momentum(self):
        h = _heads()
        z = Rng(4).normal(size=(10, 8))
        project(None, Tensor(z), None, h, "train")
        pre = z @ h.a_va.w.data + h.a_va.b.data
        np.testing.assert_allclose(h.a_va_bn.running_mean, 0.01 * pre.mean(axis=0), rtol=1e-9)
        np.testing.assert_allclose(h.a_va_bn.running_var, 0.99 + 0.01 * pre.var(axis=0), rtol=1e-9)

    def test_bn_train_moments(self):
        h = _heads()
        z = Tensor(Rng(5).normal(size=(64, 8)) * 3 + 1)
        out = h.a_va_bn(h.a_va(z), True).data  # gain 1, bias 0
        assert np.abs(out.mean(axis=0)).max() <= 1e-5
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-3)


class TestCosine:
    def test_basis(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            cosine_similarity([0, 0], [1, 0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)),
           st.floats(1e-3, 1e3))
    def test_scale_invariance_and_range(self, a, b, lam):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        c = cosine_similarity(a, b)
        assert -1 <= c <= 1
        assert cosine_similarity(lam * a, b) == pytest.approx(c, abs=1e-9)
