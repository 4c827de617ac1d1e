import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from vatt.data import SyntheticCorpus, SyntheticSpec
from vatt.encoder import EncoderConfig
from vatt.evalbench import (
    FlopReport, activation_profile, auc_rank, count_flops, cross_pairs, flop_rows, heldout_eval,
    mbs_geometry, metric_line, multimodal_flops, retrieval_eval, similarity_separation, video_representation,
    write_flop_csv, write_histogram_csv,
)
from vatt.model import build_model
from vatt.numerics import Rng
from vatt.tokenizers import kept_count

from conftest import desk_model_config

CFG = EncoderConfig(2, 64, 256, 4)


class TestFlops:
    def test_convention(self):
        r = count_flops(CFG, 9, input_dim=10, projected_tokens=12)
        n, d, m = 10, 64, 256
        assert r.tokens == n
        assert r.token_projection == 2 * 12 * 10 * d
        assert r.attention_projections == 2 * 8 * n * d * d
        assert r.attention_scores == 2 * 4 * n * n * d
        assert r.mlp == 2 * 4 * n * d * m
        assert r.total == r.token_projection + r.attention_projections + r.attention_scores + r.mlp

    def test_quadratic_ratio(self):
        # sequence lengths 2M and M once the aggregation token is included
        a = count_flops(CFG, 199).attention_scores
        b = count_flops(CFG, 99).attention_scores
        assert a == 4 * b

    @pytest.mark.parametrize("rate", [0.1, 0.25, 0.5, 0.75, 0.9])
    def test_scores_follow_kept_count_exactly(self, rate):
        g = mbs_geometry()
        n = g.video_tokens
        base = multimodal_flops(g, 0.0)["video"].attention_scores
        got = multimodal_flops(g, rate)["video"].attention_scores
        kept = math.ceil((1 - rate) * n)
        assert abs(kept_count(n, rate) - kept) <= 1
        assert got * (n + 1) ** 2 == base * (kept_count(n, rate) + 1) ** 2

    def test_total_strictly_decreasing(self):
        totals = [multimodal_flops(mbs_geometry(), r)["total"].total for r in np.linspace(0, 0.95, 20)]
        assert all(a > b for a, b in zip(totals, totals[1:]))

    def test_mbs_ratio_in_reported_band(self):
        g = mbs_geometry()
        assert g.video_tokens == 1568
        ratio = multimodal_flops(g, 0.75)["total"].total / multimodal_flops(g, 0.0)["total"].total
        # reported multimodal cost drops from 784.8 to 188.1 GFLOPs
        assert 0.20 <= ratio <= 0.30
        assert abs(ratio - 188.1 / 784.8) < 0.03

    def test_report_addition(self):
        a = FlopReport(1, 2, 3, 4, 5, 6)
        assert (a + a).total == 2 * a.total

    def test_zero_tokens(self):
        with pytest.raises(ValueError):
            count_flops(CFG, 0)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            multimodal_flops(mbs_geometry(), 1.0)

    def test_csv(self):
        rows = flop_rows(mbs_geometry(), [0.0, 0.0, 0.5])
        assert rows[0] == rows[1]
        buf = io.StringIO()
        write_flop_csv(rows, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0].startswith("drop_rate,") and len(lines) == 4

    def test_attention_column_half_rate(self):
        rows = flop_rows(mbs_geometry(), [0.0, 0.5])
        g = mbs_geometry()
        nv, na = g.video_tokens, g.audio_tokens
        # text keeps all tokens, so only video/audio scores shrink by about 4x
        text = count_flops(g.text, g.text_tokens).attention_scores
        va0 = rows[0]["attention_scores"] - text
        va5 = rows[1]["attention_scores"] - text
        lo = (g.video.layers * 4 * (nv // 2 + 1) ** 2 * g.video.hidden
              + g.audio.layers * 4 * (na // 2 + 1) ** 2 * g.audio.hidden)
        hi = (g.video.layers * 4 * (nv // 2 + 2) ** 2 * g.video.hidden
              + g.audio.layers * 4 * (na // 2 + 2) ** 2 * g.audio.hidden)
        assert lo <= va5 <= hi
        assert va5 / va0 == pytest.approx(0.25, abs=0.01)


def _brute_ranks(q, pool, targets):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    ranks = []
    for i, t in enumerate(targets):
        sims = [(float(q[i] @ p), j) for j, p in enumerate(pool)]
        order = sorted(range(len(pool)), key=lambda j: (-sims[j][0], j))
        ranks.append(order.index(t) + 1)
    return np.array(ranks)


class TestRetrieval:
    def test_exact_match_orthogonal_pool(self):
        pool = np.eye(6)[:, None, :].repeat(4, axis=1)
        r = retrieval_eval(np.eye(6), pool)
        assert (r.ranks == 1).all() and r.median_rank == 1 and r.recall_at_10 == 1.0

    def test_adversarial(self):
        pool = np.array([[1.0, 0.0], [0.9, 0.1], [0.5, 0.5], [0.0, 1.0]])
        r = retrieval_eval(np.array([[0.0, 1.0]]), pool, targets=[0])
        assert r.ranks[0] == 4

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_matches_brute_force(self, seed, m):
        r = Rng(seed)
        clips = r.normal(size=(m, 4, 5))
        q = r.normal(size=(m, 5))
        got = retrieval_eval(q, clips)
        pool = video_representation(clips)
        np.testing.assert_array_equal(got.ranks, _brute_ranks(q, pool, range(m)))

    def test_ties_by_pool_index(self):
        pool = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        q = np.array([[1.0, 0.0]] * 3)
        np.testing.assert_array_equal(retrieval_eval(q, pool).ranks, [1, 2, 3])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_ranks_form_permutation(self, seed):
        r = Rng(seed)
        pool = np.round(r.normal(size=(7, 3)), 1)
        q = np.repeat(r.normal(size=(1, 3)), 7, axis=0)
        ranks = retrieval_eval(q, pool, targets=np.arange(7)).ranks
        assert sorted(ranks.tolist()) == list(range(1, 8))

    def test_representation_order(self):
        clips = np.array([[[2.0, 0.0], [0.0, 1.0]]])
        np.testing.assert_allclose(video_representation(clips), [[1 / math.sqrt(2), 1 / math.sqrt(2)]])

    def test_recall_consistent(self):
        r = retrieval_eval(Rng(1).normal(size=(30, 4)), Rng(2).normal(size=(30, 4)))
        assert r.recall_at_10 == np.mean(r.ranks <= 10)
        assert r.ranks.min() >= 1 and r.ranks.max() <= 30
        assert r.median_rank == np.sort(r.ranks)[15]

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            retrieval_eval(np.ones((1, 3)), np.zeros((0, 4, 3)))


class TestSeparation:
    def test_perfect(self):
        rep = similarity_separation(np.ones(5), -np.ones(7))
        assert rep.auc == 1.0
        assert rep.pos_hist[-1] == 5 and rep.neg_hist[0] == 7 and rep.bin_edges.size == 65

    def test_null(self):
        r = Rng(0)
        rep = similarity_separation(np.tanh(r.normal(size=10_000)), np.tanh(r.normal(size=10_000)))
        assert abs(rep.auc - 0.5) <= 0.02

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_enumeration_oracle(self, seed):
        r = Rng(seed)
        pos = np.round(r.uniform(-1, 1, int(r.integers(1, 9))), 1)
        neg = np.round(r.uniform(-1, 1, int(r.integers(1, 9))), 1)
        want = np.mean([1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg)])
        assert auc_rank(pos, neg) == pytest.approx(want, abs=1e-12)
        assert 0 <= auc_rank(pos, neg) <= 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_invariance(self, seed):
        r = Rng(seed)
        pos, neg = r.uniform(-1, 1, 20), r.uniform(-1, 1, 30)
        f = lambda x: np.exp(3 * x) - 2
        assert auc_rank(f(pos), f(neg)) == auc_rank(pos, neg)

    def test_vector_pairs(self):
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        rep = similarity_separation((a, a), (a, a[::-1]))
        np.testing.assert_allclose(rep.pos, 1.0)
        np.testing.assert_allclose(rep.neg, 0.0, atol=1e-15)

    def test_cross_pairs_groups(self):
        a = np.eye(3)
        pos, neg = cross_pairs(a, a, groups=np.array([0, 0, 1]))
        assert pos.size == 3 and neg.size == 4

    def test_needs_both(self):
        with pytest.raises(ValueError):
            similarity_separation(np.ones(3), np.zeros(0))


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _reference_mlp_taps(enc, tokens, valid=None, rel=False):
    """Independent re-implementation of the encoder forward collecting MLP outputs."""
    P = {k: v.data.astype(np.float64) for k, v in enc.params().items()}
    cfg = enc.cfg
    B, N, d = tokens.shape
    H, dh = cfg.heads, d // cfg.heads
    z = np.concatenate([np.broadcast_to(P["x_agg"], (B, 1, d)), tokens], axis=1)
    mask = np.ones((B, N + 1), bool)
    if valid is not None:
        mask[:, 1:] = valid
    bias = np.zeros((H, N + 1, N + 1))
    if rel:
        for i in range(N):
            for j in range(N):
                bias[:, i + 1, j + 1] = P["rel_table"][:, i - j + cfg.max_len - 1]
    taps = []
    for li in range(cfg.layers):
        L = {k.split(".", 1)[1]: v for k, v in P.items() if k.startswith(f"layer{li}.")}
        h = _ln(z, L["ln1_g"], L["ln1_b"])
        att = np.zeros_like(z)
        for b in range(B):
            for hd in range(H):
                sl = slice(hd * dh, (hd + 1) * dh)
                q = (h[b] @ L["wq"] + L["bq"])[:, sl]
                k = (h[b] @ L["wk"] + L["bk"])[:, sl]
                v = (h[b] @ L["wv"] + L["bv"])[:, sl]
                s = q @ k.T / math.sqrt(dh) + (bias[hd] if li == 0 else 0)
                s[:, ~mask[b]] = -np.inf
                p = np.exp(s - s.max(1, keepdims=True))
                p /= p.sum(1, keepdims=True)
                att[b, :, sl] = p @ v
        z = z + att @ L["wo"] + L["bo"]
        h = _ln(z, L["ln2_g"], L["ln2_b"])
        u = h @ L["w1"] + L["b1"]
        u = 0.5 * u * (1 + erf(u / math.sqrt(2)))
        out = u @ L["w2"] + L["b2"]
        taps.append(out)
        z = z + out
    w = mask.astype(np.float64)
    return np.stack([(t * w[..., None]).sum((0, 1)) / w.sum() for t in taps])


class TestActivationProfile:
    def _model(self, share="specific"):
        return build_model(desk_model_config(share), rng=Rng(0), dtype=np.float64)

    def _inputs(self):
        b = SyntheticCorpus(SyntheticSpec(stream_length=4, text_absent_fraction=0.0), 6, Rng(1)).batch(6, Rng(2))
        return b, {"video": b.video, "audio": b.audio, "text": (b.text_ids[:, 0], b.text_lengths[:, 0])}

    def test_shapes(self):
        m = self._model()
        prof = activation_profile(m, self._inputs()[1]).profiles
        for k in ("video", "audio", "text"):
            assert prof[k].shape == (2, 64)

    def test_zero_mlp(self):
        m = self._model()
        for enc in m.unique_encoders().values():
            for layer in enc.layers:
                for k in ("w2", "b2"):
                    layer[k].data[...] = 0
        for p in activation_profile(m, self._inputs()[1]).profiles.values():
            assert not p.any()

    def test_deterministic(self):
        m = self._model()
        a = activation_profile(m, self._inputs()[1]).profiles
        b = activation_profile(m, self._inputs()[1]).profiles
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    @pytest.mark.parametrize("share", ["specific", "agnostic"])
    def test_matches_reference_forward(self, share):
        m = self._model(share)
        rng = Rng(3)
        for enc in m.unique_encoders().values():
            if enc.rel_table is not None:
                enc.rel_table.data[...] = rng.normal(size=enc.rel_table.shape)
            for layer in enc.layers:
                for k in ("bq", "b1", "b2", "ln1_b"):
                    layer[k].data[...] = 0.1 * rng.normal(size=layer[k].shape)
        b, inputs = self._inputs()
        prof = activation_profile(m, inputs).profiles
        v = m.video_tok(b.video).tokens.data
        np.testing.assert_allclose(prof["video"], _reference_mlp_taps(m.encoders["video"], v), atol=1e-6)
        a = m.audio_tok(b.audio).tokens.data
        np.testing.assert_allclose(prof["audio"], _reference_mlp_taps(m.encoders["audio"], a), atol=1e-6)
        seq = m.text_tok(*inputs["text"])
        want = _reference_mlp_taps(m.encoders["text"], seq.tokens.data, seq.valid, rel=True)
        np.testing.assert_allclose(prof["text"], want, atol=1e-6)


class TestEmitters:
    def test_metric_line(self):
        assert metric_line("auc_va", 20, 0.5) == "metric=auc_va step=20 value=0.5"

    def test_histogram_csv(self):
        buf = io.StringIO()
        write_histogram_csv(buf, np.array([1, 2]), np.array([-1.0, 0.0, 1.0]))
        assert buf.getvalue() == "bin_left,count\n-1.0,1\n0.0,2\n"


class TestHeldout:
    def test_pool_rows_and_untrained_null(self):
        spec = SyntheticSpec(stream_length=4, text_absent_fraction=0.0)
        corpus = SyntheticCorpus(spec, 40, Rng(0))
        m = build_model(desk_model_config(), rng=Rng(1))
        res = heldout_eval(m, corpus, pool=20, batch=20)
        assert res.video_agg.shape == (20, 64) and res.retrieval.ranks.shape == (20,)
        for rep in res.separation.values():
            assert 0 <= rep.auc <= 1

    def test_pool_too_large(self):
        corpus = SyntheticCorpus(SyntheticSpec(stream_length=4), 5, Rng(0))
        with pytest.raises(ValueError):
            heldout_eval(build_model(desk_model_config(), rng=Rng(1)), corpus, pool=6)
