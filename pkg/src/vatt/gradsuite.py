"""Finite-difference checks of every differentiable operation, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import SyntheticCorpus, SyntheticSpec
from .encoder import Encoder, EncoderConfig, mha_forward, relative_bias_lookup
from .heads import ProjectionHeads, project
from .losses import BatchPairing, LossConfig, mil_nce_loss, nce_loss, softmax_cross_entropy, total_loss
from .model import HeadsConfig, ModelConfig, ShareMode, build_model
from .numerics import DiffRecord, GradCheckReport, Rng, Tensor, backward, grad_check, parameter
from .tokenizers import AudioTokenizer, TextTokenizer, TokenSequence, VideoTokenizer, drop_token

F64 = np.float64
MICRO = EncoderConfig(2, 16, 32, 2, name="micro")
MICRO_TEXT_LEN = 12
GRAD_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def micro_model_config(share: ShareMode = ShareMode.SPECIFIC) -> ModelConfig:
    """d=16, two layers, two heads, at most 12 tokens per modality."""
    text = EncoderConfig(2, 16, 32, 2, True, MICRO_TEXT_LEN, "micro")
    return ModelConfig(share, MICRO, MICRO, text, shared=text if share == ShareMode.AGNOSTIC else None,
                       heads=HeadsConfig(16, 8), video_buckets=(2, 2, 2), audio_buckets=8,
                       vocab=64, text_max_len=MICRO_TEXT_LEN)


def micro_spec(seed: int = 0) -> SyntheticSpec:
    return SyntheticSpec(concepts=4, styles=2, frames=8, height=32, width=32, wave_len=1024,
                         vocab=64, stream_length=4, text_absent_fraction=0.0, seed=seed)


def micro_batch(seed: int = 0, batch: int = 4, positives: int = 2):
    corpus = SyntheticCorpus(micro_spec(seed), batch, Rng(seed, "gc_corpus"))
    b = corpus.batch(batch, Rng(seed, "gc_batch"), positives)
    b.text_present[-1] = False  # one text-absent sample
    b.positive_mask[-1] = False
    b.positive_mask[0, 1:] = False  # one sample with a single positive
    b.text_lengths = np.minimum(b.text_lengths, MICRO_TEXT_LEN)
    return b


def _check(name: str, f: Callable[[], Tensor], params: dict[str, Tensor], h: float, tol: float,
           max_coords: int, fault: bool, rng: Rng, floor: float) -> CheckResult:
    plist = list(params.values())
    with DiffRecord() as rec:
        loss = f()
    grads = backward(loss, rec, plist)
    if fault:
        grads = [g * 1.1 + 1e-3 for g in grads]
    rep = grad_check(f, plist, h=h, tol=tol, max_coords=max_coords, rng=rng.derive(name),
                     analytic=grads, names=list(params), floor=floor)
    return CheckResult(name, rep)


def _w(rng: Rng, tag: str, shape, scale: float = 0.5) -> Tensor:
    return parameter(rng.derive(tag).normal(size=shape) * scale, tag, F64)


def _scalarize(rng: Rng, tag: str, shape) -> Callable[[Tensor], Tensor]:
    """Weighted sum against a fixed random probe so every output element matters."""
    probe = Tensor(rng.derive(tag, "probe").normal(size=shape))
    return lambda y: nx.sum_(nx.mul(y, probe))


def operation_checks(seed: int = 0):
    """``(name, f, params)`` triples covering the numerics and model modules."""
    r = Rng(seed, "gradsuite")
    out = []

    a, b = _w(r, "a", (3, 4)), _w(r, "b", (4, 2))
    s = _scalarize(r, "mm", (3, 2))
    out.append(("matmul", lambda s=s: s(nx.matmul(a, b)), {"a": a, "b": b}))

    x = _w(r, "x", (3, 5), 1.5)
    for op in ("gelu", "relu", "exp", "softmax", "log_softmax", "logsumexp"):
        fn = {"gelu": nx.gelu, "relu": nx.relu, "exp": nx.exp, "softmax": nx.softmax,
              "log_softmax": nx.log_softmax, "logsumexp": nx.logsumexp}[op]
        shape = (3,) if op == "logsumexp" else (3, 5)
        s = _scalarize(r, op, shape)
        out.append((op, (lambda fn=fn, s=s: s(fn(x))), {"x": x}))

    pos = parameter(np.abs(r.derive("pos").normal(size=(3, 4))) + 0.5, "pos", F64)
    for op in ("log", "sqrt"):
        fn = getattr(nx, op)
        s = _scalarize(r, op, (3, 4))
        out.append((op, (lambda fn=fn, s=s: s(fn(pos))), {"x": pos}))
    num = _w(r, "num", (3, 4))
    s = _scalarize(r, "div", (3, 4))
    out.append(("div", lambda s=s: s(nx.div(num, pos)), {"num": num, "den": pos}))

    g, bb = _w(r, "g", (5,)), _w(r, "bb", (5,))
    s = _scalarize(r, "ln", (3, 5))
    out.append(("layer_norm", lambda s=s: s(nx.layer_norm(x, g, bb)), {"x": x, "gain": g, "bias": bb}))
    s = _scalarize(r, "bn", (3, 5))
    out.append(("batch_norm", lambda s=s: s(nx.batch_norm_train(x, g, bb)[0]), {"x": x, "gain": g, "bias": bb}))
    s = _scalarize(r, "l2", (3, 5))
    out.append(("l2_normalize", lambda s=s: s(nx.l2_normalize(x)), {"x": x}))
    s = _scalarize(r, "take", (2, 5))
    out.append(("take", lambda s=s: s(nx.take(x, np.array([2, 0]))), {"x": x}))
    y = _w(r, "y", (2, 5))
    s = _scalarize(r, "concat", (5, 5))
    out.append(("concat", lambda s=s: s(nx.concat([x, y], axis=0)), {"x": x, "y": y}))

    # attention with a relative bias and a padding mask
    enc = Encoder(EncoderConfig(2, 8, 16, 2, True, 6), r.derive("enc"), F64, std=0.3)
    enc.rel_table.data[...] = r.derive("rel").normal(size=enc.rel_table.shape) * 0.3
    xs = _w(r, "xs", (2, 5, 8))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    layer = enc.layers[0]
    s = _scalarize(r, "mha", (2, 5, 8))
    out.append(("mha_forward", lambda s=s: s(mha_forward(xs, layer, 2, relative_bias_lookup(5, enc.rel_table, 6), mask)),
                {"x": xs, **{k: layer[k] for k in ("wq", "bq", "wk", "bk", "wv", "wo", "bo")},
                 "rel_table": enc.rel_table}))
    tseq_tok = _w(r, "ts", (2, 5, 8))
    seq = TokenSequence(tseq_tok, np.tile(np.arange(5), (2, 1)), "text", valid=mask)
    s = _scalarize(r, "enc", (2, 8))
    out.append(("encoder_forward", lambda s=s: s(enc(seq)[1]), {"tokens": tseq_tok, **enc.params()}))

    vt = VideoTokenizer(4, (2, 4, 4), (2, 2, 2), r.derive("vt"), F64, std=0.3)
    clip = r.derive("clip").uniform(-1, 1, (4, 8, 8, 3))
    s = _scalarize(r, "vtok", (8, 4))
    out.append(("tokenize_video", lambda s=s: s(vt(clip).tokens), vt.params()))
    at = AudioTokenizer(4, 16, 4, r.derive("at"), F64, std=0.3)
    wave = r.derive("wave").uniform(-1, 1, 60)
    s = _scalarize(r, "atok", (4, 4))
    out.append(("tokenize_audio", lambda s=s: s(at(wave).tokens), at.params()))
    tt = TextTokenizer(4, 10, 6, r.derive("tt"), F64, std=0.3)
    s = _scalarize(r, "ttok", (6, 4))
    out.append(("tokenize_text", lambda s=s: s(tt([3, 1, 4, 1]).tokens), tt.params()))
    for rate in (0.25, 0.5, 0.75):
        drng = r.derive("drop", int(rate * 100))
        s = _scalarize(r, f"drop{rate}", (2, max(1, int(np.ceil((1 - rate) * 8))), 4))
        out.append((f"drop_token@{rate}",
                    (lambda rate=rate, drng=drng, s=s: s(drop_token(vt(np.stack([clip, clip])), rate, drng.derive("call")).tokens)),
                    vt.params()))

    heads = ProjectionHeads(6, 5, 4, 7, 3, r.derive("heads"), F64, std=0.3)
    zv, za, zt = _w(r, "zv", (4, 6)), _w(r, "za", (4, 5)), _w(r, "zt", (4, 4))
    s1, s2 = _scalarize(r, "h1", (4, 7)), _scalarize(r, "h2", (4, 3))
    def heads_f():
        e = project(zv, za, zt, heads)
        return nx.add(nx.add(s1(e.va_video), s1(e.va_audio)), nx.add(s2(e.vt_video), s2(e.vt_text)))
    out.append(("project", heads_f, {"zv": zv, "za": za, "zt": zt, **heads.params()}))

    ev, ea = _w(r, "ev", (5, 6)), _w(r, "ea", (5, 6))
    out.append(("nce_loss", lambda: nce_loss(ev, ea, 0.5), {"zv": ev, "za": ea}))
    out.append(("nce_loss_unidirectional", lambda: nce_loss(ev, ea, 0.5, False), {"zv": ev, "za": ea}))
    et = _w(r, "et", (5, 3, 6))
    pm = np.ones((5, 3), bool)
    pm[1, 2] = pm[3, 1:] = False
    pairing = BatchPairing(np.array([True, True, False, True, True]), pm)
    out.append(("mil_nce_loss", lambda: mil_nce_loss(ev, et, pairing, 0.5), {"zv": ev, "zt": et}))
    lg = _w(r, "lg", (4, 3))
    out.append(("softmax_cross_entropy", lambda: softmax_cross_entropy(lg, np.array([0, 2, 1, 2])), {"logits": lg}))
    return out


def end_to_end_checks(seed: int = 0):
    """Total loss on the micro model at each DropToken rate and both share modes."""
    batch = micro_batch(seed)
    out = []
    for share, rates in ((ShareMode.SPECIFIC, (0.0, 0.25, 0.5, 0.75)), (ShareMode.AGNOSTIC, (0.5,))):
        model = build_model(micro_model_config(share), rng=Rng(seed, "gc_model", share.value), dtype=F64)
        for rate in rates:
            drng = Rng(seed, "gc_drop", int(rate * 100))
            f = (lambda model=model, rate=rate, drng=drng:
                 total_loss(*model.forward(batch, rate, drng, "train"), LossConfig(0.07, 1.0)))
            out.append((f"total_loss[{share.value}]@{rate}", f, model.params()))
    return out


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, max_coords: int = 6,
              fault: bool = False, end_to_end: bool = True, floor: float = GRAD_FLOOR) -> list[CheckResult]:
    """Run every check; gradients under ``floor`` are judged by absolute error.

    Structurally zero gradients (e.g. a bias shift removed by batch
    normalisation) show pure round-off in finite differences, about 1e-9
    at ``h=1e-5`` for losses of order 1.
    """
    rng = Rng(seed, "gradsuite_coords")
    checks = operation_checks(seed) + (end_to_end_checks(seed) if end_to_end else [])
    return [_check(name, f, params, h, tol, max_coords, fault, rng, floor) for name, f, params in checks]
