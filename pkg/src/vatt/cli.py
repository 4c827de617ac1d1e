"""Command-line entry point: ``vatt <verb> [flags]``.

Exit codes: 0 success, 1 check failure, 2 configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_hash, parse_rates
from .data import SyntheticCorpus, write_streams
from .evalbench import (
    Geometry, activation_profile, flop_rows, heldout_eval, mbs_geometry, metric_line,
    write_flop_csv, write_histogram_csv,
)
from .model import build_model
from .numerics import Rng
from .training import (
    LowRankClassifier, NumericError, OptimizerState, load_checkpoint, low_rank_probe_step,
    pretrain, save_checkpoint,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vatt", description="Desk-scale multimodal Transformer toolkit")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, desc in (("pretrain", "contrastive pre-training on synthetic streams"),
                       ("gradcheck", "finite-difference gradient checks"),
                       ("flops", "analytic FLOP table per DropToken rate"),
                       ("eval", "retrieval, similarity and activation reports"),
                       ("probe", "low-rank linear probe on frozen features"),
                       ("gen-data", "export a synthetic fixture file")):
        s = sub.add_parser(verb, help=desc)
        s.add_argument("--config", type=Path, help="key=value config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", type=Path, help="output directory")
        if verb in ("pretrain",):
            s.add_argument("--resume", type=Path, help="checkpoint to continue from")
            s.add_argument("--steps", type=int, help="stop after this global step")
        if verb in ("eval", "probe"):
            s.add_argument("--checkpoint", "--resume", dest="checkpoint", type=Path,
                           help="checkpoint to evaluate (omit for an untrained model)")
        if verb == "flops":
            s.add_argument("--drop-rates", help="comma-separated rates, e.g. 0,0.25,0.5,0.75")
        if verb == "gradcheck":
            s.add_argument("--inject-fault", action="store_true", help="corrupt gradients (negative control)")
            s.add_argument("--max-coords", type=int, default=6, help="coordinates sampled per parameter")
    return p


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.override("seed", args.seed)
    if args.out is not None:
        cfg.override("out", str(args.out))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(out: Path, verb: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {
        "command": verb,
        "argv": sys.argv[1:],
        "seed": cfg["seed"],
        "build_hash": build_hash(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.values.items()},
    }
    manifest.update(extra or {})
    (out / f"manifest_{verb}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / f"config_{verb}.txt").write_text(cfg.dump())


def _emit(lines: list[str], fh) -> None:
    for line in lines:
        print(line)
        fh.write(line + "\n")
    fh.flush()


# ------------------------------------------------------------------ verbs


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    seed = cfg.require_seed()
    out = _out_dir(cfg)
    tcfg = cfg.train_config()
    model = build_model(cfg.model_config(), rng=Rng(seed, "model"))
    opt = OptimizerState.for_params(model.params())
    if args.resume is not None:
        if not args.resume.exists():
            raise ConfigError(f"--resume: checkpoint {args.resume} not found")
        load_checkpoint(args.resume, model, opt)
    write_manifest(out, "pretrain", cfg, {"resumed_from": str(args.resume) if args.resume else None,
                                          "start_step": opt.step})
    corpus = SyntheticCorpus(cfg.spec(), cfg["data.train_streams"], Rng(seed, "train_corpus"))
    ckpt = out / "checkpoint.vattckpt"
    until = min(args.steps, tcfg.steps) if args.steps is not None else tcfg.steps
    mode = "a" if args.resume is not None else "w"
    with open(out / "metrics.txt", mode) as fh:
        def on_step(res):
            if res.step % tcfg.log_every == 0:
                _emit([metric_line("loss", res.step, res.loss)], fh)
                fh.write(metric_line("grad_norm", res.step, res.grad_norm) + "\n")
                fh.write(metric_line("lr", res.step, res.lr) + "\n")

        pretrain(model, corpus, tcfg, opt, until, on_step, lambda step: save_checkpoint(ckpt, model, opt))
    save_checkpoint(ckpt, model, opt)
    print(f"checkpoint={ckpt} step={opt.step}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    cfg = _load(args)
    seed = int(cfg["seed"] or 0)
    out = _out_dir(cfg)
    write_manifest(out, "gradcheck", cfg, {"inject_fault": args.inject_fault})
    results = run_suite(seed, max_coords=args.max_coords, fault=args.inject_fault)
    failed = []
    with open(out / "gradcheck.txt", "w") as fh:
        for r in results:
            status = "pass" if r.passed else "FAIL"
            _emit([f"op={r.name} max_rel_err={r.report.max_rel_err:.3e} checked={r.report.checked} status={status}"], fh)
            if not r.passed:
                bad = [k for k, e in r.report.per_param.items() if e >= 1e-4]
                failed.append(r.name)
                _emit([f"  offending parameters: {', '.join(bad)}"], fh)
        verdict = "PASS" if not failed else f"FAIL ({len(failed)} of {len(results)} checks)"
        _emit([f"gradcheck {verdict}"], fh)
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_flops(args) -> int:
    cfg = _load(args)
    rates = parse_rates(args.drop_rates) if args.drop_rates else cfg.drop_rates()
    if cfg["flops.geometry"] == "mbs":
        geo = mbs_geometry()
    elif cfg["flops.geometry"] == "model":
        m = cfg.model_config()
        geo = Geometry(m.encoder_for("video"), m.encoder_for("audio"), m.encoder_for("text"),
                       cfg["data.frames"], cfg["data.height"], cfg["data.width"], m.patch,
                       cfg["data.wave_len"], m.audio_segment, m.text_max_len, m.heads.d_va, m.heads.d_vt)
    else:
        raise ConfigError(f"{cfg.source}: field 'flops.geometry' must be mbs or model")
    if args.out is not None:
        write_manifest(_out_dir(cfg), "flops", cfg, {"drop_rates": rates})
    write_flop_csv(flop_rows(geo, rates), sys.stdout)
    return EXIT_OK


def _model_from(cfg: RunConfig, checkpoint: Path | None):
    model = build_model(cfg.model_config(), rng=Rng(cfg.require_seed(), "model"))
    if checkpoint is not None:
        if not checkpoint.exists():
            raise ConfigError(f"checkpoint {checkpoint} not found")
        try:
            load_checkpoint(checkpoint, model)
        except ValueError as e:
            raise ConfigError(f"checkpoint incompatible with config: {e}") from None
    return model


def cmd_eval(args) -> int:
    cfg = _load(args)
    seed = cfg.require_seed()
    out = _out_dir(cfg)
    model = _model_from(cfg, args.checkpoint)
    write_manifest(out, "eval", cfg, {"checkpoint": str(args.checkpoint) if args.checkpoint else None})
    held = SyntheticCorpus(cfg.spec(heldout=True), max(cfg["data.heldout_streams"], cfg["eval.pool"]),
                           Rng(seed, "heldout_corpus"))
    res = heldout_eval(model, held, cfg["eval.pool"], cfg["eval.clips_per_video"], cfg["train.batch"])
    step = 0
    with open(out / "eval_metrics.txt", "w") as fh:
        lines = [metric_line(f"auc_{k}", step, rep.auc) for k, rep in res.separation.items()]
        lines += [metric_line("recall_at_10", step, res.retrieval.recall_at_10),
                  metric_line("median_rank", step, res.retrieval.median_rank)]
        _emit(lines, fh)
    for k, rep in res.separation.items():
        write_histogram_csv(out / f"hist_{k}_pos.csv", rep.pos_hist, rep.bin_edges)
        write_histogram_csv(out / f"hist_{k}_neg.csv", rep.neg_hist, rep.bin_edges)
    prof = activation_profile(model, res.profile_inputs)
    with open(out / "activation_profile.csv", "w") as fh:
        fh.write("modality,layer,node,mean_activation\n")
        for m, arr in prof.profiles.items():
            for layer, row in enumerate(arr):
                for node, val in enumerate(row):
                    fh.write(f"{m},{layer},{node},{val!r}\n")
    with open(out / "embeddings.csv", "w") as fh:
        d = res.video_agg.shape[1]
        fh.write("video,concept,style," + ",".join(f"e{i}" for i in range(d)) + "\n")
        for i, row in enumerate(res.video_agg):
            fh.write(f"{i},{res.concepts[i]},{res.styles[i]}," + ",".join(f"{x:.8g}" for x in row) + "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load(args)
    seed = cfg.require_seed()
    out = _out_dir(cfg)
    model = _model_from(cfg, args.checkpoint)
    write_manifest(out, "probe", cfg, {"checkpoint": str(args.checkpoint) if args.checkpoint else None})
    held = SyntheticCorpus(cfg.spec(heldout=True), cfg["data.heldout_streams"], Rng(seed, "probe_corpus"))
    clips = [c for s in held.streams for c in s]
    x = np.concatenate([model.embed_video(np.stack([c.video for c in clips[i:i + 64]])).data
                        for i in range(0, len(clips), 64)]).astype(np.float32)
    y = np.array([c.concept for c in clips])
    half = len(clips) // 2
    clf = LowRankClassifier(x.shape[1], cfg["data.concepts"], cfg["probe.components"], cfg["probe.rate"],
                            cfg["probe.lr"], Rng(seed, "probe"))
    with open(out / "probe_metrics.txt", "w") as fh:
        for step in range(cfg["probe.steps"]):
            loss = low_rank_probe_step(x[:half], y[:half], clf, Rng(seed, "probe_step", step))
            if step % 100 == 0:
                fh.write(metric_line("probe_loss", step, loss) + "\n")
        step = cfg["probe.steps"]
        _emit([metric_line("probe_train_acc", step, float(np.mean(clf.predict(x[:half]) == y[:half]))),
               metric_line("probe_test_acc", step, float(np.mean(clf.predict(x[half:]) == y[half:])))], fh)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    seed = cfg.require_seed()
    out = _out_dir(cfg)
    write_manifest(out, "gen-data", cfg)
    corpus = SyntheticCorpus(cfg.spec(), cfg["data.export_streams"], Rng(seed, "export"))
    clips = [c for s in corpus.streams for c in s]
    path = out / "synthetic.vattsyn"
    write_streams(path, clips)
    print(f"wrote {len(clips)} clips to {path}")
    return EXIT_OK


VERBS = {"pretrain": cmd_pretrain, "gradcheck": cmd_gradcheck, "flops": cmd_flops,
         "eval": cmd_eval, "probe": cmd_probe, "gen-data": cmd_gen_data}


def _thread_limit():
    n = os.environ.get("VATT_THREADS")
    if not n:
        return None
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"VATT_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(k)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        limiter = _thread_limit()
        try:
            return VERBS[args.verb](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
