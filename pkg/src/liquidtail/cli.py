"""Command-line entry point: train, generate, eval, sweep, drift, serve.

Every subcommand reads an optional JSON config (see config.RunConfig) with
flags overriding file values, and puts all randomness behind --seed. Errors
exit nonzero with a single machine-parsable line on stderr:
`error: kind=<slug> detail=<message>`.

Exit codes: 0 success, 2 bad config/arguments, 3 missing file,
4 unreadable/corrupt checkpoint, 5 bind failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, RunConfig, build_model, load_config, model_from_checkpoint
from .corpus import CheckpointError, Vocab, read_corpus
from .maturation import generate, new_session
from .training import train as run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_BIND = 5

_vocab = Vocab()


def _fail(kind: str, detail: object, code: int) -> int:
    msg = str(detail).replace("\n", " ")
    print(f"error: kind={kind} detail={msg}", file=sys.stderr)
    return code


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    for attr, section, key in [
        ("steps", "train", "steps"),
        ("batch_size", "train", "batch_size"),
        ("negatives", "loss", "negatives"),
        ("contrast_weight", "loss", "contrast_weight"),
        ("logit_scale", "loss", "logit_scale"),
        ("k", "maturation", "tail_len"),
        ("guidance", "maturation", "guidance"),
        ("max_tokens", "maturation", "max_tokens"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **{key: value}))
    return cfg


def _maturation_overrides(cfg: RunConfig, args) -> RunConfig:
    mat = cfg.maturation
    if getattr(args, "k", None) is not None:
        mat = dataclasses.replace(mat, tail_len=args.k)
    if getattr(args, "guidance", None) is not None:
        mat = dataclasses.replace(mat, guidance=args.guidance)
    if getattr(args, "max_tokens", None) is not None:
        mat = dataclasses.replace(mat, max_tokens=args.max_tokens)
    cfg.maturation = mat
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    corpus_path = args.corpus or cfg.paths.get("corpus")
    out_dir = args.out or cfg.paths.get("out")
    if not corpus_path:
        raise ConfigError("no corpus: pass --corpus or set paths.corpus")
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set paths.out")
    cfg.paths = {**cfg.paths, "corpus": str(corpus_path), "out": str(out_dir)}
    corpus = read_corpus(corpus_path)
    model, table = build_model(cfg)
    if args.finetune_embeddings:
        cfg.train = dataclasses.replace(cfg.train, finetune_embeddings=True)
    run_training(
        corpus,
        model,
        table,
        cfg.train,
        cfg.loss,
        tail_len=cfg.maturation.tail_len,
        embryo_scale=cfg.maturation.embryo_scale,
        out_dir=out_dir,
        config_snapshot=cfg.to_dict(),
        log_fn=print,
    )
    print(f"final checkpoint: {Path(out_dir) / 'final.tmck'}")
    return EXIT_OK


def _trace_json(session, prompt_ids: list[int], generated: list[int]) -> dict:
    steps = []
    for rec in session.trace or []:
        steps.append(
            {
                "step": rec["step"],
                "committed_before": rec["committed_before"],
                "committed_id": rec["committed_id"],
                "alphas": [float(a) for a in rec["alphas"]],
                "tail_vectors": rec["tail_vectors"].tolist(),
            }
        )
    return {"prompt_ids": prompt_ids, "generated_ids": generated, "steps": steps}


def cmd_generate(args) -> int:
    model, table, cfg, _ = model_from_checkpoint(args.checkpoint)
    cfg = _maturation_overrides(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seed
    prompt_ids = [_vocab.bos_id] + _vocab.encode(args.prompt)
    session = new_session(
        prompt_ids, table, cfg.maturation, seed, trace=args.trace_out is not None
    )
    generated = generate(session, model, table)
    if args.trace_out:
        Path(args.trace_out).write_text(
            json.dumps(_trace_json(session, prompt_ids, generated))
        )
    print(_vocab.decode_text(generated))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, table, cfg, _ = model_from_checkpoint(args.checkpoint)
    cfg = _maturation_overrides(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seed
    prompts = [
        line for line in Path(args.prompts).read_text().splitlines() if line.strip()
    ]
    if not prompts:
        raise ConfigError(f"{args.prompts}: no prompts found")
    generations = []
    for i, prompt in enumerate(prompts):
        ids = [_vocab.bos_id] + _vocab.encode(prompt)
        session = new_session(ids, table, cfg.maturation, seed + i)
        generations.append(generate(session, model, table))
    report = metrics.repetition_report(generations)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, table, cfg, _ = model_from_checkpoint(args.checkpoint)
    cfg = _maturation_overrides(cfg, args)
    k_values = [int(k) for k in args.k_list.split(",") if k]
    for k in k_values:
        if not 1 <= k <= cfg.backbone.k_max:
            raise ConfigError(f"k={k} outside model range [1, {cfg.backbone.k_max}]")
    prompt_ids = [_vocab.bos_id] + _vocab.encode(args.prompt)
    rows = metrics.diversity_sweep(
        prompt_ids, args.seeds, k_values, model, table, cfg.maturation
    )
    csv_text = metrics.sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def cmd_drift(args) -> int:
    _, init_table, _, _ = model_from_checkpoint(args.init)
    _, learned_table, _, _ = model_from_checkpoint(args.learned)
    report = metrics.embedding_drift(init_table, learned_table, top_k=args.top_k)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    model, table, cfg, _ = model_from_checkpoint(args.checkpoint)
    app = build_app(model, table, cfg)
    host, _, port = args.bind.rpartition(":")
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    except (OSError, SystemExit) as e:
        return _fail("bind", f"cannot serve on {args.bind}: {e}", EXIT_BIND)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liquidtail",
        description="Continuous-vector autoregressive generation with delayed commitment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, checkpoint: bool = True) -> None:
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="path to a .tmck checkpoint")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--k", type=int, default=None, help="liquid tail length")
        p.add_argument("--guidance", type=float, default=None, help="guidance scale s")
        p.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")

    p = sub.add_parser("train", help="train a model on a byte corpus")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--corpus", default=None, help="text file or directory")
    p.add_argument("--out", default=None, help="output directory for checkpoints/logs")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="training/inference tail length")
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="contrast_weight")
    p.add_argument("--logit-scale", type=float, default=None, dest="logit_scale")
    p.add_argument("--finetune-embeddings", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a continuation for a prompt")
    common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--trace-out", default=None, dest="trace_out", help="write per-step tail snapshots as JSON")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="repetition metrics over a prompts file")
    common(p)
    p.add_argument("--prompts", required=True, help="file with one prompt per line")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="diversity vs tail length")
    common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--k-list", default="1,4,16", dest="k_list", help="comma-separated tail lengths")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("drift", help="embedding drift between two checkpoints")
    p.add_argument("--init", required=True, help="checkpoint with the initial table")
    p.add_argument("--learned", required=True, help="checkpoint with the learned table")
    p.add_argument("--top-k", type=int, default=10, dest="top_k")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("serve", help="run the session-stepping HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bind", default="127.0.0.1:8151", help="host:port")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except FileNotFoundError as e:
        return _fail("missing-file", e, EXIT_MISSING)
    except CheckpointError as e:
        return _fail("checkpoint", e, EXIT_CHECKPOINT)
    except ValueError as e:
        return _fail("invalid-value", e, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
