"""Command-line entry point.

Exit codes: 0 success, 2 missing input / usage error, 3 validation failure,
4 numeric failure. Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from . import gradcheck as gradcheck_mod
from .backbone import tokenize
from .bleu import BleuError, corpus_bleu
from .checkpoint import Checkpoint, CheckpointError, build_model
from .embeddings import EmbeddingError, embed_graph, make_provider
from .io import atomic_write_text
from .scene_graph import (
    Origin,
    SceneGraphError,
    SuperGraph,
    build_lsg,
    build_msg,
    dumps_graph,
    loads_graphs,
    parse_jsonl,
    validate,
)
from .training import NonFiniteError, ParallelExample, StageMismatchError, TrainConfig, load_config, run

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind, self.message = code, kind, message


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, "missing_input", f"no such file: {path}") from None


def _lines(path: str) -> list[str]:
    return [line for line in _read(path).split("\n") if line.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _load_graphs(path: str) -> list:
    return loads_graphs(_read(path))


# ---------------------------------------------------------------------------
# commands


def cmd_parse(args, origin: Origin):
    graphs, malformed = parse_jsonl(_read(args.input), origin)
    for rec in malformed:
        print(json.dumps({"line": rec.line, "reason": rec.reason}), file=sys.stderr)
    _emit("".join(dumps_graph(g) + "\n" for g in graphs), args.output)
    return EXIT_OK


def cmd_validate(args):
    graphs, malformed = parse_jsonl(_read(args.input), Origin(args.origin.upper()))
    lines = []
    for i, g in enumerate(graphs):
        rep = validate(g)
        lines.append(json.dumps({"graph": i, "connected": rep.connected, "isolated_node_ids": rep.isolated_node_ids}))
    lines.append(json.dumps({"malformed_records": [{"line": r.line, "reason": r.reason} for r in malformed]}))
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_INVALID if malformed else EXIT_OK


def _strict_parse(path, origin):
    graphs, malformed = parse_jsonl(_read(path), origin)
    if malformed:
        first = malformed[0]
        raise CliError(EXIT_INVALID, "validation", f"{path} line {first.line}: {first.reason}")
    return graphs


def cmd_build_msg(args):
    isgs = _strict_parse(args.isg, Origin.ISG)
    tsgs = _strict_parse(args.tsg, Origin.TSG)
    keys = _lines(args.image_keys)
    if not len(isgs) == len(tsgs) == len(keys):
        raise CliError(EXIT_INVALID, "validation", f"count mismatch: {len(isgs)} ISGs, {len(tsgs)} TSGs, {len(keys)} keys")
    msgs = [build_msg(i, t, k) for i, t, k in zip(isgs, tsgs, keys)]
    _emit("".join(dumps_graph(g) + "\n" for g in msgs), args.output)
    return EXIT_OK


def cmd_build_lsg(args):
    tsgs = _strict_parse(args.tsg, Origin.TSG)
    keys = _lines(args.text_keys)
    if len(tsgs) != len(keys):
        raise CliError(EXIT_INVALID, "validation", f"count mismatch: {len(tsgs)} TSGs, {len(keys)} keys")
    _emit("".join(dumps_graph(build_lsg(t, k)) + "\n" for t, k in zip(tsgs, keys)), args.output)
    return EXIT_OK


def cmd_embed(args):
    provider = make_provider(args.provider, args.dim)
    out = []
    for g in _load_graphs(args.graphs):
        if not isinstance(g, SuperGraph):
            raise CliError(EXIT_INVALID, "validation", "embed needs MSG/LSG graphs with a super node")
        e = embed_graph(g, provider)
        out.append(json.dumps({
            "node_features": e.node_features.tolist(),
            "edge_features": e.edge_features.tolist(),
            "edge_index": e.edge_index.tolist(),
        }))
    _emit("".join(line + "\n" for line in out), args.output)
    return EXIT_OK


def _examples(graphs_path, src_path, tgt_path):
    graphs = _load_graphs(graphs_path)
    src, tgt = _lines(src_path), _lines(tgt_path)
    if not len(graphs) == len(src) == len(tgt):
        raise CliError(EXIT_INVALID, "validation", f"count mismatch: {len(graphs)} graphs, {len(src)} sources, {len(tgt)} targets")
    return [ParallelExample.from_text(g, s, t) for g, s, t in zip(graphs, src, tgt)]


def cmd_train(args):
    overrides = {
        "stage": args.stage,
        "seed": args.seed,
        "no_gate": True if args.no_gate else None,
        "skip_stage1": True if args.skip_stage1 else None,
        "unfreeze_encoder": True if args.unfreeze_encoder else None,
        "max_epochs": args.max_epochs,
    }
    if args.config:
        config = load_config(args.config, **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    train = _examples(args.train_graphs, args.train_src, args.train_tgt)
    valid = _examples(args.valid_graphs, args.valid_src, args.valid_tgt) if args.valid_graphs else None
    kwargs = {"checkpoint_path": args.out, "metrics_path": args.metrics}
    if config.stage == "two" and not config.skip_stage1:
        if not args.stage1_checkpoint:
            raise CliError(EXIT_MISSING, "missing_input", "stage two needs --stage1-checkpoint (or --skip-stage1)")
        kwargs["stage1_checkpoint"] = args.stage1_checkpoint
    result = run(train, valid, config, **kwargs)
    print(json.dumps({"best_epoch": result.best_epoch, "epochs": len(result.metrics), "steps": result.steps}))
    return EXIT_OK


def cmd_translate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = build_model(ckpt)
    mode = args.mode or ("lsg" if ckpt.meta.get("stage") == "two" else "multimodal")
    sources = _lines(args.src)
    if args.graphs:
        graphs = _load_graphs(args.graphs)
    elif mode == "multimodal":
        raise CliError(EXIT_MISSING, "missing_input", "multimodal translation needs --graphs")
    elif args.tsg:
        tsgs = _strict_parse(args.tsg, Origin.TSG)
        if len(tsgs) != len(sources):
            raise CliError(EXIT_INVALID, "validation", f"count mismatch: {len(tsgs)} TSGs, {len(sources)} sources")
        graphs = [build_lsg(t, s) for t, s in zip(tsgs, sources)]
    else:
        raise CliError(EXIT_MISSING, "missing_input", "lsg translation needs --graphs or --tsg")
    if len(graphs) != len(sources):
        raise CliError(EXIT_INVALID, "validation", f"count mismatch: {len(graphs)} graphs, {len(sources)} sources")
    expected = "Image" if mode == "multimodal" else "Text"
    for i, g in enumerate(graphs):
        if not isinstance(g, SuperGraph) or g.kind.value != expected:
            raise CliError(EXIT_INVALID, "validation", f"graph {i} does not match {mode} mode")
    provider = make_provider(args.provider or ckpt.meta.get("provider", "stub"), model.config.dim)
    out = []
    for g, s in zip(graphs, sources):
        toks = tokenize(s)
        max_len = args.max_len or 2 * len(toks) + 5
        hyp = model.beam(model.vocab.encode(toks), embed_graph(g, provider), args.beam, max_len)
        out.append(" ".join(model.vocab.decode(hyp.tokens)))
    _emit("".join(line + "\n" for line in out), args.output)
    return EXIT_OK


def cmd_eval_bleu(args):
    hyps = [tokenize(line) for line in _read(args.hyp).rstrip("\n").split("\n")]
    refs = [tokenize(line) for line in _read(args.ref).rstrip("\n").split("\n")]
    report = corpus_bleu(hyps, refs, smoothing=args.smoothing)
    _emit(json.dumps(report.to_dict()) + "\n", args.output)
    return EXIT_OK


def cmd_gradcheck(args):
    errors = gradcheck_mod.run(args.dim, args.layers, args.heads, args.seq_len, args.seed)
    worst = max(errors.values())
    print(json.dumps({"max_relative_error": worst, "tolerance": gradcheck_mod.TOLERANCE,
                      "worst_tensor": max(errors, key=errors.get)}))
    return EXIT_OK if worst < gradcheck_mod.TOLERANCE else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphmt", description="Scene-graph guided translation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("parse-isg", "parse image scene graph JSONL"), ("parse-tsg", "parse textual scene graph JSONL")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("input", help="JSONL file, one {entities, relations} object per line")
        s.add_argument("-o", "--output", help="write serialized graphs here (default stdout)")

    s = sub.add_parser("validate", help="report connectivity and malformed records")
    s.add_argument("input", help="scene-graph JSONL file")
    s.add_argument("--origin", choices=["isg", "tsg"], default="tsg", help="origin tag for parsed nodes")
    s.add_argument("-o", "--output", help="report destination (default stdout)")

    s = sub.add_parser("build-msg", help="merge ISG and TSG lines into multimodal graphs")
    s.add_argument("--isg", required=True, help="ISG JSONL file")
    s.add_argument("--tsg", required=True, help="TSG JSONL file, line-aligned with --isg")
    s.add_argument("--image-keys", required=True, help="one image embedding key per line")
    s.add_argument("-o", "--output", help="serialized graph JSONL destination")

    s = sub.add_parser("build-lsg", help="wrap TSG lines into linguistic graphs")
    s.add_argument("--tsg", required=True, help="TSG JSONL file")
    s.add_argument("--text-keys", required=True, help="one sentence embedding key per line (usually the source text)")
    s.add_argument("-o", "--output", help="serialized graph JSONL destination")

    s = sub.add_parser("embed", help="compute node/edge feature matrices")
    s.add_argument("--graphs", required=True, help="serialized MSG/LSG JSONL file")
    s.add_argument("--provider", default="stub", help="'stub' or 'file:PATH'")
    s.add_argument("--dim", type=int, default=16, help="feature dimension")
    s.add_argument("-o", "--output", help="JSONL destination")

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--stage", choices=["one", "two", "one-multimodal"], help="override the config stage")
    s.add_argument("--train-graphs", required=True, help="serialized graph JSONL, line-aligned with sources")
    s.add_argument("--train-src", required=True, help="source sentences, one per line")
    s.add_argument("--train-tgt", required=True, help="target sentences, one per line")
    s.add_argument("--valid-graphs", help="validation graphs (defaults to the training set)")
    s.add_argument("--valid-src", help="validation sources")
    s.add_argument("--valid-tgt", help="validation targets")
    s.add_argument("--stage1-checkpoint", help="stage-one checkpoint to continue from in stage two")
    s.add_argument("--out", required=True, help="checkpoint destination")
    s.add_argument("--metrics", help="per-epoch metrics JSONL destination")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--max-epochs", type=int, help="override the config max_epochs")
    s.add_argument("--no-gate", action="store_true", help="ablation: replace gated fusion by LayerNorm(O)")
    s.add_argument("--skip-stage1", action="store_true", help="ablation: stage two from a fresh model")
    s.add_argument("--unfreeze-encoder", action="store_true", help="ablation: train the encoder in stage one")

    s = sub.add_parser("translate", help="beam-search translation")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--src", required=True, help="source sentences, one per line")
    s.add_argument("--graphs", help="serialized MSG/LSG JSONL, line-aligned with --src")
    s.add_argument("--tsg", help="TSG JSONL; LSGs are built on the fly with the source line as text key")
    s.add_argument("--mode", choices=["lsg", "multimodal"], help="graph kind (default from the checkpoint stage)")
    s.add_argument("--beam", type=int, default=5, help="beam size")
    s.add_argument("--max-len", type=int, help="maximum output length")
    s.add_argument("--provider", help="override the checkpoint's embedding provider")
    s.add_argument("-o", "--output", help="destination (default stdout)")

    s = sub.add_parser("eval-bleu", help="corpus BLEU of hypothesis vs reference files")
    s.add_argument("--hyp", required=True, help="hypotheses, one per line")
    s.add_argument("--ref", required=True, help="references, one per line")
    s.add_argument("--smoothing", choices=["none", "add_one"], default="none", help="n-gram precision smoothing")
    s.add_argument("-o", "--output", help="destination (default stdout)")

    s = sub.add_parser("gradcheck", help="finite-difference check of adapter gradients")
    s.add_argument("--dim", type=int, default=4, help="feature dimension")
    s.add_argument("--layers", type=int, default=2, help="GAT layers")
    s.add_argument("--heads", type=int, default=2, help="fusion attention heads")
    s.add_argument("--seq-len", type=int, default=3, help="encoder positions")
    s.add_argument("--seed", type=int, default=7, help="parameter/data seed")
    return p


COMMANDS = {
    "parse-isg": lambda a: cmd_parse(a, Origin.ISG),
    "parse-tsg": lambda a: cmd_parse(a, Origin.TSG),
    "validate": cmd_validate,
    "build-msg": cmd_build_msg,
    "build-lsg": cmd_build_lsg,
    "embed": cmd_embed,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval-bleu": cmd_eval_bleu,
    "gradcheck": cmd_gradcheck,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc.message)
    except (FileNotFoundError, CheckpointError) as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc))
    except (NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (SceneGraphError, StageMismatchError, EmbeddingError, BleuError, ValueError) as exc:
        return _fail(EXIT_INVALID, "validation", str(exc))


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
