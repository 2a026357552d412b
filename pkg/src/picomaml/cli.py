"""Command-line entry point: pretrain, finetune, eval, sweep, gen-data, analyze.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
Errors print one ``picomaml: error: <kind>: <reason>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig, load_config, parse_config
from .data import (LEXICONS, Vocab, gen_synthetic_corpus, gen_synthetic_ner, load_pretokenized, pretraining_text,
                   read_conll, write_conll, write_pretokenized)
from .errors import NumericError, PicoError
from .finetune import (FinetuneConfig, NerDataset, evaluate_model, finetune_run, load_tagger, sweep_checkpoints,
                       tagger_from_checkpoint)
from .trainer import HybridTrainer, load_checkpoint, stream

log = logging.getLogger("picomaml")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(args, default: str) -> Path:
    out = args.out or os.environ.get("PICOMAML_OUT") or default
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(obj) -> None:
    print(obj if isinstance(obj, (str, int, float)) else json.dumps(obj))


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else parse_config({})


def _datasets(items: list[str]) -> dict[str, list]:
    """``ID=PATH`` or ``PATH`` (id = file stem) -> sentences."""
    out = {}
    for item in items:
        ds_id, _, path = item.rpartition("=")
        out[ds_id or Path(path).stem] = read_conll(path)
    return out


# ---------------------------------------------------------------------------


def build_corpus(cfg: RunConfig):
    d = cfg.data
    if d.corpus:
        if not d.vocab:
            raise PicoError("data.vocab is required with data.corpus")
        vocab = Vocab.load(d.vocab)
        return load_pretokenized(d.corpus, vocab_size=len(vocab)), vocab
    syn = d.synthetic
    rng = stream(syn["seed"], 0)
    text = pretraining_text(syn["text_sentences"], rng) if syn["text_sentences"] and syn["text_fraction"] else None
    return gen_synthetic_corpus(syn["vocab_size"], syn["n_sequences"], syn["seq_len"], rng, text=text,
                                text_fraction=syn["text_fraction"] if text else 0.0)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    corpus, vocab = build_corpus(cfg)
    train, heldout = corpus.split(cfg.data.heldout_fraction) if cfg.data.heldout_fraction else (corpus, None)
    model_cfg = cfg.model_config(len(vocab))
    out = _out_dir(args, f"runs/pretrain_seed{cfg.train.seed}")
    resume = load_checkpoint(args.resume) if args.resume else None
    resolved = cfg.to_dict()
    resolved["model"] = model_cfg.to_dict()
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=1))
    (out / "seed").write_text(f"{cfg.train.seed}\n")
    vocab.save(out / "vocab.json")
    trainer = HybridTrainer(train, model_cfg, cfg.train, cfg.meta, heldout=heldout, vocab=vocab, out_dir=out,
                            world_size=args.world_size, resume=resume, stop_step=args.stop_at)
    result = trainer.run()
    last = result.metrics[-1] if result.metrics else {}
    _emit({"out": str(out), "steps": result.step, "checkpoints": len(result.checkpoints),
           "heldout_loss": last.get("heldout_loss"), "ln_vocab": math.log(len(vocab))})
    return 0


def _finetune_config(args) -> FinetuneConfig:
    ft = _config(args).finetune
    if getattr(args, "regime", None):
        ft.regime = "head_only" if args.regime == "head" else args.regime
    if getattr(args, "lr", None):
        ft.lr = args.lr
    if getattr(args, "seed", None) is not None:
        ft.seed = args.seed
    return ft


def cmd_finetune(args) -> int:
    ft = _finetune_config(args)
    dataset = NerDataset(args.source or Path(args.data).stem, read_conll(args.data),
                         read_conll(args.dev) if args.dev else None)
    evals = _datasets(args.eval or [])
    vocab = Vocab.load(args.vocab) if args.vocab else None
    tagger = tagger_from_checkpoint(args.checkpoint, vocab, stream(ft.seed, 1))
    tagger, report = finetune_run(tagger, dataset, ft, evals)
    out = _out_dir(args, "runs/finetune")
    tagger.save_head(out / "tuned.npz", {"regime": ft.regime})
    (out / "report.json").write_text(report.to_json())
    _emit({"out": str(out), "epochs": report.epochs, "best_epoch": report.best_epoch,
           "dev_f1": max(report.dev_history) if report.dev_history else None,
           **{k: v["micro"]["f1"] for k, v in report.datasets.items()}})
    return 0


def cmd_eval(args) -> int:
    tagger = load_tagger(args.checkpoint)
    report = evaluate_model(tagger, _datasets(args.data), args.scoring)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    _emit(report.datasets)
    return 0


def cmd_sweep(args) -> int:
    ft = _finetune_config(args)
    dataset = NerDataset(args.source or Path(args.data).stem, read_conll(args.data))
    out = _out_dir(args, "runs/sweep")
    rows = sweep_checkpoints(args.checkpoints, dataset, ft, _datasets(args.eval), out / "sweep.csv",
                             out / "tuned", workers=args.workers)
    _emit({"out": str(out), "rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)})
    return 0


def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "corpus":
        out = _out_dir(args, "data/corpus")
        text = pretraining_text(args.text_sentences, rng) if args.text_fraction > 0 else None
        corpus, vocab = gen_synthetic_corpus(args.vocab_size, args.n_sequences, args.seq_len, rng, text=text,
                                             text_fraction=args.text_fraction)
        write_pretokenized(out / "corpus.jsonl", corpus)
        vocab.save(out / "vocab.json")
        _emit({"corpus": str(out / "corpus.jsonl"), "vocab": str(out / "vocab.json"), "sequences": len(corpus)})
    else:
        out = Path(args.out or os.environ.get("PICOMAML_OUT") or "data/ner.conll")
        if out.suffix == "" or out.is_dir():
            out.mkdir(parents=True, exist_ok=True)
            out = out / f"{args.lexicon}.conll"
        out.parent.mkdir(parents=True, exist_ok=True)
        sents = gen_synthetic_ner(args.n, args.particle_rate, rng, args.lexicon)
        write_conll(out, sents)
        _emit({"path": str(out), "sentences": len(sents)})
    return 0


def cmd_analyze(args) -> int:
    m = args.metric
    if m in ("t90", "auc", "slope"):
        curve = analysis.read_curve(args.curve, args.key)
        if m == "t90":
            _emit(analysis.t90(curve))
        elif m == "auc":
            _emit(analysis.normalized_auc(curve))
        else:
            _emit(analysis.initial_slope(curve, args.k))
    elif m == "particle-recall":
        particles = args.particles.split(",") if args.particles else analysis.DEFAULT_PARTICLES
        _emit({"particle_recall": analysis.particle_recall(read_conll(args.data), particles),
               "particles": sorted(particles)})
    elif m == "oov":
        _emit({"oov_rate": analysis.oov_rate(read_conll(args.data), Vocab.load(args.vocab)), "vocab": args.vocab})
    elif m == "per":
        ck = load_checkpoint(args.checkpoint)
        names = [args.matrix] if args.matrix else [k for k in ck.params if ck.params[k].ndim == 2]
        _emit({k: analysis.effective_rank_proportional(ck.params[k]) for k in names})
    elif m == "confidence":
        series = analysis.token_confidence_series(args.sweep, read_conll(args.data), args.top_n,
                                                  args.checkpoints)
        rows = analysis.confidence_rows(series)
        if args.out:
            analysis.export_report(rows, args.out, columns=("word", "checkpoint_step", "split", "confidence"))
        _emit({"rows": len(rows), "out": args.out})
    elif m == "delta":
        a, b = load_tagger(args.a), load_tagger(args.b)
        rows = []
        for i, sent in enumerate(read_conll(args.data)):
            for j, d in enumerate(analysis.delta_logprob(a, b, sent)):
                rows.append({"sentence": i, "position": j, "word": sent.words[j], "gold": sent.tags[j],
                             "delta": float(d)})
        if args.out:
            analysis.export_report(rows, args.out)
        _emit({"tokens": len(rows), "mean_delta": float(np.mean([r["delta"] for r in rows])) if rows else None})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="picomaml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="hybrid AR / meta-learning pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--world-size", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--stop-at", type=int, help="stop after this many steps (schedule unchanged)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="attach a CRF head and finetune on CoNLL data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--dev")
    s.add_argument("--source", help="dataset id recorded for the training data")
    s.add_argument("--regime", choices=("head", "full"), default="head")
    s.add_argument("--eval", nargs="*", help="ID=PATH evaluation sets")
    s.add_argument("--vocab")
    s.add_argument("--config")
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a tuned tagger")
    s.add_argument("--checkpoint", required=True, help="tuned head file written by finetune or sweep")
    s.add_argument("--data", required=True, nargs="+")
    s.add_argument("--scoring", choices=("span", "token"), default="span")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="finetune and evaluate every checkpoint of a run")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--eval", required=True, nargs="+")
    s.add_argument("--source")
    s.add_argument("--regime", choices=("head", "full"), default="head")
    s.add_argument("--workers", type=int)
    s.add_argument("--config")
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gen-data", help="write synthetic corpora or NER files")
    s.add_argument("kind", choices=("corpus", "ner"))
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab-size", type=int, default=512)
    s.add_argument("--n-sequences", type=int, default=4000)
    s.add_argument("--seq-len", type=int, default=33)
    s.add_argument("--text-fraction", type=float, default=0.5)
    s.add_argument("--text-sentences", type=int, default=4000)
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--particle-rate", type=float, default=1.0)
    s.add_argument("--lexicon", choices=sorted(LEXICONS), default="source")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("analyze", help="metrics over curves, datasets and checkpoints")
    s.add_argument("metric", choices=("t90", "auc", "slope", "particle-recall", "oov", "per", "confidence", "delta"))
    s.add_argument("--curve", help="metrics.jsonl")
    s.add_argument("--key", help="metric field (default: heldout_loss, else train_loss)")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--data")
    s.add_argument("--particles", help="comma-separated particle set")
    s.add_argument("--vocab")
    s.add_argument("--checkpoint")
    s.add_argument("--checkpoints", help="backbone checkpoint directory for confidence")
    s.add_argument("--matrix")
    s.add_argument("--sweep")
    s.add_argument("--top-n", type=int, default=10)
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--out")
    s.set_defaults(func=cmd_analyze)
    return p


_REQUIRED = {"t90": ("curve",), "auc": ("curve",), "slope": ("curve",), "particle-recall": ("data",),
             "oov": ("data", "vocab"), "per": ("checkpoint",), "confidence": ("sweep", "data"),
             "delta": ("a", "b", "data")}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"picomaml: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PICOMAML_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "analyze":
            missing = [f"--{a}" for a in _REQUIRED[args.metric] if getattr(args, a) is None]
            if missing:
                parser.error(f"analyze {args.metric} requires {', '.join(missing)}")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except NumericError as exc:
        return _fail(type(exc).__name__, exc, 3)
    except (PicoError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 2)


if __name__ == "__main__":
    sys.exit(main())
