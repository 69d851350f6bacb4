"""Command-line entry points: train, eval, trace and gradcheck.

Configuration is a flat JSON object whose keys are the run fields below plus
every ``ModelConfig`` and ``TrainConfig`` field. Precedence is defaults, then
``--config`` file, then explicit flags, then ``--set KEY=VALUE`` pairs.
JSON results go to stdout and logs to stderr.

Dataset and lexicon paths may be given as ``@toy`` and ``@toy-antonyms`` to use
the bundled 64-pair corpus and its antonym list.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .data import (Batch, CheckpointError, DatasetError, EncodingError, Featurizer, PairExample,
                   batch_pad, check_encoding_coverage, load_checkpoint,
                   load_precomputed_encodings, make_batch, parse_dataset, save_checkpoint,
                   tokenize)
from .embedding import Vocab, build_vocab, load_antonyms, load_glove
from .heads import labels_for
from .models import ModelConfig, build_model, packed_tokens
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, train_loop

log = logging.getLogger("rereadnet")

TOY_ALIASES = {"@toy": "toy_nli.jsonl", "@toy-antonyms": "toy_antonyms.tsv"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"n_classes"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


def resolve_path(path: str | None) -> str | None:
    if path in TOY_ALIASES:
        return str(resources.files("rereadnet") / "resources" / TOY_ALIASES[path])
    return path


@dataclass
class RunConfig:
    task: str = "nli"
    train: str | None = None
    val: str | None = None
    test: str | None = None
    embeddings: str | None = None
    encodings: str | None = None
    antonyms: str | None = None
    checkpoint: str | None = None
    out_dir: str = "run"
    seed: int = 0
    seeds: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_flat(cls, values: dict) -> RunConfig:
        run_keys = {f.name for f in fields(cls)} - {"model", "training"}
        unknown = set(values) - run_keys - _MODEL_KEYS - _TRAIN_KEYS - {"model"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        run = {k: v for k, v in values.items() if k in run_keys}
        if run.get("task", "nli") not in ("nli", "pi"):
            raise ValueError(f"unknown task {run['task']!r}")
        n_classes = len(labels_for(run.get("task", "nli")))
        model = ModelConfig.from_dict({**{k: v for k, v in values.items() if k in _MODEL_KEYS},
                                       "n_classes": n_classes})
        if model.model not in ("drrnet", "ladranet"):
            raise ValueError(f"unknown model {model.model!r}")
        training = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS},
                               seed=int(run.get("seed", 0)))
        return cls(**run, model=model, training=training)

    def to_flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("model", "training")}
        out.update(self.model.to_dict())
        out.pop("n_classes")
        out.update({k: v for k, v in asdict(self.training).items() if k != "seed"})
        return out


def _parse_set(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values = RunConfig().to_flat()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    for key in ("model", "task", "train", "val", "test", "embeddings", "encodings", "antonyms",
                "checkpoint", "out_dir", "seed", "seeds"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    values.update(_parse_set(getattr(args, "set", None) or []))
    return RunConfig.from_flat(values)


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise ValueError(f"no {what} path given")
    resolved = resolve_path(path)
    if not Path(resolved).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return resolved


def _load_split(path: str | None, what: str, task: str) -> list[PairExample]:
    return parse_dataset(_require_file(path, what), task=task)


def _encodings(cfg: RunConfig, examples: Sequence[PairExample]):
    if cfg.model.encoder != "precomputed":
        return None
    enc = load_precomputed_encodings(_require_file(cfg.encodings, "encodings"), cfg.model.d_enc,
                                     cfg.model.n_enc_layers)
    check_encoding_coverage(examples, enc)
    return enc


def _antonyms(cfg: RunConfig) -> dict[str, set[str]]:
    return load_antonyms(_require_file(cfg.antonyms, "antonyms")) if cfg.antonyms else {}


def run_train(cfg: RunConfig) -> dict:
    """Train ``cfg.seeds`` models from consecutive seeds; keep the best by validation loss.

    Writes ``config.json`` (the resolved configuration), one metrics JSONL per
    seed and the winning checkpoint; returns a JSON-ready summary.
    """
    labels = labels_for(cfg.task)
    train = _load_split(cfg.train, "train", cfg.task)
    val = _load_split(cfg.val, "val", cfg.task)
    glove = load_glove(_require_file(cfg.embeddings, "embeddings")) if cfg.embeddings else None
    if glove is not None:
        cfg.model.word_dim = glove.dim
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out_dir / "model.ckpt"
    cfg.checkpoint = str(ckpt_path)
    encodings = _encodings(cfg, [*train, *val])
    if encodings is not None and cfg.model.d_enc is None:
        cfg.model.d_enc = next(iter(encodings.values())).cls.shape[0]
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_flat(), fh, indent=2, sort_keys=True)

    sentences = [s for ex in train for s in (ex.tokens_a, ex.tokens_b)]
    char_vocab = Featurizer.char_vocab_from(train)
    runs = []
    best = None
    for seed in range(cfg.seed, cfg.seed + cfg.seeds):
        vocab, table = build_vocab(sentences, glove, np.random.default_rng([seed, 1]),
                                   cfg.model.word_dim)
        featurizer = Featurizer(vocab, char_vocab, _antonyms(cfg))
        model = build_model(cfg.model, table, len(char_vocab), seed)
        tcfg = TrainConfig(**{**asdict(cfg.training), "seed": seed})
        log.info("seed %d: %d parameters", seed, model.num_parameters())
        result = train_loop(model, train, val, featurizer, labels, tcfg,
                            out_dir / f"metrics_seed{seed}.jsonl", encodings)
        summary = {"seed": seed, "best_val_loss": result.best_val_loss,
                   "best_step": result.best_step, "steps": result.steps,
                   "epochs": result.epochs, "stopped_early": result.stopped_early}
        runs.append(summary)
        if best is None or result.best_val_loss < best[0]:
            best = (result.best_val_loss, seed)
            meta = {"vocab": vocab.itos, "chars": char_vocab.itos, "labels": list(labels)}
            save_checkpoint(ckpt_path, result.best_state, cfg.to_flat(), seed, meta)
    return {"runs": runs, "best_seed": best[1], "best_val_loss": best[0],
            "checkpoint": str(ckpt_path)}


@dataclass
class Restored:
    model: object
    featurizer: Featurizer
    config: RunConfig
    labels: tuple[str, ...]


def restore(path: str, task: str | None = None, overrides: dict | None = None) -> Restored:
    """Rebuild the model, featurizer and run config stored in a checkpoint."""
    ckpt = load_checkpoint(_require_file(path, "checkpoint"), task)
    cfg = RunConfig.from_flat({**ckpt.config, **(overrides or {})})
    vocab, chars = Vocab(ckpt.meta["vocab"]), Vocab(ckpt.meta["chars"])
    table = None
    if cfg.model.model == "drrnet" or cfg.model.encoder == "internal":
        table = Tensor(np.zeros((len(vocab), cfg.model.word_dim)))
    model = build_model(cfg.model, table, len(chars), ckpt.seed)
    model.load_state_dict(ckpt.params)
    return Restored(model, Featurizer(vocab, chars, _antonyms(cfg)), cfg,
                    tuple(ckpt.meta.get("labels", labels_for(cfg.task))))


def run_eval(checkpoint: str, data: str | None = None, task: str | None = None,
             overrides: dict | None = None) -> dict:
    """Accuracy, macro-F1 and per-class counts of a checkpoint on one split."""
    r = restore(checkpoint, task, overrides)
    split = data or r.config.test or r.config.val
    examples = _load_split(split, "evaluation data", r.config.task)
    encodings = _encodings(r.config, examples)
    batches = batch_pad(examples, r.config.training.batch_size, r.featurizer, r.labels,
                        encodings=encodings)
    return evaluate(r.model, batches, r.labels)


def _trace_records(model_kind: str, out, batch: Batch, labels) -> list[dict]:
    ex = batch.examples[0]
    records = []
    if model_kind == "drrnet":
        for name, tokens, state in (("a", ex.tokens_a, out.extras["reread_a"]),
                                    ("b", ex.tokens_b, out.extras["reread_b"])):
            for st in state.trace():
                records.append({"sentence": name, "step": st.step, "token": tokens[st.index],
                                "index": st.index, "weight": st.weight, "soft": st.soft})
    else:
        tokens = packed_tokens(ex.tokens_a, ex.tokens_b)
        dsa = out.extras["dsa"]
        for t, steps in enumerate(dsa.trace()):
            for r, st in enumerate(steps):
                rec = {"step": st.step, "granularity": r, "index": st.index,
                       "token": tokens[st.index] if st.index < len(tokens) else None,
                       "weight": st.weight, "soft": st.soft}
                if dsa.coverage:
                    rec["coverage"] = dsa.coverage[t][r][0].tolist()
                records.append(rec)
    probs = out.probs.data[0]
    records.append({"predicted": labels[int(np.argmax(probs))], "probs": probs.tolist()})
    return records


def run_trace(checkpoint: str, sentence_a: str, sentence_b: str, pair_id: str | None = None,
              overrides: dict | None = None) -> list[dict]:
    """Per-step selections for one pair, then the predicted label, as JSON-ready records."""
    ta, tb = tokenize(sentence_a), tokenize(sentence_b)
    if not ta or not tb:
        raise ValueError("cannot trace an empty sentence")
    r = restore(checkpoint, overrides=overrides)
    ex = PairExample(ta, tb, r.labels[0], pair_id=pair_id)
    batch = make_batch([ex], r.featurizer, None, encodings=_encodings(r.config, [ex]))
    with no_grad():
        out = r.model(batch)
    return _trace_records(r.config.model.model, out, batch, r.labels)


def run_gradcheck(seed: int = 0, threshold: float = gradcheck.THRESHOLD) -> dict:
    report = gradcheck.run_gradcheck(seed)
    worst = max(v["error"] for v in report.values())
    return {"ops": {k: v["error"] for k, v in report.items()}, "n_ops": len(report),
            "worst": worst, "threshold": threshold, "passed": bool(worst < threshold)}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (value parsed as JSON when possible)")
    p.add_argument("--checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rereadnet",
                                     description="Re-reading sentence-pair matching models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train and checkpoint the best of --seeds runs")
    _add_common(tr)
    tr.add_argument("--model", choices=("drrnet", "ladranet"))
    tr.add_argument("--task", choices=("nli", "pi"))
    for name in ("train", "val", "test", "embeddings", "encodings", "antonyms"):
        tr.add_argument(f"--{name}")
    tr.add_argument("--out-dir", dest="out_dir")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--seeds", type=int)

    ev = sub.add_parser("eval", help="print metrics of a checkpoint as JSON")
    _add_common(ev)
    ev.add_argument("--data", help="split to evaluate (defaults to the run's test, then val)")
    ev.add_argument("--task", choices=("nli", "pi"))

    tc = sub.add_parser("trace", help="print re-read selections as JSON lines")
    _add_common(tc)
    tc.add_argument("--a", required=True, help="first sentence")
    tc.add_argument("--b", required=True, help="second sentence")
    tc.add_argument("--pair-id", dest="pair_id")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and model")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    values.update(_parse_set(args.set or []))
    return values


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            result = run_train(load_run_config(args))
        elif args.command == "eval":
            result = run_eval(args.checkpoint, args.data, args.task, _overrides(args))
        elif args.command == "trace":
            for rec in run_trace(args.checkpoint, args.a, args.b, args.pair_id,
                                 _overrides(args)):
                print(json.dumps(rec))
            return 0
        else:
            result = run_gradcheck(args.seed)
            for name, err in result["ops"].items():
                print(f"{name:24s} {err:.3e}", file=sys.stderr)
            print(json.dumps(result))
            return 0 if result["passed"] else 1
    except (OSError, ValueError, KeyError, CheckpointError, DatasetError, EncodingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result))
    return 0
