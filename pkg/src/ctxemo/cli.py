"""Command-line entry point: ``ctxemo {stats,post-train,train,ensemble,predict,evaluate}``.

Settings resolve as built-in defaults < ``--config`` JSON file < explicit flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .corpus import EVALUATED_LABELS, Corpus, corpus_stats, load_corpus, merge_corpora
from .encoder import PRESETS, EncoderConfig, preset
from .errors import CtxemoError
from .evaluation import evaluate, format_table, parse_label
from .tokenizer import TokenVocabulary, build_vocab, load_vocab
from .training import (
    EXCLUDED_FALLBACK,
    EnsembleModel,
    Model,
    TrainConfig,
    ensemble_predict,
    post_train,
    predict_dialogue,
    train,
    train_kfold_ensemble,
)
from .checkpoint import load_archive, save_archive

log = logging.getLogger("ctxemo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def bundled(name: str) -> Path:
    return Path(str(resources.files("ctxemo") / "data" / name))


@dataclass
class RunConfig:
    train: list = field(default_factory=lambda: [str(bundled("fixture.json"))])
    val: str | None = None
    corpus: str | None = None
    vocab: str | None = None
    out: str = "ctxemo-out"
    init: str | None = None
    preset: str = "toy"
    n_layers: int | None = None
    n_heads: int | None = None
    d_model: int | None = None
    d_ff: int | None = None
    max_len: int = 512
    seed: int = 0
    pooling: str = "max"
    evaluated_classes: list = field(default_factory=lambda: ["Neutral", "Joy", "Sadness", "Anger"])
    epochs: int = 10
    batch_size: int = 1
    eta_max: float = 2e-5
    eta_min: float = 0.0
    clip_norm: float = 1.0
    encoder_dropout: float = 0.1
    classifier_dropout: float = 0.1
    class_weighting: bool = True
    scheduler_granularity: str = "step"
    post_train_steps: int = 0
    post_train_lr: float = 2e-3
    post_train_batch: int = 8
    mask_rate: float = 0.15
    k: int = 5
    jobs: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size_dialogues=self.batch_size, eta_max=self.eta_max,
            eta_min=self.eta_min, clip_norm=self.clip_norm, seed=self.seed, pooling_mode=self.pooling,
            max_len=self.max_len, encoder_dropout=self.encoder_dropout,
            classifier_dropout=self.classifier_dropout, class_weighting=self.class_weighting,
            scheduler_granularity=self.scheduler_granularity, post_train_steps=self.post_train_steps,
            post_train_lr=self.post_train_lr, post_train_batch=self.post_train_batch, mask_rate=self.mask_rate,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        overrides = {k: getattr(self, k) for k in ("n_layers", "n_heads", "d_model", "d_ff")
                     if getattr(self, k) is not None}
        overrides["max_positions"] = max(self.max_len, PRESETS[self.preset]["max_positions"])
        return preset(self.preset, vocab_size, **overrides)

    def evaluated(self):
        return frozenset(parse_label(c) for c in self.evaluated_classes)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


S = argparse.SUPPRESS


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--config", default=S, help="JSON file of RunConfig keys; flags override it")
    g.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    g.add_argument("--out", default=S, help="output path")
    g.add_argument("--max-len", dest="max_len", type=int, default=S, help="packed sequence limit (default 512)")
    g.add_argument("--pooling", choices=("max", "mean"), default=S, help="utterance pooling (default max)")
    g.add_argument("--evaluated-classes", dest="evaluated_classes", nargs="+", default=S,
                   help="labels scored by micro-F1 (default Neutral Joy Sadness Anger)")


def _model_flags(p):
    g = p.add_argument_group("encoder")
    g.add_argument("--preset", choices=sorted(PRESETS), default=S, help="encoder size preset (default toy)")
    g.add_argument("--n-layers", dest="n_layers", type=int, default=S)
    g.add_argument("--n-heads", dest="n_heads", type=int, default=S)
    g.add_argument("--d-model", dest="d_model", type=int, default=S)
    g.add_argument("--d-ff", dest="d_ff", type=int, default=S)
    g.add_argument("--encoder-dropout", dest="encoder_dropout", type=float, default=S)
    g.add_argument("--vocab", default=S, help="vocabulary file (default: built from the training corpora)")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--train", nargs="+", default=S, help="labeled training corpora, merged (default: bundled fixture)")
    g.add_argument("--val", default=S, help="labeled validation corpus")
    g.add_argument("--init", default=S, help="encoder checkpoint from post-train")
    g.add_argument("--epochs", type=int, default=S, help="default 10")
    g.add_argument("--batch-size", dest="batch_size", type=int, default=S, help="dialogues per step (default 1)")
    g.add_argument("--eta-max", dest="eta_max", type=float, default=S, help="peak learning rate (default 2e-5)")
    g.add_argument("--eta-min", dest="eta_min", type=float, default=S, help="final learning rate (default 0)")
    g.add_argument("--clip-norm", dest="clip_norm", type=float, default=S, help="global gradient norm cap (default 1.0)")
    g.add_argument("--classifier-dropout", dest="classifier_dropout", type=float, default=S)
    g.add_argument("--class-weighting", dest="class_weighting", type=_bool, default=S,
                   help="inverse-frequency loss weights (default true)")
    g.add_argument("--scheduler-granularity", dest="scheduler_granularity", choices=("step", "epoch"), default=S)


def _post_flags(p):
    g = p.add_argument_group("post-training")
    g.add_argument("--post-train-steps", dest="post_train_steps", type=int, default=S)
    g.add_argument("--post-train-lr", dest="post_train_lr", type=float, default=S, help="default 2e-3")
    g.add_argument("--post-train-batch", dest="post_train_batch", type=int, default=S, help="pairs per step (default 8)")
    g.add_argument("--mask-rate", dest="mask_rate", type=float, default=S, help="default 0.15")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxemo", description="Contextual emotion classification for dialogues.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="corpus statistics and label distribution")
    p.add_argument("corpus", nargs="?", default=None, help="labeled corpus JSON (default: bundled tiny fixture)")
    p.add_argument("--format", choices=("json", "table"), default="json")
    _common(p)

    p = sub.add_parser("post-train", help="MLM + NSP post-training of the encoder")
    p.add_argument("--corpus", dest="train", nargs="+", default=S, help="corpora to post-train on")
    _common(p)
    _model_flags(p)
    _post_flags(p)

    p = sub.add_parser("train", help="fine-tune encoder + classifier")
    _common(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("ensemble", help="k-fold ensemble training")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--k", type=int, default=S, help="number of folds / members (default 5)")
    p.add_argument("--jobs", type=int, default=S, help="members trained in parallel (default 1)")

    p = sub.add_parser("predict", help="label utterances with a model or ensemble")
    p.add_argument("model", help="model checkpoint file or ensemble directory")
    p.add_argument("corpus", help="corpus JSON; emotions, if present, are ignored")
    _common(p)

    p = sub.add_parser("evaluate", help="score predictions against gold labels")
    p.add_argument("predictions")
    p.add_argument("gold")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--literal-f1", dest="literal_f1", action="store_true",
                   help="use P*R/(P+R) instead of the harmonic mean")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CtxemoError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise CtxemoError(f"{config_path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
        unknown = set(data) - known
        if unknown:
            raise CtxemoError(f"{config_path}: unknown config keys {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
    for k, v in vars(args).items():
        if k in known:
            setattr(cfg, k, v)
    if isinstance(cfg.train, str):
        cfg.train = [cfg.train]
    return cfg


def _vocab_for(cfg: RunConfig, corpora) -> TokenVocabulary:
    return load_vocab(cfg.vocab) if cfg.vocab else build_vocab(corpora)


def _load_labeled(paths) -> Corpus:
    corpora = [load_corpus(p) for p in paths]
    return corpora[0] if len(corpora) == 1 else merge_corpora(corpora, "+".join(c.name for c in corpora))


def _model_meta(cfg: RunConfig, vocab: TokenVocabulary) -> dict:
    return {"vocab": list(vocab.tokens), "run_config": asdict(cfg)}


def cmd_stats(args, cfg: RunConfig) -> int:
    path = args.corpus or str(bundled("tiny.json"))
    stats = corpus_stats(load_corpus(path))
    if args.format == "json":
        print(json.dumps(stats.to_json(), indent=2))
    else:
        rows = [
            ("dialogues", f"{stats.n_dialogues}"),
            ("utterances", f"{stats.n_utterances}"),
            ("avg utterances / dialogue", f"{stats.avg_utterances_per_dialogue:.2f}"),
            ("avg dialogue length (words)", f"{stats.avg_dialogue_length:.2f}"),
        ]
        rows += [(lab.display, f"{100 * v:.1f}%") for lab, v in stats.label_fractions.items()]
        width = max(len(r[0]) for r in rows)
        print("\n".join(f"{k:<{width}}  {v}" for k, v in rows))
    return EXIT_OK


def cmd_post_train(args, cfg: RunConfig) -> int:
    corpora = [load_corpus(p) for p in cfg.train]
    vocab = _vocab_for(cfg, corpora)
    enc_cfg = cfg.encoder_config(len(vocab))
    tcfg = cfg.train_config()
    params, curve = post_train(corpora, vocab, tcfg, enc_cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"encoder_config": enc_cfg.to_dict(), **_model_meta(cfg, vocab)}
    save_archive(out / "encoder.npz", params, meta)
    with (out / "post_train_curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mlm_loss", "nsp_loss", "lr"])
        for row in curve:
            writer.writerow([row.step, repr(row.mlm_loss), repr(row.nsp_loss), repr(row.lr)])
    log.info("wrote %s", out)
    return EXIT_OK


def _init_tensors(cfg: RunConfig):
    if not cfg.init:
        return None, None
    tensors, meta = load_archive(cfg.init)
    vocab = TokenVocabulary(meta["vocab"]) if "vocab" in meta else None
    return {k: v for k, v in tensors.items() if k.startswith("encoder/")}, vocab


def _train_setup(cfg: RunConfig):
    train_corpus = _load_labeled(cfg.train)
    init, init_vocab = _init_tensors(cfg)
    vocab = init_vocab if init_vocab is not None and not cfg.vocab else _vocab_for(cfg, [train_corpus])
    return train_corpus, vocab, init


def cmd_train(args, cfg: RunConfig) -> int:
    train_corpus, vocab, init = _train_setup(cfg)
    val = load_corpus(cfg.val) if cfg.val else None
    model, history = train(train_corpus, val, vocab, cfg.train_config(), cfg.encoder_config(len(vocab)),
                           init, cfg.evaluated())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    opt = getattr(model, "optimizer_state", None)
    extra = {}
    if opt is not None:
        extra = {f"optimizer/m/{k}": v for k, v in opt.m.items()}
        extra.update({f"optimizer/v/{k}": v for k, v in opt.v.items()})
    meta = _model_meta(cfg, vocab)
    meta["optimizer_step"] = opt.step if opt is not None else 0
    model.save(out / "model.npz", extra, meta)
    (out / "train_log.json").write_text(json.dumps([h.to_dict() for h in history], indent=2))
    return EXIT_OK


def cmd_ensemble(args, cfg: RunConfig) -> int:
    if cfg.k < 2:
        raise CtxemoError(f"--k must be at least 2, got {cfg.k}")
    train_corpus, vocab, init = _train_setup(cfg)
    ensemble, histories = train_kfold_ensemble(
        train_corpus, vocab, cfg.train_config(), cfg.encoder_config(len(vocab)), cfg.k, init, cfg.jobs,
        evaluated_classes=cfg.evaluated(),
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _model_meta(cfg, vocab)
    members = []
    for i, (member, hist) in enumerate(zip(ensemble.members, histories)):
        name = f"member_{i}.npz"
        member.save(out / name, extra_meta=meta)
        members.append({"checkpoint": name, "validation_dialogues": ensemble.fold_assignments[i],
                        "train_log": [h.to_dict() for h in hist]})
    manifest = {
        "k": ensemble.k,
        "seed": cfg.seed,
        "tie_break": ensemble.tie_break,
        "class_frequency": {c.display: n for c, n in ensemble.class_frequency.items()},
        "members": members,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return EXIT_OK


def load_predictor(path):
    """Returns ``(model_or_ensemble, vocab)`` for a checkpoint file or ensemble directory."""
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        members = [Model.load(path / m["checkpoint"]) for m in manifest["members"]]
        _, meta = load_archive(path / manifest["members"][0]["checkpoint"])
        freq = {parse_label(k): v for k, v in manifest.get("class_frequency", {}).items()}
        model = EnsembleModel(members, manifest["k"], freq, manifest.get("tie_break", ""),
                              [m["validation_dialogues"] for m in manifest["members"]])
    else:
        if not path.exists():
            raise FileNotFoundError(path)
        model = Model.load(path)
        _, meta = load_archive(path)
    return model, TokenVocabulary(meta["vocab"])


def cmd_predict(args, cfg: RunConfig) -> int:
    model, vocab = load_predictor(args.model)
    if "max_len" in vars(args):
        for m in getattr(model, "members", [model]):
            m.max_len = cfg.max_len
    corpus = load_corpus(args.corpus, format="unlabeled")
    records = []
    for dia in corpus:
        if isinstance(model, EnsembleModel):
            preds = ensemble_predict(model, dia, vocab)
        else:
            preds = predict_dialogue(model, dia, vocab)
        recs = []
        for utt, p in zip(dia.utterances, preds):
            rec = {"speaker": utt.speaker, "utterance": utt.text, "predicted_emotion": p.label.display}
            if p.flags:
                rec["flags"] = list(p.flags)
            recs.append(rec)
        records.append(recs)
    text = json.dumps(records, indent=1, ensure_ascii=False)
    if "out" in vars(args):
        Path(cfg.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    n_fallback = sum(1 for d in records for r in d if EXCLUDED_FALLBACK in r.get("flags", ()))
    if n_fallback:
        log.warning("%d utterance(s) did not fit max_len and got the fallback label", n_fallback)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    gold = load_corpus(args.gold)
    report = evaluate(args.predictions, gold, cfg.evaluated(), args.literal_f1)
    text = json.dumps(report.to_json(), indent=2)
    if "out" in vars(args):
        Path(cfg.out).write_text(text)
        print(format_table(report, Path(args.predictions).stem))
    elif args.format == "table":
        print(format_table(report, Path(args.predictions).stem))
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "post-train": cmd_post_train,
    "train": cmd_train,
    "ensemble": cmd_ensemble,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"ctxemo: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except CtxemoError as exc:
        print(f"ctxemo: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"ctxemo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
