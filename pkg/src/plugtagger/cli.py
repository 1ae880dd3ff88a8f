"""Command-line entry point.

Every subcommand takes explicit paths, accepts ``--config FILE`` with
``key = value`` lines (keys are the long option names, dashes or
underscores), and lets command-line flags override the file.  Commands that
write an artifact also write ``<artifact>.manifest.json`` beside it.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .errors import DataError, PlugTaggerError, UsageError

log = logging.getLogger("plugtagger")

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r} for {parser.prog}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() not in _BOOL:
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
            defaults[key] = _BOOL[value.lower()]
        else:
            defaults[key] = value  # argparse applies ``type`` to string defaults
    parser.set_defaults(**defaults)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(artifact, args, inputs: dict, outputs: dict, started: float, seeds: dict | None = None) -> Path:
    from .util import atomic_write_text

    snapshot = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "config": snapshot,
        "seeds": seeds or ({"seed": args.seed} if hasattr(args, "seed") else {}),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": version_string(),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    path = Path(str(artifact) + ".manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _kv_paths(items, what: str) -> dict[str, Path]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"{what} must look like TASK=PATH, got {item!r}")
        task, path = item.split("=", 1)
        out[task] = Path(path)
    return out


def _read_sentences(path, fmt: str):
    from .data import TaggedSentence, parse_conll

    if fmt == "conll":
        return [TaggedSentence(s.tokens, ("O",) * len(s)) for s in parse_conll(path, normalize="none")]
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [TaggedSentence(tuple(l.split()), ("O",) * len(l.split())) for l in lines if l.split()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import TASKS, gen_corpus, gen_synthetic_tasks, write_conll
    from .util import atomic_write_text

    started = time.perf_counter()
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if len(sizes) != 3:
        raise UsageError("--sizes needs three comma-separated counts (train,dev,test)")
    tasks = gen_synthetic_tasks(args.seed, sizes)
    out = Path(args.out_dir)
    outputs = {}
    for task in TASKS:
        for split in ("train", "dev", "test"):
            path = out / f"{task}.{split}.conll"
            write_conll(path, getattr(tasks[task], split))
            outputs[f"{task}.{split}"] = path
    held = [s.tokens for t in tasks.values() for s in t.dev + t.test]
    corpus = gen_corpus(args.seed + 1, args.corpus_size, exclude=held)
    corpus_path = out / "corpus.txt"
    atomic_write_text(corpus_path, "".join(" ".join(s) + "\n" for s in corpus))
    outputs["corpus"] = corpus_path
    write_manifest(corpus_path, args, {}, outputs, started)
    print(f"wrote {len(outputs)} files to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .data import build_vocab, parse_conll
    from .model import ModelConfig, pretrain_mlm, save_model

    started = time.perf_counter()
    corpus = [s.tokens for s in _read_sentences(args.corpus, "text")]
    if not corpus:
        raise DataError(f"corpus {args.corpus} has no sentences")
    extra = [s.tokens for p in args.vocab_extra or () for s in parse_conll(p, normalize="none")]
    vocab = build_vocab(corpus + extra, args.min_freq)
    config = ModelConfig(vocab_size=len(vocab), hidden=args.hidden, layers=args.layers, heads=args.heads,
                         max_len=args.max_len, ffn_dim=args.ffn_dim, seed=args.seed)
    weights, report = pretrain_mlm([vocab.encode(s) for s in corpus], config, args.steps, batch_size=args.batch_size,
                                   lr=args.lr, warmup_steps=args.warmup, seed=args.seed, log_every=args.log_every)
    save_model(args.out, weights, vocab.tokens)
    write_manifest(args.out, args, {"corpus": args.corpus}, {"model": args.out}, started)
    print(f"model {weights.content_hash():016x} vocab {len(vocab)} params {weights.param_count()}")
    print(f"masked perplexity {report.masked_perplexity:.3f} masked accuracy {report.masked_accuracy:.4f}")
    return 0


def _load_tagged(path, tag_col: int, vocab):
    from .data import parse_conll

    return vocab.attach(parse_conll(path, tag_col=tag_col))


def cmd_select(args) -> int:
    from .data import Vocab
    from .labelwords import FilterConfig, export_label_map, punctuation_ids, select_label_words
    from .model import load_model
    from .util import atomic_write_text

    started = time.perf_counter()
    weights, tokens = load_model(args.model)
    vocab = Vocab(tokens)
    train = _load_tagged(args.train, args.tag_col, vocab)
    labels = sorted({t for s in train for t in s.tags})
    stop = frozenset(vocab.id(w) for w in (args.stopwords or "").split(",") if w)
    fc = FilterConfig(punctuation=punctuation_ids(tokens), stopwords=stop, use_generic=not args.no_generic_filter)
    label_map, tables = select_label_words(train, labels, weights, args.k, fc, shared_bi=args.decode == "greedy",
                                           return_tables=True)
    atomic_write_text(Path(args.out), export_label_map(label_map, tokens))
    write_manifest(args.out, args, {"model": args.model, "train": args.train}, {"map": args.out}, started)
    for label in sorted(tables):
        top = ", ".join(f"{tokens[w]}:{c}" for w, c in sorted(tables[label].items(), key=lambda x: (-x[1], x[0]))[:5])
        print(f"{label}\t{tokens[label_map.entries[label]]}\t{top}")
    return 0


def _read_map(path, decode: str | None = None):
    from .labelwords import parse_label_map

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    return parse_label_map(text, shared_bi=decode == "greedy")


def cmd_train(args) -> int:
    from .data import Vocab
    from .model import load_model
    from .plugin import save_plugin
    from .training import TrainConfig, train_plugin
    from .util import atomic_write_text

    started = time.perf_counter()
    weights, tokens = load_model(args.model)
    vocab = Vocab(tokens)
    train = _load_tagged(args.train, args.tag_col, vocab)
    dev = _load_tagged(args.dev, args.tag_col, vocab) if args.dev else None
    label_map = _read_map(args.map, args.decode)
    config = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, max_len=args.max_len,
                         weight_decay=args.weight_decay, clip_norm=args.clip_norm, seed=args.seed)
    history = []
    pack = train_plugin(train, weights, label_map, config, args.mode, args.lp, dev=dev, task=args.task,
                        history=history, on_epoch=lambda s: print(s.line(), flush=True))
    save_plugin(pack, args.out)
    outputs = {"plugin": args.out}
    if args.metrics:
        atomic_write_text(Path(args.metrics), "epoch\tloss\tdev_metric\tseconds\n" + "".join(s.line() + "\n" for s in history))
        outputs["metrics"] = args.metrics
    write_manifest(args.out, args, {"model": args.model, "train": args.train, "dev": args.dev, "map": args.map}, outputs, started)
    return 0


def _check_decode(label_map, decode: str | None) -> None:
    if decode is None:
        return
    if (decode == "greedy") != label_map.shared_bi:
        raise UsageError(f"--decode {decode} does not match the plugin's label map")


def cmd_tag(args) -> int:
    from .data import TaggedSentence, Vocab, write_conll
    from .model import load_model
    from .plugin import load_plugin
    from .training import tag_dataset

    started = time.perf_counter()
    weights, tokens = load_model(args.model)
    vocab = Vocab(tokens)
    pack = load_plugin(args.plugin, weights)
    _check_decode(pack.label_map, args.decode)
    if (args.text is None) == (args.input is None):
        raise UsageError("give exactly one of --text or --input")
    if args.text is not None:
        words = tuple(args.text.split())
        sents = [TaggedSentence(words, ("O",) * len(words))]
    else:
        sents = _read_sentences(args.input, args.input_format)
    sents = vocab.attach(sents)
    tags = tag_dataset(weights, pack, sents)
    tagged = [TaggedSentence(s.tokens, tuple(t)) for s, t in zip(sents, tags)]
    if args.out:
        write_conll(args.out, tagged)
        write_manifest(args.out, args, {"model": args.model, "plugin": args.plugin, "input": args.input}, {"tags": args.out}, started)
    else:
        for s in tagged:
            print(" / ".join(f"{w} {t}" for w, t in zip(s.tokens, s.tags)))
    return 0


def cmd_eval(args) -> int:
    from .data import parse_conll, span_f1, token_accuracy
    from .labelwords import BIO2, infer_schema

    pred = parse_conll(args.pred, tag_col=args.tag_col)
    gold = parse_conll(args.gold, tag_col=args.tag_col)
    if len(pred) != len(gold) or any(p.tokens != g.tokens for p, g in zip(pred, gold)):
        raise DataError("prediction and gold files do not contain the same sentences")
    ptags = [list(s.tags) for s in pred]
    gtags = [list(s.tags) for s in gold]
    metric = args.metric
    if metric == "auto":
        metric = "f1" if infer_schema({t for g in gtags for t in g} | {"O"}) == BIO2 else "acc"
    if metric == "f1":
        p, r, f = span_f1(ptags, gtags)
        print(f"precision {p:.4f}\nrecall {r:.4f}\nF1 {f:.4f}")
    else:
        print(f"accuracy {token_accuracy(ptags, gtags):.4f}")
    return 0


def cmd_bench(args) -> int:
    from .data import Vocab
    from .model import load_model
    from .plugin import load_plugin
    from .registry import ModelSwitcher, PluginSwitcher, Registry, build_stream, ratio_csv, ratio_slope, run_stream, speed_ratio
    from .util import atomic_write_text

    started = time.perf_counter()
    plugins = _kv_paths(args.plugin, "--plugin")
    data_paths = _kv_paths(args.data, "--data")
    if not plugins or set(plugins) != set(data_paths):
        raise UsageError("--plugin and --data must name the same tasks")
    weights, tokens = load_model(args.model)
    vocab = Vocab(tokens)
    datasets = {t: _load_tagged(p, args.tag_col, vocab) for t, p in data_paths.items()}
    counts = [int(x) for x in args.counts.split(",")]
    per_task = max(counts)
    stream = build_stream(datasets, per_task, args.seed)
    registry = Registry(weights)
    for task, path in plugins.items():
        registry.register(load_plugin(path, weights), task)
    delay = args.reload_delay if args.reload_delay > 0 else None
    plugin_trace = run_stream(stream, PluginSwitcher(registry))
    model_trace = run_stream(stream, ModelSwitcher(args.model, plugins, delay))
    if plugin_trace.predictions() != model_trace.predictions():
        raise PlugTaggerError("regimes produced different predictions")
    points = speed_ratio(model_trace, plugin_trace, counts)
    csv_text = ratio_csv(points)
    if args.out:
        atomic_write_text(Path(args.out), csv_text)
        outputs = {"csv": args.out}
        if args.trace:
            atomic_write_text(Path(args.trace), json.dumps({"plugin": json.loads(plugin_trace.to_json()),
                                                            "model": json.loads(model_trace.to_json())}))
            outputs["trace"] = args.trace
        write_manifest(args.out, args, {"model": args.model, **plugins, **data_paths}, outputs, started)
    sys.stdout.write(csv_text)
    print(f"# switches {model_trace.switches} slope {ratio_slope(points):.5f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="plugtagger", description="Sequence labeling with a frozen toy LM and task plugins.")
    p.add_argument("--version", action="version", version=f"plugtagger {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", type=Path, help="key = value file; command-line flags take precedence")
        sp.set_defaults(func=func)
        return sp

    g = command("gen-data", cmd_gen_data, "write the synthetic NER/POS/chunk tasks and a pretraining corpus")
    g.add_argument("--out-dir", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", default="2000,400,400", help="train,dev,test sentence counts")
    g.add_argument("--corpus-size", type=int, default=20000)

    g = command("pretrain", cmd_pretrain, "masked-LM pretraining of the toy backbone")
    g.add_argument("--corpus", type=Path, required=True, help="one whitespace-tokenized sentence per line")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--vocab-extra", type=Path, action="append", help="CoNLL file whose words join the vocabulary")
    g.add_argument("--min-freq", type=int, default=1)
    g.add_argument("--steps", type=int, default=10000)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=2e-3)
    g.add_argument("--warmup", type=int, default=100)
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--ffn-dim", type=int, default=256)
    g.add_argument("--max-len", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--log-every", type=int, default=500)

    g = command("select-labelwords", cmd_select, "choose one label word per label from the LM's predictions")
    g.add_argument("--model", type=Path, required=True)
    g.add_argument("--train", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--tag-col", type=int, default=-1)
    g.add_argument("--decode", choices=("exact", "greedy"), default="exact",
                   help="exact: separate B-/I- words; greedy: one word per category")
    g.add_argument("--stopwords", default="", help="comma-separated words never used as label words")
    g.add_argument("--no-generic-filter", action="store_true")

    g = command("train", cmd_train, "train a task plugin against a frozen backbone")
    g.add_argument("--model", type=Path, required=True)
    g.add_argument("--train", type=Path, required=True)
    g.add_argument("--dev", type=Path)
    g.add_argument("--map", type=Path, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--metrics", type=Path, help="per-epoch TSV log")
    g.add_argument("--task", default="")
    g.add_argument("--tag-col", type=int, default=-1)
    g.add_argument("--decode", choices=("exact", "greedy"), default="exact")
    g.add_argument("--mode", choices=("embedding", "layer"), default="layer")
    g.add_argument("--lp", type=int, default=8)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--clip-norm", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)

    g = command("tag", cmd_tag, "tag text with a trained plugin")
    g.add_argument("--model", type=Path, required=True)
    g.add_argument("--plugin", type=Path, required=True)
    g.add_argument("--text", help="a single sentence")
    g.add_argument("--input", type=Path, help="sentences to tag")
    g.add_argument("--input-format", choices=("text", "conll"), default="text")
    g.add_argument("--out", type=Path, help="write two-column CoNLL instead of printing")
    g.add_argument("--decode", choices=("exact", "greedy"), help="must match the plugin's label map")

    g = command("eval", cmd_eval, "score predicted tags against gold")
    g.add_argument("--pred", type=Path, required=True)
    g.add_argument("--gold", type=Path, required=True)
    g.add_argument("--tag-col", type=int, default=-1)
    g.add_argument("--metric", choices=("auto", "f1", "acc"), default="auto")

    g = command("bench-switch", cmd_bench, "plugin-switch vs model-reload latency on a mixed task stream")
    g.add_argument("--model", type=Path, required=True)
    g.add_argument("--plugin", action="append", metavar="TASK=PATH", help="repeat per task")
    g.add_argument("--data", action="append", metavar="TASK=PATH", help="CoNLL sentences per task")
    g.add_argument("--counts", default="25,50,75,100", help="samples per task at which to report the ratio")
    g.add_argument("--reload-delay", type=float, default=0.0, help="seconds; 0 reloads the checkpoint from disk")
    g.add_argument("--tag-col", type=int, default=-1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, help="CSV path")
    g.add_argument("--trace", type=Path, help="JSON trace dump")
    return p


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _parse(argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path:
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
        name = next((a for a in argv if a in subs), None)
        if name is None:
            raise UsageError("--config needs a subcommand")
        config = read_config(path)
        _apply_config(subs[name], config)
        for action in subs[name]._actions:
            if action.dest in config:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = _parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except PlugTaggerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
