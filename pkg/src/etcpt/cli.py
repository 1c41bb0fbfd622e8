"""Command-line entry point: ``etcpt <command> [--config FILE] [--key value ...]``.

Every command resolves its settings from built-in defaults, then an optional
``key = value`` config file, then command-line flags. The resolved settings
are written as a manifest next to the outputs; re-running a command whose
manifest and outputs already match is a no-op, and a manifest can itself be
passed back as ``--config`` to reproduce a run.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, parse_config, split_list
from .corruption import build_etc_example, format_dump_record, sample_etc_gaps
from .downstream import (
    DEFAULT_LR_GRID,
    TASK_HEAD,
    TASK_METRIC,
    EvalReport,
    FinetuneHyper,
    evaluate,
    finetune,
    majority_baseline,
    render_table,
    subsample,
    tokenize_splits,
)
from .encoder import (
    CheckpointError,
    EncoderConfig,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
)
from .pretrain import (
    DivergenceError,
    TrainConfig,
    derive_rng,
    load_generator,
    pretrain_electra,
    pretrain_etc,
    pretrain_mlm,
)
from .synthetic import TASKS, generate_corpus, generate_labeled, load_grammar, read_labeled, write_labeled, write_lines
from .tensor import BACKEND
from .tokenizer import Vocabulary, VocabularyError, decode, encode, read_corpus, train_vocab

log = logging.getLogger("etcpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- option tables ----------------------------------------------------------------------


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in split_list(v))


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in split_list(v))


def _opt_str(v: str) -> Optional[str]:
    return None if v in ("", "none", "None") else v


@dataclass(frozen=True)
class Opt:
    key: str
    parse: Callable
    default: object
    help: str = ""
    is_input: bool = False  # hashed into the manifest


def _train_opts(stage: str) -> list[Opt]:
    opts = [
        Opt("corpus", str, None, "corpus file, one query per line", True),
        Opt("vocab", str, None, "vocabulary file", True),
        Opt("out", str, None, "output checkpoint"),
        Opt("steps", int, 1000),
        Opt("batch_size", int, 32),
        Opt("lr", float, 1e-4),
        Opt("weight_decay", float, 0.01),
        Opt("betas", _floats, (0.9, 0.999)),
        Opt("rate", float, 0.15, "masking rate (mlm, electra) or gap probability p (etc)"),
        Opt("seed", int, 0),
        Opt("precision", str, "float32", "float32 or float64"),
        Opt("eval_every", int, 100),
        Opt("clip_norm", float, 1.0, "global gradient-norm clip; 0 disables"),
        Opt("prefetch", _bool, False, "prepare the next batch on a worker thread"),
    ]
    if stage == "mlm":
        opts += [
            Opt("init_checkpoint", _opt_str, None, "continue from this checkpoint", True),
            Opt("layers", int, 2), Opt("hidden", int, 64), Opt("ffn", int, 256),
            Opt("heads", int, 4), Opt("max_len", int, 128), Opt("dropout", float, 0.1),
        ]
    else:
        opts += [
            Opt("generator", str, None, "frozen stage-1 MLM checkpoint", True),
            Opt("fill_mode", str, "sample", "sample or argmax"),
            Opt("temperature", float, 1.0),
        ]
    return opts


COMMANDS: dict[str, list[Opt]] = {
    "gen-corpus": [
        Opt("grammar", _opt_str, None, "grammar config (default: bundled grammar)", True),
        Opt("task", str, "corpus", "corpus, or a labeled task: " + ", ".join(TASKS)),
        Opt("count", int, 50000, "number of unlabeled queries"),
        Opt("counts", _ints, (500, 500, 1000), "train,dev,test sizes of a labeled dataset"),
        Opt("seed", _opt_str, None, "generation seed (default: the grammar's)"),
        Opt("marker", str, "media", "binary_cls marker lexicon"),
        Opt("positive_rate", float, 0.3),
        Opt("edit_rate", float, 0.5, "spell: per-word typo probability"),
        Opt("vocab", _opt_str, None, "spell: vocabulary that fixes token lengths", True),
        Opt("out", str, None, "corpus file, or directory for a labeled dataset"),
    ],
    "train-tokenizer": [
        Opt("corpus", str, None, "corpus file", True),
        Opt("vocab_size", int, 512),
        Opt("min_frequency", int, 2),
        Opt("out", str, None, "vocabulary file"),
    ],
    "pretrain-mlm": _train_opts("mlm"),
    "pretrain-etc": _train_opts("etc"),
    "pretrain-electra": _train_opts("electra"),
    "corrupt-dump": [
        Opt("vocab", str, None, "vocabulary file", True),
        Opt("query", _opt_str, None, "a single query (else --corpus)"),
        Opt("corpus", _opt_str, None, "corpus file", True),
        Opt("limit", int, 20, "queries to dump from the corpus"),
        Opt("gaps", _opt_str, None, "forced gap vector, e.g. 1,0,0,0 (single query only)"),
        Opt("p", float, 0.15),
        Opt("seed", int, 0),
        Opt("generator", _opt_str, None, "fill the masks with this checkpoint", True),
        Opt("fill_mode", str, "sample"),
        Opt("out", _opt_str, None, "write records here instead of stdout"),
    ],
    "finetune": [
        Opt("checkpoint", str, None, "pre-trained checkpoint", True),
        Opt("data", str, None, "labeled dataset directory", True),
        Opt("vocab", str, None, "vocabulary file", True),
        Opt("seeds", _ints, (0, 1, 2, 3, 4)),
        Opt("lr_grid", _floats, DEFAULT_LR_GRID),
        Opt("epochs", _opt_str, None, "override the per-task default"),
        Opt("epoch_multiplier", float, 1.0),
        Opt("batch_size", int, 16),
        Opt("precision", str, "float32"),
        Opt("ratio", float, 1.0, "few-shot fraction of the training split"),
        Opt("subsample_seed", int, 0),
        Opt("method", str, "", "row label in reports"),
        Opt("out", str, None, "EvalReport JSON file"),
        Opt("model_out", _opt_str, None, "save the first seed's fine-tuned model here"),
    ],
    "evaluate": [
        Opt("checkpoint", str, None, "fine-tuned checkpoint", True),
        Opt("data", str, None, "labeled dataset directory", True),
        Opt("vocab", str, None, "vocabulary file", True),
        Opt("split", str, "test"),
        Opt("method", str, ""),
        Opt("out", _opt_str, None, "EvalReport JSON file (else stdout only)"),
    ],
    "report": [
        Opt("reports", str, None, "comma-separated EvalReport files or directories"),
        Opt("out", _opt_str, None, "write the rendered tables here"),
    ],
}

RESERVED = {"command"}


def _is_reserved(key: str) -> bool:
    return key in RESERVED or key.startswith("version.") or key.startswith("input.")


# --- resolution and manifests -----------------------------------------------------------


def resolve(command: str, config_path: Optional[str], flags: dict) -> dict:
    """Defaults, then the config file, then flags; unknown keys are errors."""
    opts = {o.key: o for o in COMMANDS[command]}
    values = {k: o.default for k, o in opts.items()}
    if config_path:
        raw = parse_config(config_path)
        if raw.get("command", command) != command:
            raise ConfigError(f"config is for command {raw['command']!r}, not {command!r}")
        for k, v in raw.items():
            if _is_reserved(k):
                continue
            if k not in opts:
                raise ConfigError(f"unknown key {k!r} for {command}")
            try:
                values[k] = opts[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from None
    for k, v in flags.items():
        if v is None:
            continue
        try:
            values[k] = opts[k].parse(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for --{k.replace('_', '-')}: {exc}") from None
    return values


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_render(x) for x in v)
    return str(v)


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.cfg") if p.is_dir() else [p]
    for q in files:
        h.update(q.name.encode("utf-8"))
        h.update(q.read_bytes())
    return h.hexdigest()


def build_manifest(command: str, values: dict) -> dict[str, str]:
    m = {"command": command}
    m.update({k: _render(v) for k, v in values.items()})
    for o in COMMANDS[command]:
        path = values.get(o.key)
        if o.is_input and path:
            _exists(path)
            m[f"input.{o.key}.sha256"] = file_digest(path)
    m["version.etcpt"] = __version__
    m["version.numpy"] = np.__version__
    m["version.python"] = platform.python_version()
    m["version.backend"] = BACKEND
    return m


def _same_run(a: dict, b: dict) -> bool:
    strip = lambda d: {k: v for k, v in d.items() if not k.startswith("version.")}
    return strip(a) == strip(b)


# --- commands ----------------------------------------------------------------------------


def _need(values: dict, *keys: str) -> None:
    missing = [k for k in keys if not values.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _exists(*paths) -> None:
    for p in paths:
        if p and not Path(p).exists():
            raise DataError(f"missing input: {p}")


def _load_vocab(path) -> Vocabulary:
    _exists(path)
    return Vocabulary.load(path)


def _encode_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    _exists(path)
    seqs = [encode(q, vocab) for q in read_corpus(path)]
    seqs = [s for s in seqs if s]
    if not seqs:
        raise DataError(f"{path}: corpus empty")
    return seqs


def cmd_gen_corpus(v: dict) -> list[str]:
    """Generate an unlabeled corpus or a labeled dataset from the grammar."""
    _need(v, "out")
    g = load_grammar(v["grammar"])
    seed = g.seed if v["seed"] is None else int(v["seed"])
    if v["task"] == "corpus":
        write_lines(generate_corpus(g, v["count"], seed), v["out"])
        return [v["out"]]
    if v["task"] not in TASKS:
        raise UsageError(f"unknown task {v['task']!r}")
    vocab = _load_vocab(v["vocab"]) if v["vocab"] else None
    counts = v["counts"]
    if len(counts) != 3:
        raise UsageError("--counts takes train,dev,test")
    data = generate_labeled(g, v["task"], counts, seed, marker=v["marker"],
                            positive_rate=v["positive_rate"], vocab=vocab, edit_rate=v["edit_rate"])
    write_labeled(data, v["out"])
    if v["task"] == "ner":
        (Path(v["out"]) / "tags").write_text("\n".join(g.tag_names) + "\n", encoding="utf-8")
    return [v["out"]]


def cmd_train_tokenizer(v: dict) -> list[str]:
    """Train a subword vocabulary on a corpus."""
    _need(v, "corpus", "out")
    _exists(v["corpus"])
    vocab = train_vocab(read_corpus(v["corpus"]), v["vocab_size"], v["min_frequency"])
    vocab.save(v["out"])
    log.info("vocabulary of %d tokens -> %s (sha256 %s)", vocab.size, v["out"], vocab.sha256()[:12])
    return [v["out"]]


def _train_config(v: dict, stage: str) -> TrainConfig:
    if len(v["betas"]) != 2:
        raise ConfigError("betas takes two values")
    try:
        return TrainConfig(stage=stage, steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                           weight_decay=v["weight_decay"], betas=tuple(v["betas"]),
                           p_or_rate=v["rate"], seed=v["seed"], precision=v["precision"],
                           init_checkpoint=v.get("init_checkpoint"), eval_every=v["eval_every"],
                           clip_norm=v["clip_norm"], fill_mode=v.get("fill_mode", "sample"),
                           temperature=v.get("temperature", 1.0), prefetch=v["prefetch"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _finish_pretrain(v: dict, result, vocab: Vocabulary, stage: str) -> list[str]:
    out = v["out"]
    save_checkpoint(result.params, out, extra={
        "vocab_sha256": vocab.sha256(), "stage": stage, "steps": v["steps"], "seed": v["seed"],
        "wasted": result.wasted, "queries": result.queries,
        "generator_digest": list(result.generator_digest or ())})
    Path(out + ".losses").write_text("".join(f"{x!r}\n" for x in result.losses), encoding="utf-8")
    Path(out + ".log").write_text("".join(line + "\n" for line in result.log_lines), encoding="utf-8")
    if result.generator_digest and result.generator_digest[0] != result.generator_digest[1]:
        raise DivergenceError("generator parameters changed during training")
    return [out, out + ".losses", out + ".log"]


def _check_vocab_matches(checkpoint, vocab: Vocabulary) -> None:
    meta = read_checkpoint_meta(checkpoint)
    want = meta.get("extra", {}).get("vocab_sha256")
    if want and want != vocab.sha256():
        raise DataError(f"vocabulary mismatch: {checkpoint} was trained with vocabulary {want[:12]}, "
                        f"got {vocab.sha256()[:12]}")


def cmd_pretrain(stage: str) -> Callable[[dict], list[str]]:
    def run(v: dict) -> list[str]:
        need = ("corpus", "vocab", "out") + (("generator",) if stage != "mlm" else ())
        _need(v, *need)
        cfg = _train_config(v, stage)
        _exists(v["corpus"], v["vocab"], v.get("generator"), v.get("init_checkpoint"))
        vocab = _load_vocab(v["vocab"])
        seqs = _encode_corpus(v["corpus"], vocab)
        echo = lambda line: log.info("%s", line)
        if stage == "mlm":
            ecfg = None
            if not cfg.init_checkpoint:
                try:
                    ecfg = EncoderConfig(layers=v["layers"], hidden=v["hidden"], ffn=v["ffn"],
                                         heads=v["heads"], max_len=v["max_len"],
                                         vocab_size=vocab.size, dropout=v["dropout"])
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
            else:
                _check_vocab_matches(cfg.init_checkpoint, vocab)
            result = pretrain_mlm(cfg, seqs, vocab, ecfg, on_log=echo)
        else:
            _check_vocab_matches(v["generator"], vocab)
            fn = pretrain_etc if stage == "etc" else pretrain_electra
            result = fn(cfg, seqs, vocab, v["generator"], on_log=echo)
        return _finish_pretrain(v, result, vocab, stage)
    run.__doc__ = {"mlm": "Masked language model pre-training (stage 1, or continued).",
                   "etc": "Extended token classification with a frozen generator.",
                   "electra": "Replaced token detection with a frozen generator."}[stage]
    return run


def cmd_corrupt_dump(v: dict) -> list[str]:
    """Print ETC extensions of queries: original, template, extended, labels."""
    _need(v, "vocab")
    vocab = _load_vocab(v["vocab"])
    if v["query"] is not None:
        queries = [v["query"]]
    elif v["corpus"]:
        _exists(v["corpus"])
        queries = read_corpus(v["corpus"])[: v["limit"]]
    else:
        raise UsageError("give --query or --corpus")
    if v["gaps"] is not None and len(queries) != 1:
        raise UsageError("--gaps applies to a single --query")
    gen = load_generator(v["generator"], vocab, v["fill_mode"]) if v["generator"] else None
    if gen is not None:
        _check_vocab_matches(v["generator"], vocab)
    gap_rng = derive_rng(v["seed"], "corrupt-dump/gaps")
    fill_rng = derive_rng(v["seed"], "corrupt-dump/fill")
    records = []
    for q in queries:
        x = encode(q, vocab)
        if v["gaps"] is not None:
            m = [int(t) for t in split_list(v["gaps"])]
            if len(m) != len(x) + 1:
                raise DataError(f"--gaps needs {len(x) + 1} entries for {len(x)} tokens, got {len(m)}")
        else:
            m = sample_etc_gaps(len(x), v["p"], gap_rng, 10**9)
        ex = build_etc_example(x, m, vocab.mask_id)
        extended = gen.fill([ex.x_extend], fill_rng)[0] if gen else ex.x_extend
        records.append(format_dump_record(decode(x, vocab), decode(ex.x_extend, vocab),
                                          decode(extended, vocab), ex.y))
    text = "".join(r + "\n" for r in records)
    if v["out"]:
        Path(v["out"]).write_text(text, encoding="utf-8")
        return [v["out"]]
    sys.stdout.write(text)
    return []


def _load_dataset(path, vocab: Vocabulary):
    _exists(path)
    splits = read_labeled(path)
    tags_file = Path(path) / "tags"
    names = tags_file.read_text(encoding="utf-8").split() if tags_file.exists() else None
    return tokenize_splits(splits, vocab, names)


def cmd_finetune(v: dict) -> list[str]:
    """Fine-tune a checkpoint on a labeled task and write an EvalReport."""
    _need(v, "checkpoint", "data", "vocab", "out")
    _exists(v["checkpoint"], v["data"])
    vocab = _load_vocab(v["vocab"])
    _check_vocab_matches(v["checkpoint"], vocab)
    data = _load_dataset(v["data"], vocab)
    if v["ratio"] < 1.0:
        data = subsample(data, v["ratio"], v["subsample_seed"])
    hyper = FinetuneHyper(seeds=tuple(v["seeds"]), lr_grid=tuple(v["lr_grid"]),
                          epochs=None if v["epochs"] is None else int(v["epochs"]),
                          epoch_multiplier=v["epoch_multiplier"], batch_size=v["batch_size"],
                          precision=v["precision"])
    model, report = finetune(v["checkpoint"], data, vocab, hyper, method=v["method"])
    report.extra.update({"ratio": v["ratio"], "majority": majority_baseline(data)})
    report.save(v["out"])
    log.info("%s %s %s = %.4f per seed %s", v["method"] or "-", data.task, report.metric,
             report.value, ["%.4f" % x for x in report.per_seed])
    outs = [v["out"]]
    if v["model_out"]:
        save_checkpoint(model, v["model_out"], extra={
            "vocab_sha256": vocab.sha256(), "task": data.task, "tag_names": data.tag_names})
        outs.append(v["model_out"])
    return outs


def cmd_evaluate(v: dict) -> list[str]:
    """Score a fine-tuned checkpoint on one split."""
    _need(v, "checkpoint", "data", "vocab")
    _exists(v["checkpoint"], v["data"])
    vocab = _load_vocab(v["vocab"])
    _check_vocab_matches(v["checkpoint"], vocab)
    data = _load_dataset(v["data"], vocab)
    head = TASK_HEAD[data.task]
    meta = read_checkpoint_meta(v["checkpoint"])
    if head not in meta["heads"]:
        raise DataError(f"task/head mismatch: {data.task} needs a {head!r} head, checkpoint has "
                        f"{sorted(meta['heads'])}")
    params = load_checkpoint(v["checkpoint"], heads={head: meta["heads"][head]})
    if data.task == "ner" and meta["extra"].get("tag_names"):
        data.tag_names = list(meta["extra"]["tag_names"])
    value = evaluate(params, data, vocab, v["split"])
    report = EvalReport(data.task, TASK_METRIC[data.task],
                        value, [value], {v["split"]: len(data.split(v["split"]))},
                        method=v["method"], dataset=data.name)
    print(report.to_json())
    if v["out"]:
        report.save(v["out"])
        return [v["out"]]
    return []


def collect_reports(sources: str) -> list[EvalReport]:
    """EvalReports from a comma-separated list of files and directories."""
    paths: list[Path] = []
    for item in split_list(sources):
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.rglob("*.json")))
        elif p.exists():
            paths.append(p)
        else:
            raise DataError(f"missing input: {item}")
    if not paths:
        raise DataError("no EvalReport files found")
    return [EvalReport.load(p) for p in paths]


def render_reports(reports: list[EvalReport]) -> str:
    """A methods x tasks table over full-data runs and a methods x ratio few-shot grid."""
    full: dict[str, dict[str, EvalReport]] = {}
    few: dict[str, dict[str, EvalReport]] = {}
    columns, ratios = [], []
    for r in reports:
        ratio = float(r.extra.get("ratio", 1.0))
        method = r.method or "-"
        col = r.dataset or r.task
        if ratio >= 1.0:
            full.setdefault(method, {})[col] = r
            if col not in columns:
                columns.append(col)
        key = f"{col}@{100 * ratio:g}%"
        few.setdefault(method, {})[key] = r
        if key not in ratios:
            ratios.append((ratio, key))
    parts = []
    if full:
        parts.append(render_table(full, columns, title="fine-tuned test metric (x100), mean over seeds"))
    ratio_cols = [k for _, k in sorted(set(ratios))]
    if len(ratio_cols) > len(columns):
        parts.append(render_table(few, ratio_cols, title="few-shot: metric (x100) by training fraction"))
    return "\n\n".join(parts) + "\n"


def cmd_report(v: dict) -> list[str]:
    """Aggregate EvalReports into comparison tables."""
    _need(v, "reports")
    text = render_reports(collect_reports(v["reports"]))
    sys.stdout.write(text)
    if v["out"]:
        Path(v["out"]).write_text(text, encoding="utf-8")
        return [v["out"]]
    return []


HANDLERS: dict[str, Callable[[dict], list[str]]] = {
    "gen-corpus": cmd_gen_corpus,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain-mlm": cmd_pretrain("mlm"),
    "pretrain-etc": cmd_pretrain("etc"),
    "pretrain-electra": cmd_pretrain("electra"),
    "corrupt-dump": cmd_corrupt_dump,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# --- entry point ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="etcpt", description="Extended token classification pre-training toolkit.")
    parser.add_argument("--version", action="version", version=f"etcpt {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", help="key = value config file (a manifest works too)")
        p.add_argument("--force", action="store_true", help="run even if the manifest is up to date")
        for o in opts:
            default = _render(o.default) if o.default not in (None, "") else "unset"
            p.add_argument("--" + o.key.replace("_", "-"), dest=o.key, default=None, metavar="V",
                           help=f"{o.help} (default: {default})".strip())
    return parser


def run(command: str, values: dict, force: bool = False) -> list[str]:
    """Run one resolved command, honoring and then writing its manifest."""
    out = values.get("out")
    manifest = build_manifest(command, values) if out else None
    mpath = Path(out + ".manifest") if out and not _is_dir_output(command, values) else (
        Path(out) / "manifest.cfg" if out else None)
    if manifest and not force and mpath.exists():
        try:
            old = parse_config(mpath)
        except ConfigError:
            old = {}
        if _same_run(old, manifest) and Path(out).exists():
            log.info("up to date: %s", out)
            return [out]
    for key in ("out", "model_out"):
        if values.get(key):
            Path(values[key]).parent.mkdir(parents=True, exist_ok=True)
    outputs = HANDLERS[command](values)
    if manifest:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(dump_config(manifest), encoding="utf-8")
    return outputs


def _is_dir_output(command: str, values: dict) -> bool:
    return command == "gen-corpus" and values.get("task") != "corpus"


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(format="%(message)s", stream=sys.stderr)
    logging.getLogger("etcpt").setLevel(logging.WARNING if args.quiet else logging.INFO)
    flags = {o.key: getattr(args, o.key) for o in COMMANDS[args.command]}
    try:
        values = resolve(args.command, args.config, flags)
        run(args.command, values, force=args.force)
    except (UsageError, ConfigError) as exc:
        print(f"etcpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"etcpt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, VocabularyError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"etcpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
