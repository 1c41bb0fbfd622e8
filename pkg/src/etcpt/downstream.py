"""Fine-tuning harness for query-understanding tasks and their metrics.

Three task shapes share one loop:

* ``ner``        token classification with BIO tags, span-level F1
* ``binary_cls`` sequence classification from the ``[CLS]`` state, positive-class F1
* ``spell``      per-position prediction over the whole vocabulary, exact-match accuracy
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderParams, encoder_forward, head_forward, head_width, load_checkpoint
from .pretrain import Optimizer, cosine_lr, derive_rng, pad_batch, PRECISIONS
from .synthetic import LabeledSplits
from .tensor import Tape
from .tokenizer import Vocabulary, encode

log = logging.getLogger(__name__)

TASK_HEAD = {"ner": "token_cls", "binary_cls": "seq_cls", "spell": "vocab"}
TASK_METRIC = {"ner": "span_f1", "binary_cls": "f1", "spell": "exact_match"}
DEFAULT_EPOCHS = {"ner": 10, "binary_cls": 2, "spell": 2}
DEFAULT_LR_GRID = (2e-5, 5e-5, 1e-4, 2e-4)


# --- BIO spans ------------------------------------------------------------------------


def extract_spans(tags: Sequence[str], diagnostics: Optional[dict] = None) -> set[tuple[int, int, str]]:
    """Maximal ``B-X I-X ...`` runs as ``(start, end_exclusive, type)``.

    An ``I-X`` that does not continue an ``X`` span opens a new span (counted
    in ``diagnostics["repaired"]``).
    """
    spans, start, kind = set(), None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        if prefix == "I" and kind == typ and start is not None:
            continue
        if start is not None:
            spans.add((start, i, kind))
            start, kind = None, None
        if prefix == "B":
            start, kind = i, typ
        elif prefix == "I":
            if diagnostics is not None:
                diagnostics["repaired"] = diagnostics.get("repaired", 0) + 1
            start, kind = i, typ
    return spans


def _f1(tp: int, n_pred: int, n_gold: int) -> float:
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if n_pred == 0 or n_gold == 0 or tp == 0:
        return 0.0
    p, r = tp / n_pred, tp / n_gold
    return 2 * p * r / (p + r)


def span_prf(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]],
             diagnostics: Optional[dict] = None) -> tuple[float, float, float]:
    """Corpus-level exact-match span precision, recall and F1."""
    if len(pred) != len(gold):
        raise ValueError("pred and gold must contain the same number of sentences")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError(f"tag sequence lengths differ: {len(p)} vs {len(g)}")
        ps, gs = extract_spans(p, diagnostics), extract_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    prec = tp / n_pred if n_pred else (1.0 if n_gold == 0 else 0.0)
    rec = tp / n_gold if n_gold else (1.0 if n_pred == 0 else 0.0)
    return prec, rec, _f1(tp, n_pred, n_gold)


def span_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]],
            diagnostics: Optional[dict] = None) -> float:
    return span_prf(pred, gold, diagnostics)[2]


def binary_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    """F1 of the positive class."""
    pred, gold = np.asarray(pred, bool), np.asarray(gold, bool)
    if pred.shape != gold.shape:
        raise ValueError("pred and gold must have equal length")
    tp = int((pred & gold).sum())
    return _f1(tp, int(pred.sum()), int(gold.sum()))


def exact_match_accuracy(pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> float:
    if len(pred) != len(gold):
        raise ValueError("pred and gold must be aligned")
    if not gold:
        raise ValueError("empty split")
    return sum(list(map(int, p)) == list(map(int, g)) for p, g in zip(pred, gold)) / len(gold)


# --- datasets -------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Token-level examples: (ids, labels) with labels per the task shape."""

    task: str
    train: list[tuple[list[int], object]]
    dev: list[tuple[list[int], object]]
    test: list[tuple[list[int], object]]
    tag_names: list[str] = field(default_factory=list)
    name: str = ""

    @property
    def num_labels(self) -> int:
        if self.task == "ner":
            return len(self.tag_names)
        return 2 if self.task == "binary_cls" else 0

    def split(self, which: str):
        return getattr(self, which)


def word_tags_to_tokens(word_tags: Sequence[str], pieces_per_word: Sequence[int]) -> list[str]:
    """Expand word-level BIO tags onto subword tokens (continuations become I-)."""
    out = []
    for tag, k in zip(word_tags, pieces_per_word):
        out.append(tag)
        cont = "O" if tag == "O" else "I-" + tag.partition("-")[2]
        out.extend([cont] * (k - 1))
    return out


def tokenize_splits(data: LabeledSplits, vocab: Vocabulary,
                    tag_names: Optional[Sequence[str]] = None) -> LabeledDataset:
    """Convert text-level splits into token-level examples."""
    names = list(tag_names or [])
    if data.task == "ner" and not names:
        seen = sorted({t for s in ("train", "dev", "test") for ex in data.split(s) for t in ex.label} - {"O"},
                      key=lambda t: (t.partition("-")[2], t))
        names = ["O"] + seen
    index = {t: i for i, t in enumerate(names)}

    def convert(ex):
        if data.task == "ner":
            words = ex.text.split()
            pieces = [len(encode(w, vocab)) for w in words]
            ids = [i for w in words for i in encode(w, vocab)]
            return ids, [index[t] for t in word_tags_to_tokens(ex.label, pieces)]
        ids = encode(ex.text, vocab)
        if data.task == "binary_cls":
            return ids, int(ex.label)
        target = encode(ex.label, vocab)
        if len(target) != len(ids):
            raise ValueError(f"spell pair changes token length: {ex.text!r} -> {ex.label!r}")
        return ids, target

    return LabeledDataset(data.task, *[[convert(ex) for ex in data.split(s)]
                                       for s in ("train", "dev", "test")],
                          tag_names=names, name=data.name)


def subsample(data: LabeledDataset, ratio: float, seed: int) -> LabeledDataset:
    """Keep ``ceil(ratio * N)`` training examples chosen uniformly without replacement.

    The choice is a prefix of one seeded permutation, so smaller ratios give
    subsets of larger ones under the same seed. Dev and test are untouched.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = len(data.train)
    k = math.ceil(ratio * n - 1e-9)
    if k == 0:
        raise ValueError("subsample ratio yields zero training examples")
    order = np.random.default_rng([seed, 4242]).permutation(n)
    keep = sorted(order[:k].tolist())
    return LabeledDataset(data.task, [data.train[i] for i in keep], data.dev, data.test,
                          data.tag_names, data.name)


# --- fine-tuning ----------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneHyper:
    seeds: tuple[int, ...] = (0,)
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    epochs: Optional[int] = None
    epoch_multiplier: float = 1.0
    batch_size: int = 16
    precision: str = "float32"
    dropout: Optional[float] = None  # None keeps the checkpoint's rate
    clip_norm: float = 1.0

    def epochs_for(self, task: str) -> int:
        base = self.epochs if self.epochs is not None else DEFAULT_EPOCHS[task]
        return max(1, int(round(base * self.epoch_multiplier)))


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    per_seed: list[float]
    support: dict
    method: str = ""
    dataset: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _batch(task: str, examples, vocab: Vocabulary):
    seqs = [ids for ids, _ in examples]
    if task == "binary_cls":
        ids, pad_mask, _, lab_mask = pad_batch(seqs, vocab.pad_id, vocab.cls_id)
        return ids, pad_mask, np.array([lab for _, lab in examples], dtype=np.int64), lab_mask
    return pad_batch(seqs, vocab.pad_id, vocab.cls_id, [lab for _, lab in examples])


def _loss(params: EncoderParams, task: str, batch, rng, train: bool):
    ids, pad_mask, labels, lab_mask = batch
    hidden = encoder_forward(params, ids, pad_mask, rng=rng, train=train)
    logits = head_forward(params, hidden, TASK_HEAD[task])
    if task == "binary_cls":
        return T.cross_entropy(logits, labels, np.ones(len(labels), dtype=bool))
    return T.cross_entropy(logits, labels, lab_mask)


def predict(params: EncoderParams, task: str, examples, vocab: Vocabulary, batch_size: int = 128):
    """Per-example predictions: tag ids, a class id or token ids."""
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        ids, pad_mask, _, lab_mask = _batch(task, chunk, vocab)
        hidden = encoder_forward(params, ids, pad_mask)
        logits = head_forward(params, hidden, TASK_HEAD[task]).data
        if task == "binary_cls":
            out.extend(int(k) for k in logits.argmax(axis=-1))
            continue
        best = logits.argmax(axis=-1)
        for row, (seq, _) in enumerate(chunk):
            out.append(best[row, 1:1 + len(seq)].tolist())
    return out


def score(task: str, preds, examples, tag_names: Sequence[str]) -> float:
    gold = [lab for _, lab in examples]
    if task == "ner":
        return span_f1([[tag_names[t] for t in p] for p in preds],
                       [[tag_names[t] for t in g] for g in gold])
    if task == "binary_cls":
        return binary_f1(preds, gold)
    return exact_match_accuracy(preds, gold)


def evaluate(params: EncoderParams, data: LabeledDataset, vocab: Vocabulary, split: str = "test") -> float:
    examples = data.split(split)
    if not examples:
        raise ValueError("empty split")
    head = TASK_HEAD[data.task]
    if params.heads.get(head) != head_width(params.config, head, _head_size(data)):
        raise ValueError(f"task/head mismatch: {data.task} needs a {head} head, model has {sorted(params.heads)}")
    return score(data.task, predict(params, data.task, examples, vocab), examples, data.tag_names)


def _head_size(data: LabeledDataset) -> Optional[int]:
    return data.num_labels or None


def load_for_task(checkpoint, data: LabeledDataset, seed: int, hyper: FinetuneHyper) -> EncoderParams:
    head = TASK_HEAD[data.task]
    params = load_checkpoint(checkpoint, heads={head: _head_size(data)}, seed=seed,
                             dtype=PRECISIONS[hyper.precision])
    if hyper.dropout is not None:
        params.config = replace(params.config, dropout=hyper.dropout)
    return params


def train_one(checkpoint, data: LabeledDataset, vocab: Vocabulary, lr: float, seed: int,
              hyper: FinetuneHyper) -> EncoderParams:
    """Fine-tune a fresh copy of the checkpoint with one learning rate."""
    params = load_for_task(checkpoint, data, seed, hyper)
    train = data.train
    epochs = hyper.epochs_for(data.task)
    per_epoch = math.ceil(len(train) / hyper.batch_size)
    total = epochs * per_epoch
    opt = Optimizer(params, weight_decay=0.0, clip_norm=hyper.clip_norm)
    order_rng = derive_rng(seed, f"finetune/{data.task}/order")
    drop_rng = derive_rng(seed, f"finetune/{data.task}/dropout")
    step = 0
    for _ in range(epochs):
        order = order_rng.permutation(len(train))
        for i in range(0, len(train), hyper.batch_size):
            batch = _batch(data.task, [train[j] for j in order[i:i + hyper.batch_size]], vocab)
            opt.zero_grad()
            with Tape() as tape:
                loss = _loss(params, data.task, batch, drop_rng, train=True)
            T.backward(loss, tape)
            opt.step(cosine_lr(step, total, lr))
            step += 1
    return params


def finetune(checkpoint, data: LabeledDataset, vocab: Vocabulary,
             hyper: FinetuneHyper = FinetuneHyper(), method: str = "") -> tuple[EncoderParams, EvalReport]:
    """Fine-tune per seed, pick the learning rate on dev, report the test metric.

    Returns the model of the first seed and a report with the mean and
    per-seed test values.
    """
    if data.task not in TASK_HEAD:
        raise ValueError(f"unknown task {data.task!r}")
    if not data.dev:
        raise ValueError("dev split is empty")
    per_seed, chosen, first = [], [], None
    for seed in hyper.seeds:
        if not data.train:
            warnings.warn("no training examples; reporting the untrained head", stacklevel=2)
            best_params, best_lr = load_for_task(checkpoint, data, seed, hyper), None
        else:
            best = None
            for lr in hyper.lr_grid:
                params = train_one(checkpoint, data, vocab, lr, seed, hyper)
                dev = evaluate(params, data, vocab, "dev")
                log.info("task=%s seed=%d lr=%g dev=%.4f", data.task, seed, lr, dev)
                if best is None or dev > best[0]:
                    best = (dev, lr, params)
            _, best_lr, best_params = best
        per_seed.append(evaluate(best_params, data, vocab, "test"))
        chosen.append(best_lr)
        if first is None:
            first = best_params
    report = EvalReport(data.task, TASK_METRIC[data.task], float(np.mean(per_seed)), per_seed,
                        {"train": len(data.train), "dev": len(data.dev), "test": len(data.test)},
                        method=method, dataset=data.name, extra={"lr": chosen})
    return first, report


def majority_baseline(data: LabeledDataset, split: str = "test") -> float:
    """Metric of always predicting the most frequent training label."""
    examples = data.split(split)
    if data.task == "ner":
        counts = np.bincount([t for _, tags in data.train for t in tags], minlength=len(data.tag_names))
        tag = int(counts.argmax())
        return score("ner", [[tag] * len(ids) for ids, _ in examples], examples, data.tag_names)
    if data.task == "binary_cls":
        cls = int(np.bincount([lab for _, lab in data.train], minlength=2).argmax())
        return score("binary_cls", [cls] * len(examples), examples, data.tag_names)
    return score("spell", [list(ids) for ids, _ in examples], examples, data.tag_names)


# --- report tables -------------------------------------------------------------------


def render_table(rows: dict[str, dict[str, EvalReport]], columns: Sequence[str],
                 title: str = "") -> str:
    """Aligned plain-text table: rows are methods, cells are ``mean (n seeds)``."""
    header = ["method"] + list(columns)
    body = []
    for method, cells in rows.items():
        line = [method]
        for col in columns:
            rep = cells.get(col)
            line.append("-" if rep is None else f"{100 * rep.value:.2f} ({len(rep.per_seed)})")
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = ([title] if title else []) + [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines)
