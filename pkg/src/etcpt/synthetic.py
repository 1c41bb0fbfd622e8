"""A small probabilistic grammar of shopping queries with known ground truth.

The same grammar yields the unlabeled pre-training corpus and every labeled
task: NER tags come from the lexicon role of each slot, binary labels from
task marker lexicons, and spelling pairs from character edits of clean
queries.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .config import parse_config, split_list
from .tokenizer import Vocabulary, encode, normalize

TASKS = ("ner", "binary_cls", "spell")


@dataclass(frozen=True)
class Rule:
    name: str
    weight: float
    slots: tuple[str, ...]  # lexicon roles, or quoted literals like '"for"'


@dataclass(frozen=True)
class Marker:
    task: str
    entries: tuple[str, ...]
    position: str  # "prefix" | "suffix"


@dataclass
class QueryGrammar:
    lexicons: dict[str, tuple[str, ...]]
    rules: list[Rule]
    entity_roles: tuple[str, ...]
    markers: dict[str, Marker] = field(default_factory=dict)
    corpus_marker_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        brand, product = set(self.lexicons.get("brand", ())), set(self.lexicons.get("product", ()))
        if brand & product:
            raise ValueError(f"brand and product lexicons overlap: {sorted(brand & product)}")
        for r in self.rules:
            for s in r.slots:
                if not s.startswith('"') and s not in self.lexicons:
                    raise ValueError(f"rule {r.name!r} uses unknown lexicon {s!r}")
        if not self.rules or sum(r.weight for r in self.rules) <= 0:
            raise ValueError("grammar needs at least one rule with positive weight")

    @property
    def tag_names(self) -> list[str]:
        return ["O"] + [f"{bi}-{role}" for role in self.entity_roles for bi in ("B", "I")]

    # --- derivation ---

    def derive(self, rng: np.random.Generator) -> list[tuple[str, str]]:
        """One query as ``(word, tag)`` pairs."""
        weights = np.array([r.weight for r in self.rules], dtype=float)
        rule = self.rules[rng.choice(len(self.rules), p=weights / weights.sum())]
        words: list[tuple[str, str]] = []
        for slot in rule.slots:
            if slot.startswith('"'):
                words.extend((w, "O") for w in slot.strip('"').split())
                continue
            lex = self.lexicons[slot]
            entry = lex[rng.integers(len(lex))].split()
            if slot in self.entity_roles:
                words.extend((w, ("B-" if k == 0 else "I-") + slot) for k, w in enumerate(entry))
            else:
                words.extend((w, "O") for w in entry)
        return words

    def add_marker(self, words: list[tuple[str, str]], task: str,
                   rng: np.random.Generator) -> list[tuple[str, str]]:
        mk = self.markers[task]
        entry = [(w, "O") for w in mk.entries[rng.integers(len(mk.entries))].split()]
        return entry + words if mk.position == "prefix" else words + entry


def load_grammar(path=None) -> QueryGrammar:
    """Parse a grammar config; ``None`` loads the bundled default grammar."""
    if path is None:
        path = resources.files("etcpt").joinpath("data/default_grammar.cfg")
    values = parse_config(Path(str(path)))
    lexicons = {k[4:]: tuple(normalize(e) for e in split_list(v))
                for k, v in values.items() if k.startswith("lex.")}
    rules = []
    for k, v in sorted(values.items()):
        if not k.startswith("rule."):
            continue
        weight, _, body = v.partition(":")
        slots = tuple(_split_slots(body))
        rules.append(Rule(k[5:], float(weight), slots))
    markers = {}
    for k, v in values.items():
        parts = k.split(".")
        if parts[0] == "marker" and len(parts) == 2:
            pos = values.get(k + ".position", "suffix")
            if pos not in ("prefix", "suffix"):
                raise ValueError(f"{k}.position must be prefix or suffix")
            markers[parts[1]] = Marker(parts[1], tuple(normalize(e) for e in split_list(v)), pos)
    return QueryGrammar(lexicons, rules, tuple(split_list(values.get("entity_roles", ""))),
                        markers, float(values.get("corpus_marker_rate", 0.0)),
                        int(values.get("seed", 0)))


def _split_slots(body: str) -> list[str]:
    out, cur, quoted = [], "", False
    for ch in body.strip():
        if ch == '"':
            quoted = not quoted
            cur += ch
        elif ch.isspace() and not quoted:
            if cur:
                out.append(cur)
            cur = ""
        else:
            cur += ch
    if cur:
        out.append(cur)
    return out


def generate_queries(g: QueryGrammar, count: int, seed: int) -> list[list[tuple[str, str]]]:
    rng = np.random.default_rng([seed, 31337])
    tasks = sorted(g.markers)
    out = []
    for _ in range(count):
        words = g.derive(rng)
        if tasks and rng.random() < g.corpus_marker_rate:
            words = g.add_marker(words, tasks[rng.integers(len(tasks))], rng)
        out.append(words)
    return out


def generate_corpus(g: QueryGrammar, count: int, seed: Optional[int] = None) -> list[str]:
    """``count`` unlabeled queries, deterministic in (grammar, seed, count)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = g.seed if seed is None else seed
    return [" ".join(w for w, _ in q) for q in generate_queries(g, count, seed)]


def write_lines(lines, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --- labeled datasets -----------------------------------------------------------------


@dataclass
class Example:
    text: str
    label: object  # word tags (list[str]) | class id (int) | corrected text (str)


@dataclass
class LabeledSplits:
    task: str
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    name: str = ""

    def split(self, which: str) -> list[Example]:
        return getattr(self, which)


def _split_counts(counts) -> tuple[int, int, int]:
    if isinstance(counts, int):
        return counts, counts, counts
    a, b, c = counts
    return int(a), int(b), int(c)


def generate_labeled(g: QueryGrammar, task: str, counts, seed: int = 0, *,
                     marker: str = "media", positive_rate: float = 0.3,
                     vocab: Optional[Vocabulary] = None, edit_rate: float = 0.5) -> LabeledSplits:
    """Train/dev/test splits for one task with labels from the grammar itself.

    ``ner``: word-level BIO tags. ``binary_cls``: 1 iff a ``marker`` phrase was
    added. ``spell``: (typo query, clean query) where each word is edited with
    probability ``edit_rate`` and every edit keeps the word's token count under
    ``vocab`` (resampled up to 20 times, else the word is left intact).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "binary_cls" and marker not in g.markers:
        raise ValueError(f"grammar has no marker lexicon {marker!r}")
    if task == "spell" and vocab is None:
        raise ValueError("spell datasets need a vocabulary to keep token lengths fixed")
    rng = np.random.default_rng([seed, 271828, TASKS.index(task)])
    splits = []
    for n in _split_counts(counts):
        exs = []
        for _ in range(n):
            words = g.derive(rng)
            if task == "ner":
                exs.append(Example(" ".join(w for w, _ in words), [t for _, t in words]))
            elif task == "binary_cls":
                pos = bool(rng.random() < positive_rate)
                if pos:
                    words = g.add_marker(words, marker, rng)
                exs.append(Example(" ".join(w for w, _ in words), int(pos)))
            else:
                clean = [w for w, _ in words]
                noisy = [_typo(w, vocab, rng) if rng.random() < edit_rate else w for w in clean]
                exs.append(Example(" ".join(noisy), " ".join(clean)))
        splits.append(exs)
    return LabeledSplits(task, *splits, name=marker if task == "binary_cls" else task)


_ALPHA = string.ascii_lowercase


def _edit(word: str, rng: np.random.Generator) -> str:
    kind = rng.integers(4)
    i = int(rng.integers(len(word)))
    if kind == 0:  # substitute
        return word[:i] + _ALPHA[rng.integers(26)] + word[i + 1:]
    if kind == 1 and len(word) > 1:  # delete
        return word[:i] + word[i + 1:]
    if kind == 2:  # insert
        return word[:i] + _ALPHA[rng.integers(26)] + word[i:]
    if len(word) > 1:  # transpose
        i = min(i, len(word) - 2)
        return word[:i] + word[i + 1] + word[i] + word[i + 2:]
    return _ALPHA[rng.integers(26)]


def _typo(word: str, vocab: Vocabulary, rng: np.random.Generator, attempts: int = 20) -> str:
    want = len(encode(word, vocab))
    for _ in range(attempts):
        cand = _edit(word, rng)
        if cand != word and len(encode(cand, vocab)) == want:
            return cand
    return word


# --- labeled data file format -------------------------------------------------------


def format_example(task: str, ex: Example) -> str:
    if task == "ner":
        label = " ".join(ex.label)
    elif task == "binary_cls":
        label = str(int(ex.label))
    else:
        label = ex.label
    return f"{ex.text}\t{label}"


def parse_example(task: str, line: str) -> Example:
    text, sep, label = line.rstrip("\n").partition("\t")
    if not sep:
        raise ValueError(f"expected 'query<TAB>label', got {line!r}")
    if task == "ner":
        tags = label.split()
        if len(tags) != len(text.split()):
            raise ValueError(f"tag count {len(tags)} != word count in {text!r}")
        return Example(text, tags)
    if task == "binary_cls":
        return Example(text, int(label))
    return Example(text, label)


def write_labeled(data: LabeledSplits, directory) -> None:
    """One file per split: ``<dir>/{train,dev,test}.tsv`` plus a ``task`` marker file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "task").write_text(f"{data.task}\n{data.name}\n", encoding="utf-8")
    for which in ("train", "dev", "test"):
        write_lines([format_example(data.task, ex) for ex in data.split(which)], d / f"{which}.tsv")


def read_labeled(directory) -> LabeledSplits:
    d = Path(directory)
    task, _, name = (d / "task").read_text(encoding="utf-8").partition("\n")
    task = task.strip()
    splits = []
    for which in ("train", "dev", "test"):
        with open(d / f"{which}.tsv", encoding="utf-8") as fh:
            splits.append([parse_example(task, line) for line in fh if line.strip()])
    return LabeledSplits(task, *splits, name=name.strip() or task)
