"""WordPiece-style subword vocabulary: training, greedy longest-match encoding, decoding."""
from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
# Fixed order of special tokens at the head of every vocabulary file.
SPECIAL_TOKENS = (PAD, UNK, CLS, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class VocabularyError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase, strip accents, NFC-compose and collapse whitespace."""
    text = unicodedata.normalize("NFD", text.lower())
    text = "".join(ch for ch in text if unicodedata.category(ch) != "Mn")
    return " ".join(unicodedata.normalize("NFC", text).split())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    cls_id = property(lambda self: 2)
    mask_id = property(lambda self: 3)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))

    def serialize(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.serialize().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_bytes().decode("utf-8")
        if text and not text.endswith("\n"):
            raise VocabularyError(f"{path}: truncated vocabulary file")
        return cls(tuple(text.split("\n")[:-1]))


def _split_words(text: str) -> list[str]:
    return normalize(text).split()


def train_vocab(corpus: Iterable[str], target_size: int = 512, min_frequency: int = 2) -> Vocabulary:
    """Train a subword vocabulary.

    1. Alphabet: every word-initial character and every ``##``-prefixed
       continuation character seen at least ``min_frequency`` times.
    2. Whole words seen at least ``min_frequency`` times, most frequent first,
       while they fit in half of the remaining budget.
    3. Pair merges: repeatedly add the most frequent adjacent symbol pair
       until ``target_size`` is reached or no pair is frequent enough.

    Ties are broken by the lexicographic order of the candidate string.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(_split_words(line))
    if not word_counts:
        raise VocabularyError("empty corpus")

    char_counts: Counter[str] = Counter()
    for word, c in word_counts.items():
        char_counts[word[0]] += c
        for ch in word[1:]:
            char_counts[CONTINUATION + ch] += c
    alphabet = sorted(s for s, c in char_counts.items() if c >= min_frequency)
    if target_size <= len(SPECIAL_TOKENS) + len(alphabet):
        raise VocabularyError(
            f"target_size {target_size} must exceed specials + alphabet "
            f"({len(SPECIAL_TOKENS)} + {len(alphabet)})")

    vocab = list(SPECIAL_TOKENS) + alphabet
    known = set(vocab)
    whole = sorted((w for w, c in word_counts.items() if c >= min_frequency and len(w) > 1),
                   key=lambda w: (-word_counts[w], w))
    for w in whole[: (target_size - len(vocab)) // 2]:
        vocab.append(w)
        known.add(w)
    # words as symbol lists; sorted for order independence
    words = {w: [w[0]] + [CONTINUATION + ch for ch in w[1:]] for w in sorted(word_counts)}

    while len(vocab) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, syms in words.items():
            c = word_counts[w]
            for a, b in zip(syms, syms[1:]):
                if a in known and b in known:
                    pairs[(a, b)] += c
        best = None
        for (a, b), c in pairs.items():
            merged = a + b[len(CONTINUATION):]
            key = (-c, merged)
            if merged not in known and (best is None or key < best[0]):
                best = (key, a, b, merged)
        if best is None or -best[0][0] < min_frequency:
            break
        _, a, b, merged = best
        vocab.append(merged)
        known.add(merged)
        for w, syms in words.items():
            i, out = 0, []
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
    return Vocabulary(tuple(vocab))


def _encode_word(word: str, v: Vocabulary) -> list[int]:
    if word == UNK:
        return [v.unk_id]
    if len(word) > MAX_WORD_CHARS:
        return [v.unk_id]
    ids, start = [], 0
    while start < len(word):
        end = len(word)
        hit = None
        while start < end:
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            tid = v.index.get(piece)
            if tid is not None and tid >= len(SPECIAL_TOKENS):
                hit = tid
                break
            end -= 1
        if hit is None:
            return [v.unk_id]
        ids.append(hit)
        start = end
    return ids


def encode(text: str, v: Vocabulary) -> list[int]:
    """Greedy longest-match segmentation of the normalized text.

    A word that cannot be fully segmented becomes a single unknown token.
    The literal ``[UNK]`` (as produced by :func:`decode`) maps back to it.
    """
    ids: list[int] = []
    for raw in text.split():
        if raw == UNK:
            ids.append(v.unk_id)
            continue
        for word in _split_words(raw):
            ids.extend(_encode_word(word, v))
    return ids


def decode(ids: Iterable[int], v: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < v.size:
            raise VocabularyError(f"invalid id {i} for vocabulary of size {v.size}")
        tok = v.tokens[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def read_corpus(path) -> list[str]:
    """One query per line, UTF-8; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
