"""Pre-training example builders: ETC insertion, MLM masking, ELECTRA replacement.

A query of ``n`` tokens has ``n + 1`` gaps: gap 0 precedes the first token,
gap ``i`` sits between tokens ``i`` and ``i + 1`` and gap ``n`` follows the
last token. ETC inserts at most one ``[MASK]`` per selected gap; the labels
are taken from the template, before any generator fill.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

# fill(templates) -> filled sequences; each template is a list of ids that
# may contain mask_id and every mask position must be replaced.
FillFn = Callable[[list[list[int]]], list[list[int]]]


@dataclass(frozen=True)
class EtcExample:
    x_extend: list[int]
    y: list[int]
    m: list[int]
    x_temp_masked_positions: list[int]


@dataclass(frozen=True)
class MlmExample:
    x_mask: list[int]
    targets: list[int]
    mask_positions: list[int]

    @property
    def wasted(self) -> bool:
        """True when no position was masked, so the query adds no loss term."""
        return not any(self.mask_positions)


@dataclass(frozen=True)
class ElectraExample:
    x_replace: list[int]
    y: list[int]


def _check_prob(p: float, what: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{what} must be in [0, 1], got {p}")


def sample_gap_positions(n: int, p: float, rng: np.random.Generator) -> list[int]:
    """Independent Bernoulli(p) selection of each of the ``n + 1`` gaps."""
    _check_prob(p, "p")
    if n < 1:
        raise ValueError(f"query must have at least one token, got n={n}")
    return (rng.random(n + 1) < p).astype(int).tolist()


def build_etc_template(x: Sequence[int], m: Sequence[int], mask_id: int) -> list[int]:
    if len(m) != len(x) + 1:
        raise ValueError(f"gap mask length {len(m)} != n + 1 = {len(x) + 1}")
    out: list[int] = []
    for i, tok in enumerate(x):
        if m[i]:
            out.append(mask_id)
        out.append(int(tok))
    if m[len(x)]:
        out.append(mask_id)
    return out


def build_etc_labels(x_temp: Sequence[int], mask_id: int) -> list[int]:
    return [int(t == mask_id) for t in x_temp]


def build_etc_example(x: Sequence[int], m: Sequence[int], mask_id: int,
                      fill: Optional[FillFn] = None) -> EtcExample:
    """Template, labels and (optionally) the generator fill for one query."""
    temp = build_etc_template(x, m, mask_id)
    y = build_etc_labels(temp, mask_id)
    filled = fill([temp])[0] if fill is not None and any(y) else temp
    return EtcExample(list(filled), y, list(m), [i for i, v in enumerate(y) if v])


def sample_etc_gaps(n: int, p: float, rng: np.random.Generator, max_tokens: int) -> list[int]:
    """Gap mask whose extended length fits ``max_tokens``.

    An overlong draw is resampled once; if that also overflows, selected
    gaps are dropped from the right until the extension fits.
    """
    if n > max_tokens:
        raise ValueError(f"query of {n} tokens already exceeds {max_tokens}")
    m = sample_gap_positions(n, p, rng)
    if n + sum(m) <= max_tokens:
        return m
    m = sample_gap_positions(n, p, rng)
    for i in range(n, -1, -1):
        if n + sum(m) <= max_tokens:
            break
        m[i] = 0
    return m


def build_mlm_example(x: Sequence[int], rate: float, rng: np.random.Generator,
                      mask_id: int) -> MlmExample:
    """Replace each token by ``[MASK]`` independently with probability ``rate``."""
    _check_prob(rate, "rate")
    sel = (rng.random(len(x)) < rate).astype(int).tolist()
    x_mask = [mask_id if s else int(t) for t, s in zip(x, sel)]
    targets = [int(t) for t, s in zip(x, sel) if s]
    return MlmExample(x_mask, targets, sel)


def build_electra_example(x: Sequence[int], rate: float, fill: FillFn,
                          rng: np.random.Generator, mask_id: int) -> ElectraExample:
    """Mask-then-fill in place; a position is labeled 1 only if its token changed."""
    mlm = build_mlm_example(x, rate, rng, mask_id)
    filled = fill([mlm.x_mask])[0] if mlm.targets else list(mlm.x_mask)
    y = [int(a != int(b)) for a, b in zip(filled, x)]
    return ElectraExample(list(filled), y)


def format_dump_record(original: str, template: str, extended: str, y: Sequence[int]) -> str:
    """One ``corrupt-dump`` line: original, template, extended query, label string."""
    return "\t".join([original, template, extended, "".join(str(int(v)) for v in y)])
