"""Generator fill, pre-training losses, RAdam, the cosine schedule and the stage loops."""
from __future__ import annotations

import logging
import math
import queue
import threading
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .corruption import (
    build_etc_example,
    build_mlm_example,
    sample_etc_gaps,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encoder_forward,
    head_forward,
    init_params,
    load_checkpoint,
)
from .tensor import Tape, Tensor
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

STAGES = ("mlm", "etc", "electra")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


class DivergenceError(RuntimeError):
    pass


def derive_rng(seed: int, stage: str, worker: int = 0) -> np.random.Generator:
    """Independent stream for (run seed, stage name, worker index)."""
    return np.random.default_rng([int(seed), zlib.crc32(stage.encode("utf-8")), int(worker)])


# --- generator -----------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int, cls_id: Optional[int] = None,
              labels: Optional[Sequence[Sequence[int]]] = None, label_pad: int = 0):
    """Right-pad a batch, optionally prepending ``[CLS]`` to every row.

    Returns ``(ids, pad_mask, label_array, label_mask)``; the label mask is
    True only at positions that carry a real token (never at ``[CLS]``).
    """
    off = 0 if cls_id is None else 1
    width = max((len(s) for s in seqs), default=0) + off
    b = len(seqs)
    ids = np.full((b, width), pad_id, dtype=np.int64)
    pad_mask = np.zeros((b, width), dtype=bool)
    lab = np.full((b, width), label_pad, dtype=np.int64)
    lab_mask = np.zeros((b, width), dtype=bool)
    for i, s in enumerate(seqs):
        if off:
            ids[i, 0] = cls_id
        ids[i, off:off + len(s)] = s
        pad_mask[i, :off + len(s)] = True
        lab_mask[i, off:off + len(s)] = True
        if labels is not None:
            lab[i, off:off + len(s)] = labels[i]
    return ids, pad_mask, lab, lab_mask


@dataclass
class Generator:
    """A frozen masked language model used to fill ``[MASK]`` slots."""

    params: EncoderParams
    vocab: Vocabulary
    fill_mode: str = "sample"
    temperature: float = 1.0
    frozen: bool = True

    def __post_init__(self):
        if not self.params.has_head("mlm"):
            raise ValueError("generator parameters have no mlm head")
        if self.fill_mode not in ("sample", "argmax"):
            raise ValueError(f"fill_mode must be 'sample' or 'argmax', got {self.fill_mode!r}")
        if self.frozen:
            for t in self.params.tensors.values():
                t.requires_grad = False

    def mask_logits(self, templates: Sequence[Sequence[int]]) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """MLM logits at every mask slot, specials excluded (set to -inf)."""
        v = self.vocab
        ids, pad_mask, _, _ = pad_batch(templates, v.pad_id, v.cls_id)
        where = [(i, j) for i, s in enumerate(templates) for j, t in enumerate(s) if t == v.mask_id]
        if not where:
            return np.zeros((0, v.size)), where
        hidden = encoder_forward(self.params, ids, pad_mask, train=False)
        rows = hidden.data[[i for i, _ in where], [j + 1 for _, j in where]]
        logits = rows @ self.params["head.mlm.w"].data + self.params["head.mlm.b"].data
        logits = logits.astype(np.float64)
        logits[:, list(v.special_ids)] = -np.inf
        return logits, where

    def fill(self, templates: Sequence[Sequence[int]], rng: Optional[np.random.Generator]) -> list[list[int]]:
        """Replace each mask slot by a sampled (or argmax) token; other slots untouched."""
        out = [list(map(int, s)) for s in templates]
        logits, where = self.mask_logits(templates)
        if not where:
            return out
        if self.fill_mode == "argmax":
            picks = logits.argmax(axis=1)
        else:
            z = logits / self.temperature
            z -= z.max(axis=1, keepdims=True)
            prob = np.exp(z)
            cdf = np.cumsum(prob, axis=1)
            u = rng.random(len(where)) * cdf[:, -1]
            picks = np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1)
            # never land on an excluded slot through rounding at the boundary
            bad = ~np.isfinite(logits[np.arange(len(picks)), picks])
            picks[bad] = logits[bad].argmax(axis=1)
        for (i, j), tok in zip(where, picks):
            out[i][j] = int(tok)
        return out

    def fill_fn(self, rng) -> Callable[[list[list[int]]], list[list[int]]]:
        return lambda templates: self.fill(templates, rng)


def generator_fill(g: Generator, x_temp: Sequence[int], rng=None) -> list[int]:
    return g.fill([x_temp], rng)[0]


# --- losses ---------------------------------------------------------------------------


def disc_loss(d_probs: Tensor, y: np.ndarray, mask: np.ndarray,
              diagnostics: Optional[dict] = None) -> Tensor:
    """Binary cross-entropy over every real token position, averaged per position."""
    return T.binary_cross_entropy(d_probs, y, mask, diagnostics)


def mlm_loss(logits: Tensor, targets: np.ndarray, mask_positions: np.ndarray) -> Tensor:
    """Cross-entropy at masked positions only; 0 when nothing is masked."""
    return T.cross_entropy(logits, targets, mask_positions)


# --- optimizer and schedule -----------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def rectification(t: int, beta2: float) -> tuple[float, Optional[float]]:
    """``(rho_t, r_t)``; ``r_t`` is None while the variance is not yet tractable (rho_t <= 4)."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return rho_t, None
    r = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                  / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    return rho_t, r


@dataclass
class RAdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "RAdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def radam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
               state: RAdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0, decay_mask: Optional[Sequence[bool]] = None) -> RAdamState:
    """One in-place rectified Adam update with decoupled weight decay.

    ``state.step`` is incremented first, so the first call uses t = 1.
    """
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("divergence: non-finite gradient")
    b1, b2 = betas
    state.step += 1
    t = state.step
    _, r = rectification(t, b2)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and (decay_mask is None or decay_mask[k]):
            p *= 1.0 - lr * weight_decay
        m_hat = m / bc1
        if r is None:
            p -= lr * m_hat
        else:
            p -= lr * r * m_hat * math.sqrt(bc2) / (np.sqrt(v) + eps)
    return state


def clip_global_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= s
    return total


class Optimizer:
    """RAdam over an :class:`EncoderParams`; 1-D tensors (biases, gains) are not decayed."""

    def __init__(self, params: EncoderParams, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0, clip_norm: float = 1.0):
        self.params = params
        self.names = sorted(k for k, t in params.tensors.items() if t.requires_grad)
        arrays = [params[k].data for k in self.names]
        self.state = RAdamState.zeros(arrays)
        self.decay_mask = [a.ndim >= 2 for a in arrays]
        self.betas, self.eps = betas, eps
        self.weight_decay, self.clip_norm = weight_decay, clip_norm

    def zero_grad(self) -> None:
        for k in self.names:
            self.params[k].grad = None

    def step(self, lr: float) -> float:
        ts = [self.params[k] for k in self.names]
        grads = [t.grad for t in ts]
        for g in grads:
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError("divergence: non-finite gradient")
        norm = clip_global_norm(grads, self.clip_norm)
        radam_step([t.data for t in ts], grads, self.state, lr, self.betas, self.eps,
                   self.weight_decay, self.decay_mask)
        return norm


# --- training configuration and loops -----------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "mlm"
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    p_or_rate: float = 0.15
    seed: int = 0
    precision: str = "float32"
    init_checkpoint: Optional[str] = None
    eval_every: int = 100
    clip_norm: float = 1.0
    fill_mode: str = "sample"
    temperature: float = 1.0
    prefetch: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.p_or_rate <= 1.0:
            raise ValueError("p_or_rate must be in [0, 1]")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class PretrainResult:
    params: EncoderParams
    losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)
    wasted: int = 0
    queries: int = 0
    diagnostics: dict = field(default_factory=dict)
    generator_digest: Optional[tuple[str, str]] = None


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of batches drawn by per-epoch shuffling."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def prefetch(it: Iterable, enabled: bool) -> Iterator:
    """Build the next batch on a worker thread while the current step runs (one-deep)."""
    if not enabled:
        yield from it
        return
    q: queue.Queue = queue.Queue(maxsize=1)
    done = object()

    def work():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def _convert(params: EncoderParams, dtype) -> EncoderParams:
    for t in params.tensors.values():
        if t.data.dtype != dtype:
            t.data = t.data.astype(dtype)
    return params


def _train(params: EncoderParams, cfg: TrainConfig, batches: Iterator, loss_fn,
           on_log: Optional[Callable[[str], None]], result: PretrainResult) -> PretrainResult:
    opt = Optimizer(params, cfg.betas, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    drop_rng = derive_rng(cfg.seed, cfg.stage + "/dropout")
    t0 = time.perf_counter()
    window: list[float] = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        batch = next(batches)
        opt.zero_grad()
        with Tape() as tape:
            loss = loss_fn(batch, drop_rng)
        T.backward(loss, tape)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"divergence: loss {value} at step {step}")
        opt.step(lr)
        result.losses.append(value)
        window.append(value)
        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            line = (f"step={step + 1} stage={cfg.stage} loss={np.mean(window):.6f} lr={lr:.6g} "
                    f"wasted={result.wasted} time={time.perf_counter() - t0:.2f}")
            window = []
            result.log_lines.append(line)
            if on_log:
                on_log(line)
    result.params = params
    return result


def tokenized(corpus: Sequence[Sequence[int]]) -> list[list[int]]:
    seqs = [list(map(int, s)) for s in corpus if len(s)]
    if not seqs:
        raise ValueError("corpus empty")
    return seqs


def pretrain_mlm(cfg: TrainConfig, corpus: Sequence[Sequence[int]], vocab: Vocabulary,
                 encoder_cfg: Optional[EncoderConfig] = None,
                 on_log: Optional[Callable[[str], None]] = None) -> PretrainResult:
    """Masked language modeling; from scratch, or continued from ``cfg.init_checkpoint``."""
    seqs = tokenized(corpus)
    if cfg.init_checkpoint:
        params = load_checkpoint(cfg.init_checkpoint, encoder_cfg, heads={"mlm": None},
                                 seed=cfg.seed, dtype=cfg.dtype)
    else:
        ecfg = encoder_cfg or EncoderConfig(vocab_size=vocab.size)
        params = init_params(ecfg, cfg.seed, heads={"mlm": None}, dtype=cfg.dtype)
    if params.config.vocab_size != vocab.size:
        raise ValueError("encoder vocab_size does not match the vocabulary")
    max_tokens = params.config.max_len - 1
    seqs = [s[:max_tokens] for s in seqs]
    tag = "mlm-continued" if cfg.init_checkpoint else "mlm"
    data_rng = derive_rng(cfg.seed, tag + "/data")
    mask_rng = derive_rng(cfg.seed, tag + "/corrupt")
    result = PretrainResult(params)

    def make_batches():
        for idx in batch_indices(len(seqs), cfg.batch_size, data_rng):
            exs = [build_mlm_example(seqs[i], cfg.p_or_rate, mask_rng, vocab.mask_id) for i in idx]
            tgt = [[t if s else 0 for t, s in zip(seqs[i], e.mask_positions)] for i, e in zip(idx, exs)]
            ids, pad_mask, targets, _ = pad_batch([e.x_mask for e in exs], vocab.pad_id,
                                                  vocab.cls_id, tgt)
            _, _, sel, _ = pad_batch([e.x_mask for e in exs], vocab.pad_id, vocab.cls_id,
                                     [e.mask_positions for e in exs])
            yield ids, pad_mask, targets, sel.astype(bool), sum(e.wasted for e in exs), len(exs)

    def loss_fn(batch, rng):
        ids, pad_mask, targets, sel, wasted, count = batch
        result.wasted += wasted
        result.queries += count
        hidden = encoder_forward(params, ids, pad_mask, rng=rng, train=True)
        rows, cols = np.nonzero(sel)
        if not len(rows):
            return mlm_loss(head_forward(params, hidden, "mlm"), targets, sel)
        # the vocabulary-sized head only runs where a loss is taken
        picked = T.gather_positions(hidden, rows, cols)
        logits = T.add(T.matmul(picked, params["head.mlm.w"]), params["head.mlm.b"])
        return mlm_loss(logits, targets[rows, cols], np.ones(len(rows), dtype=bool))

    return _train(params, cfg, prefetch(make_batches(), cfg.prefetch), loss_fn, on_log, result)


def load_generator(path, vocab: Vocabulary, fill_mode: str = "sample",
                   temperature: float = 1.0) -> Generator:
    params = load_checkpoint(path, heads={"mlm": None})
    if not params.has_head("mlm"):
        raise ValueError("generator checkpoint lacks an mlm head")
    return Generator(params, vocab, fill_mode, temperature, frozen=True)


def _discriminator_from(generator_checkpoint, cfg: TrainConfig) -> EncoderParams:
    return load_checkpoint(generator_checkpoint, heads={"disc": None}, seed=cfg.seed,
                           dtype=cfg.dtype)


def _rtd_loop(cfg: TrainConfig, corpus, vocab: Vocabulary, generator_checkpoint,
              build, on_log) -> PretrainResult:
    """Shared loop for the two discriminator stages (ETC and ELECTRA)."""
    if generator_checkpoint is None:
        raise ValueError("missing generator checkpoint")
    seqs = tokenized(corpus)
    gen = load_generator(generator_checkpoint, vocab, cfg.fill_mode, cfg.temperature)
    if gen.params.config.vocab_size != vocab.size:
        raise ValueError("generator vocab_size does not match the vocabulary")
    before = gen.params.digest()
    params = _discriminator_from(generator_checkpoint, cfg)
    max_tokens = params.config.max_len - 1
    seqs = [s[:max_tokens] for s in seqs]
    data_rng = derive_rng(cfg.seed, cfg.stage + "/data")
    corrupt_rng = derive_rng(cfg.seed, cfg.stage + "/corrupt")
    fill_rng = derive_rng(cfg.seed, cfg.stage + "/fill")
    result = PretrainResult(params)
    diag: dict = {"clamped": 0}
    result.diagnostics = diag

    def make_batches():
        for idx in batch_indices(len(seqs), cfg.batch_size, data_rng):
            xs, ys = build([seqs[i] for i in idx], gen, corrupt_rng, fill_rng, max_tokens)
            ids, pad_mask, y, lab_mask = pad_batch(xs, vocab.pad_id, vocab.cls_id, ys)
            yield ids, pad_mask, y, lab_mask

    def loss_fn(batch, rng):
        ids, pad_mask, y, lab_mask = batch
        result.queries += len(ids)
        result.wasted += int((lab_mask.sum(axis=1) == 0).sum())
        hidden = encoder_forward(params, ids, pad_mask, rng=rng, train=True)
        return disc_loss(head_forward(params, hidden, "disc"), y, lab_mask, diag)

    _train(params, cfg, prefetch(make_batches(), cfg.prefetch), loss_fn, on_log, result)
    result.generator_digest = (before, gen.params.digest())
    return result


def build_etc_batch(seqs, gen: Generator, corrupt_rng, fill_rng, max_tokens: int, p: float):
    """Extended queries and insertion labels for a batch, with one batched generator pass."""
    mask_id = gen.vocab.mask_id
    temps, ys = [], []
    for s in seqs:
        m = sample_etc_gaps(len(s), p, corrupt_rng, max_tokens)
        ex = build_etc_example(s, m, mask_id)
        temps.append(ex.x_extend)
        ys.append(ex.y)
    return gen.fill(temps, fill_rng), ys


def build_electra_batch(seqs, gen: Generator, corrupt_rng, fill_rng, max_tokens: int, rate: float):
    mask_id = gen.vocab.mask_id
    masked = [build_mlm_example(s, rate, corrupt_rng, mask_id) for s in seqs]
    filled = gen.fill([e.x_mask for e in masked], fill_rng)
    ys = [[int(a != b) for a, b in zip(f, s)] for f, s in zip(filled, seqs)]
    return filled, ys


def pretrain_etc(cfg: TrainConfig, corpus, vocab: Vocabulary, generator_checkpoint,
                 on_log: Optional[Callable[[str], None]] = None) -> PretrainResult:
    """Train a discriminator to spot generator-filled insertions; the generator stays frozen."""
    cfg = replace(cfg, stage="etc")

    def build(seqs, gen, crng, frng, max_tokens):
        return build_etc_batch(seqs, gen, crng, frng, max_tokens, cfg.p_or_rate)
    return _rtd_loop(cfg, corpus, vocab, generator_checkpoint, build, on_log)


def pretrain_electra(cfg: TrainConfig, corpus, vocab: Vocabulary, generator_checkpoint,
                     on_log: Optional[Callable[[str], None]] = None) -> PretrainResult:
    """Replaced-token detection with a frozen generator (length-preserving)."""
    cfg = replace(cfg, stage="electra")

    def build(seqs, gen, crng, frng, max_tokens):
        return build_electra_batch(seqs, gen, crng, frng, max_tokens, cfg.p_or_rate)
    return _rtd_loop(cfg, corpus, vocab, generator_checkpoint, build, on_log)


def discriminator_accuracy(params: EncoderParams, gen: Generator, seqs, p: float, seed: int,
                           batch_size: int = 64) -> tuple[float, float]:
    """Token accuracy of the discriminator on freshly extended queries.

    Returns ``(accuracy, majority_baseline)`` where the baseline always
    predicts "original".
    """
    crng = derive_rng(seed, "etc-eval/corrupt")
    frng = derive_rng(seed, "etc-eval/fill")
    max_tokens = params.config.max_len - 1
    correct = total = positives = 0
    for i in range(0, len(seqs), batch_size):
        xs, ys = build_etc_batch(seqs[i:i + batch_size], gen, crng, frng, max_tokens, p)
        ids, pad_mask, y, lab_mask = pad_batch(xs, gen.vocab.pad_id, gen.vocab.cls_id, ys)
        probs = head_forward(params, encoder_forward(params, ids, pad_mask), "disc").data
        pred = probs > 0.5
        correct += int(((pred == y.astype(bool)) & lab_mask).sum())
        total += int(lab_mask.sum())
        positives += int((y.astype(bool) & lab_mask).sum())
    return correct / total, max(positives, total - positives) / total
