"""Pre-norm transformer encoder with interchangeable task heads, plus checkpoint I/O.

Checkpoint byte layout (all integers little-endian)::

    magic        8 bytes   b"ETCPTCKP"
    version      u32       currently 1
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON: {"config": {...}, "heads": {...},
                 "dtype": "float32"|"float64", "extra": {...}}
    n_blocks     u32
    n_blocks x:
        name_len u16, name (UTF-8)
        ndim     u8,  dims (u32 each)
        data     prod(dims) little-endian floats of the stated dtype
    sha256       32 bytes  digest of everything before it
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"ETCPTCKP"
FORMAT_VERSION = 1
HEADS = ("mlm", "disc", "token_cls", "seq_cls", "vocab")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    ffn: int = 256
    heads: int = 4
    max_len: int = 128
    vocab_size: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if min(self.layers, self.hidden, self.ffn, self.heads, self.max_len, self.vocab_size) < 1:
            raise ValueError("encoder dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def body_key(self) -> tuple:
        """Fields the encoder body weights depend on."""
        return (self.layers, self.hidden, self.ffn, self.heads, self.max_len, self.vocab_size)


def head_width(cfg: EncoderConfig, head: str, size: Optional[int]) -> int:
    if head in ("mlm", "vocab"):
        return cfg.vocab_size
    if head == "disc":
        return 1
    if head in ("token_cls", "seq_cls"):
        if not size:
            raise ValueError(f"head {head!r} needs an output size")
        return int(size)
    raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")


@dataclass
class EncoderParams:
    """All weights, keyed by dotted name; heads live under ``head.<kind>.``."""

    config: EncoderConfig
    tensors: dict[str, Tensor]
    heads: dict[str, int] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def body_names(self) -> list[str]:
        return sorted(k for k in self.tensors if not k.startswith("head."))

    def has_head(self, head: str) -> bool:
        return head in self.heads

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config,
                             {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                              for k, v in self.tensors.items()},
                             dict(self.heads))

    def add_head(self, head: str, size: Optional[int] = None, seed: int = 0,
                 zero: bool = False) -> None:
        """Attach a freshly initialized head, replacing any existing one."""
        out = head_width(self.config, head, size)
        rng = np.random.default_rng([seed, 7919, HEADS.index(head)])
        dt = self.dtype
        w = np.zeros((self.config.hidden, out), dt) if zero else \
            (rng.standard_normal((self.config.hidden, out)) * 0.02).astype(dt)
        for k in [k for k in self.tensors if k.startswith(f"head.{head}.")]:
            del self.tensors[k]
        self.tensors[f"head.{head}.w"] = Tensor(w, requires_grad=True, name=f"head.{head}.w")
        self.tensors[f"head.{head}.b"] = Tensor(np.zeros(out, dt), requires_grad=True,
                                                name=f"head.{head}.b")
        self.heads[head] = out

    def drop_head(self, head: str) -> None:
        self.heads.pop(head, None)
        for k in [k for k in self.tensors if k.startswith(f"head.{head}.")]:
            del self.tensors[k]


def init_params(cfg: EncoderConfig, seed: int, heads: Optional[dict[str, Optional[int]]] = None,
                dtype=np.float64) -> EncoderParams:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains.

    A ``disc`` head is zero-initialized so a fresh discriminator starts at
    probability 0.5 everywhere.
    """
    rng = np.random.default_rng([seed, 104729])
    h, f = cfg.hidden, cfg.ffn

    def w(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    raw: dict[str, np.ndarray] = {
        "tok_emb": w(cfg.vocab_size, h),
        "pos_emb": w(cfg.max_len, h),
        "ln_f.g": np.ones(h, dtype), "ln_f.b": np.zeros(h, dtype),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        raw.update({
            p + "ln1.g": np.ones(h, dtype), p + "ln1.b": np.zeros(h, dtype),
            p + "qkv.w": w(h, 3 * h), p + "qkv.b": np.zeros(3 * h, dtype),
            p + "proj.w": w(h, h), p + "proj.b": np.zeros(h, dtype),
            p + "ln2.g": np.ones(h, dtype), p + "ln2.b": np.zeros(h, dtype),
            p + "ff1.w": w(h, f), p + "ff1.b": np.zeros(f, dtype),
            p + "ff2.w": w(f, h), p + "ff2.b": np.zeros(h, dtype),
        })
    params = EncoderParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})
    for head, size in (heads or {}).items():
        params.add_head(head, size, seed=seed, zero=(head == "disc"))
    return params


def pad_mask_from_lengths(lengths, max_len: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return np.arange(max_len)[None, :] < lengths[:, None]


def encoder_forward(p: EncoderParams, ids: np.ndarray, pad_mask: np.ndarray,
                    rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    """Hidden states ``[batch, len, hidden]`` for a padded id batch.

    ``pad_mask`` is True at real tokens. Keys at pad positions receive no
    attention weight. Dropout applies only when ``train`` is set.
    """
    cfg = p.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise T.ShapeError(f"ids must be [batch, len], got shape {ids.shape}")
    b, n = ids.shape
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError("token id outside the vocabulary")
    pad_mask = np.asarray(pad_mask, dtype=bool)
    rate = cfg.dropout if train else 0.0
    nh, hd = cfg.heads, cfg.hidden // cfg.heads
    key_mask = pad_mask[:, None, None, :]

    x = T.add(T.embedding(p["tok_emb"], ids), T.embedding(p["pos_emb"], np.arange(n)))
    x = T.dropout(x, rate, rng)
    for i in range(cfg.layers):
        q = f"layers.{i}."
        a = T.layer_norm(x, p[q + "ln1.g"], p[q + "ln1.b"])
        qkv = T.add(T.matmul(a, p[q + "qkv.w"]), p[q + "qkv.b"])
        qkv = T.transpose(T.reshape(qkv, (b, n, 3, nh, hd)), (2, 0, 3, 1, 4))
        qs = T.select(qkv, 0, axis=0)
        ks = T.select(qkv, 1, axis=0)
        vs = T.select(qkv, 2, axis=0)
        scores = T.scale(T.matmul(qs, T.transpose(ks, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.dropout(T.softmax(scores, key_mask), rate, rng)
        ctx = T.reshape(T.transpose(T.matmul(attn, vs), (0, 2, 1, 3)), (b, n, cfg.hidden))
        out = T.add(T.matmul(ctx, p[q + "proj.w"]), p[q + "proj.b"])
        x = T.add(x, T.dropout(out, rate, rng))
        a = T.layer_norm(x, p[q + "ln2.g"], p[q + "ln2.b"])
        ff = T.gelu(T.add(T.matmul(a, p[q + "ff1.w"]), p[q + "ff1.b"]))
        ff = T.add(T.matmul(ff, p[q + "ff2.w"]), p[q + "ff2.b"])
        x = T.add(x, T.dropout(ff, rate, rng))
    return T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def head_forward(p: EncoderParams, hidden: Tensor, head: str) -> Tensor:
    """Apply a task head.

    ``disc`` gives per-token probabilities ``[batch, len]``; ``seq_cls``
    gives logits from the position-0 state ``[batch, classes]``; the others
    give per-token logits ``[batch, len, out]``.
    """
    if head not in p.heads:
        raise KeyError(f"parameters have no {head!r} head (present: {sorted(p.heads)})")
    w, b = p[f"head.{head}.w"], p[f"head.{head}.b"]
    if head == "seq_cls":
        return T.add(T.matmul(T.select(hidden, 0, axis=1), w), b)
    logits = T.add(T.matmul(hidden, w), b)
    if head == "disc":
        bsz, n = hidden.shape[:2]
        return T.sigmoid(T.reshape(logits, (bsz, n)))
    return logits


# --- checkpoints ---------------------------------------------------------------------


def save_checkpoint(p: EncoderParams, path, extra: Optional[dict] = None) -> None:
    meta = {"config": asdict(p.config), "heads": p.heads, "dtype": str(p.dtype),
            "extra": extra or {}}
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_b)), meta_b,
             struct.pack("<I", len(p.tensors))]
    le = np.dtype(p.dtype).newbyteorder("<")
    for name in sorted(p.tensors):
        arr = p.tensors[name].data
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_checkpoint_meta(path) -> dict:
    return _parse(Path(path).read_bytes(), path)[0]


def _parse(blob: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 48 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    version, meta_len = struct.unpack_from("<II", body, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                     offset=off).reshape(shape).astype(meta["dtype"])
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return meta, arrays


def load_checkpoint(path, config: Optional[EncoderConfig] = None,
                    heads: Optional[dict[str, Optional[int]]] = None, seed: int = 0,
                    dtype=None) -> EncoderParams:
    """Load parameters, optionally adapting the head set.

    With ``config`` given, the stored body must match it (dropout may differ).
    With ``heads`` given, stored heads not listed are dropped and listed heads
    missing from the file (or of a different size) are freshly initialized.
    """
    try:
        meta, arrays = _parse(Path(path).read_bytes(), path)
    except (struct.error, ValueError, UnicodeDecodeError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    stored = EncoderConfig(**meta["config"])
    if config is not None and config.body_key() != stored.body_key():
        raise CheckpointError(f"incompatible checkpoint: body {stored} does not match {config}")
    cfg = config or stored
    dt = np.dtype(dtype) if dtype is not None else np.dtype(meta["dtype"])
    tensors = {k: Tensor(v.astype(dt, copy=False), requires_grad=True, name=k)
               for k, v in arrays.items()}
    params = EncoderParams(cfg, tensors, {k: int(v) for k, v in meta["heads"].items()})
    if heads is not None:
        for h in list(params.heads):
            if h not in heads:
                params.drop_head(h)
        for h, size in heads.items():
            want = head_width(cfg, h, size)
            if params.heads.get(h) != want:
                params.add_head(h, size, seed=seed, zero=(h == "disc"))
    return params
