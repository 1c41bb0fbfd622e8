import numpy as np
import pytest

import etcpt.tensor as T
from etcpt.encoder import (
    CheckpointError,
    EncoderConfig,
    encoder_forward,
    head_forward,
    init_params,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
)
from etcpt.tensor import Tensor, grad_check

CFG = EncoderConfig(layers=2, hidden=16, ffn=24, heads=4, max_len=12, vocab_size=30, dropout=0.1)


def batch(rows, width=None):
    width = width or max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = True
    return ids, mask


def test_init_deterministic_and_seeded():
    a, b, c = init_params(CFG, 1), init_params(CFG, 1), init_params(CFG, 2)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert np.all(a["layers.0.ln1.g"].data == 1) and np.all(a["layers.0.qkv.b"].data == 0)
    assert abs(a["tok_emb"].data.std() - 0.02) < 0.004


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(hidden=10, heads=4)


def test_pad_row_does_not_change_real_row():
    p = init_params(CFG, 0)
    single = encoder_forward(p, *batch([[5, 6, 7]])).data
    ids, mask = batch([[5, 6, 7], []], width=3)
    both = encoder_forward(p, ids, mask).data
    assert np.max(np.abs(both[0] - single[0])) < 1e-6
    wider = encoder_forward(p, *batch([[5, 6, 7]], width=6)).data
    assert np.max(np.abs(wider[0, :3] - single[0])) < 1e-6


def test_batch_permutation_equivariant():
    p = init_params(CFG, 0)
    rows = [[1, 2, 3], [4, 5], [9, 8, 7, 6]]
    out = encoder_forward(p, *batch(rows)).data
    perm = [2, 0, 1]
    out_p = encoder_forward(p, *batch([rows[i] for i in perm])).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_eval_mode_deterministic_train_mode_uses_rng():
    p = init_params(CFG, 0)
    ids, mask = batch([[1, 2, 3]])
    assert np.array_equal(encoder_forward(p, ids, mask).data, encoder_forward(p, ids, mask).data)
    a = encoder_forward(p, ids, mask, rng=np.random.default_rng(1), train=True).data
    b = encoder_forward(p, ids, mask, rng=np.random.default_rng(1), train=True).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, encoder_forward(p, ids, mask).data)


def test_attention_rows_sum_to_one_over_real_keys():
    rng = np.random.default_rng(0)
    scores = Tensor(rng.normal(size=(2, 4, 5, 5)))
    pad = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    attn = T.softmax(scores, pad[:, None, None, :]).data
    assert np.max(np.abs(attn.sum(-1) - 1)) < 1e-10
    assert np.all(attn[0, ..., 3:] == 0)


def test_errors():
    p = init_params(CFG, 0)
    with pytest.raises(ValueError, match="exceeds max_len"):
        encoder_forward(p, *batch([list(range(1, 14))]))
    with pytest.raises(IndexError):
        encoder_forward(p, *batch([[1, 30]]))
    with pytest.raises(KeyError):
        head_forward(p, encoder_forward(p, *batch([[1]])), "disc")


def test_heads():
    p = init_params(CFG, 0, heads={"disc": None, "seq_cls": 3, "vocab": None, "mlm": None,
                                   "token_cls": 5})
    ids, mask = batch([[1, 2, 3], [4, 5]])
    h = encoder_forward(p, ids, mask)
    probs = head_forward(p, h, "disc").data
    assert probs.shape == (2, 3) and np.all(probs == 0.5)
    assert head_forward(p, h, "vocab").shape == (2, 3, 30)
    assert head_forward(p, h, "mlm").shape == (2, 3, 30)
    assert head_forward(p, h, "token_cls").shape == (2, 3, 5)
    base = head_forward(p, h, "seq_cls").data
    perturbed = h.data.copy()
    perturbed[:, 1:] += 100.0
    np.testing.assert_array_equal(head_forward(p, Tensor(perturbed), "seq_cls").data, base)
    assert base.shape == (2, 3)


def test_end_to_end_gradient_tiny():
    cfg = EncoderConfig(layers=1, hidden=8, ffn=8, heads=2, max_len=4, vocab_size=6, dropout=0.0)
    p = init_params(cfg, 3, heads={"disc": None})
    rng = np.random.default_rng(0)
    p["head.disc.w"].data[:] = rng.normal(0, 0.5, p["head.disc.w"].shape)
    ids, mask = batch([[1, 4]])
    y = np.array([[1, 0]])
    for name in ("tok_emb", "layers.0.qkv.w", "layers.0.ff1.w", "layers.0.ln1.g", "head.disc.w"):
        def f(w, name=name):
            p.tensors[name] = w
            probs = head_forward(p, encoder_forward(p, ids, mask), "disc")
            return T.binary_cross_entropy(probs, y, mask)
        x = Tensor(p[name].data.copy())
        # scale up the weights so the check exercises non-trivial curvature
        x.data *= 10.0
        assert grad_check(f, x) < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    p = init_params(CFG, 4, heads={"mlm": None}, dtype=np.float32)
    path = tmp_path / "a.ckpt"
    save_checkpoint(p, path, extra={"note": "x"})
    q = load_checkpoint(path)
    assert q.digest() == p.digest() and q.dtype == np.float32
    assert q.heads == p.heads and q.config == p.config
    ids, mask = batch([[1, 2, 3]])
    assert np.array_equal(head_forward(p, encoder_forward(p, ids, mask), "mlm").data,
                          head_forward(q, encoder_forward(q, ids, mask), "mlm").data)
    assert read_checkpoint_meta(path)["extra"] == {"note": "x"}
    raw = path.read_bytes()
    assert raw[:8] == b"ETCPTCKP"


def test_load_into_discriminator(tmp_path):
    p = init_params(CFG, 4, heads={"mlm": None})
    path = tmp_path / "g.ckpt"
    save_checkpoint(p, path)
    d = load_checkpoint(path, CFG, heads={"disc": None})
    assert set(d.heads) == {"disc"}
    for name in p.body_names():
        assert np.array_equal(d[name].data, p[name].data)
    assert np.all(d["head.disc.w"].data == 0)
    assert "head.mlm.w" not in d.tensors


def test_checkpoint_errors(tmp_path):
    p = init_params(CFG, 4)
    path = tmp_path / "a.ckpt"
    save_checkpoint(p, path)
    with pytest.raises(CheckpointError, match="incompatible checkpoint"):
        load_checkpoint(path, EncoderConfig(layers=1, hidden=16, ffn=24, heads=4, max_len=12, vocab_size=30))
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[200] ^= 1
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "f.ckpt")
    (tmp_path / "j.ckpt").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "j.ckpt")
