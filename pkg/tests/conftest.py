import numpy as np
import pytest

from etcpt.encoder import EncoderConfig, init_params, save_checkpoint
from etcpt.synthetic import generate_corpus, load_grammar
from etcpt.tokenizer import encode, train_vocab


@pytest.fixture(scope="session")
def grammar():
    return load_grammar()


@pytest.fixture(scope="session")
def corpus(grammar):
    return generate_corpus(grammar, 3000, seed=11)


@pytest.fixture(scope="session")
def vocab(corpus):
    return train_vocab(corpus, 512, 2)


@pytest.fixture(scope="session")
def seqs(corpus, vocab):
    return [encode(q, vocab) for q in corpus]


@pytest.fixture(scope="session")
def tiny_cfg(vocab):
    return EncoderConfig(layers=1, hidden=16, ffn=32, heads=2, max_len=32,
                         vocab_size=vocab.size, dropout=0.0)


@pytest.fixture(scope="session")
def generator_ckpt(tmp_path_factory, tiny_cfg):
    path = tmp_path_factory.mktemp("gen") / "gen.ckpt"
    save_checkpoint(init_params(tiny_cfg, 5, heads={"mlm": None}, dtype=np.float64), path)
    return str(path)


# --- acceptance summary ----------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
