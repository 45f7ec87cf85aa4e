import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import numpy as np
import pytest

from tip_micro import degrade, pipeline, procgen
from tip_micro.config import RunConfig, TextConfig
from tip_micro.errors import ModelError
from tip_micro.textenc import (
    BOS,
    EOS,
    PAD,
    SPECIALS,
    TextEncoder,
    Vocabulary,
    build_vocab,
    detokenize,
    encode,
    split_words,
    tokenize,
)


@pytest.fixture(scope="module")
def vocab():
    return pipeline.build_vocab_for(RunConfig())


def test_split_words_digit_level():
    assert split_words("3.0") == ["3", ".", "0"]
    assert split_words("Deblur with sigma 3.0") == ["deblur", "with", "sigma", "3", ".", "0"]
    assert split_words("Upsample to 6.0x") == ["upsample", "to", "6", ".", "0", "x"]
    assert split_words("a; b") == ["a", ";", "b"]


def test_vocab_covers_grammar_and_templates(vocab):
    for tok in ("deblur", "denoise", "upsample", "dejpeg", "sigma", "quality", "3", ".", ";", "x"):
        assert tok in vocab
    for word in procgen.caption_vocabulary(RunConfig().gen):
        assert word in vocab


def test_vocab_empty_corpus_minimal():
    v = build_vocab([])
    # Specials plus the always-present digit/punctuation characters.
    assert all(s in v for s in SPECIALS)
    assert all(not t.isalpha() or t == "x" for t in v.token_to_id if t not in SPECIALS)


def test_vocab_small(vocab):
    assert len(vocab) < 256


def test_vocab_json_roundtrip(vocab):
    again = Vocabulary.from_json(vocab.to_json())
    assert again.token_to_id == vocab.token_to_id


def test_tokenize_number(vocab):
    seq = tokenize("3.0", vocab, max_tokens=8)
    rev = vocab.id_to_token()
    toks = [rev[int(i)] for i in seq.ids]
    assert toks[:5] == [BOS, "3", ".", "0", EOS]
    assert toks[5:] == [PAD, PAD, PAD]
    assert seq.mask.tolist() == [True] * 5 + [False] * 3


def test_tokenize_empty(vocab):
    seq = tokenize("", vocab, max_tokens=4)
    rev = vocab.id_to_token()
    assert [rev[int(i)] for i in seq.ids] == [BOS, EOS, PAD, PAD]


def test_decode_roundtrip(vocab):
    seq = tokenize("Deblur with sigma 3.0", vocab)
    assert detokenize(seq.ids, vocab) == "deblur with sigma 3 . 0"


_GRAMMAR_VOCAB = pipeline.build_vocab_for(RunConfig())


@given(seed=st.integers(min_value=0, max_value=10**6))
@settings(max_examples=100, deadline=None)
def test_tokenization_injective_on_grammar(seed):
    vocab = _GRAMMAR_VOCAB
    rng = np.random.default_rng(seed)
    a = degrade.render_prompt(degrade.sample_spec(rng)).text
    b = degrade.render_prompt(degrade.sample_spec(rng)).text
    ta = tokenize(a, vocab).ids.tolist()
    tb = tokenize(b, vocab).ids.tolist()
    assert (ta == tb) == (a == b)


def test_encoder_determinism(vocab):
    torch.manual_seed(0)
    cfg = TextConfig(max_tokens=16, embed_dim=32, num_layers=1, num_heads=2)
    enc = TextEncoder(len(vocab), cfg)
    a = tokenize("", vocab, 16)
    b = tokenize("", vocab, 16)
    with torch.no_grad():
        ea, eb = encode(a, enc), encode(b, enc)
    assert torch.equal(ea, eb)
    assert ea.shape == (16, 32)


def test_encoder_causality(vocab):
    torch.manual_seed(1)
    cfg = TextConfig(max_tokens=16, embed_dim=32, num_layers=2, num_heads=2)
    enc = TextEncoder(len(vocab), cfg)
    seq1 = tokenize("deblur with sigma 3 . 0", vocab, 16)
    ids2 = seq1.ids.clone()
    k = 5
    ids2[k] = (ids2[k] + 1) % enc.vocab_size
    with torch.no_grad():
        e1 = enc(seq1.ids[None])[0]
        e2 = enc(ids2[None])[0]
    assert torch.equal(e1[:k], e2[:k])
    assert not torch.equal(e1[k:], e2[k:])


def test_encoder_rejects_out_of_range(vocab):
    cfg = TextConfig(max_tokens=8, embed_dim=32, num_layers=1, num_heads=2)
    enc = TextEncoder(len(vocab), cfg)
    bad = torch.full((1, 8), len(vocab), dtype=torch.int64)
    with pytest.raises(ModelError):
        enc(bad)


def test_encoder_finite_after_training_steps(vocab):
    # Short optimization smoke run; outputs must stay finite.
    torch.manual_seed(2)
    cfg = TextConfig(max_tokens=8, embed_dim=32, num_layers=1, num_heads=2)
    enc = TextEncoder(len(vocab), cfg)
    opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
    ids = torch.stack([tokenize("denoise with sigma 0.06", vocab, 8).ids for _ in range(4)])
    target = torch.randn(4, 8, 32)
    for _ in range(50):
        loss = ((enc(ids) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        out = enc(ids)
    assert torch.isfinite(out).all()
