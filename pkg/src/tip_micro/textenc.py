"""Word-level tokenizer with per-character numerals, and a small causal
transformer encoder producing contextualized prompt embeddings.

Numeric literals are split character by character ("3.0" -> "3", ".", "0")
so the encoder can expose digit-level strength information to downstream
cross-attention. One encoder serves both semantic and restoration prompts;
it is trained jointly with the backbone and then frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .config import TextConfig
from .errors import ModelError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)


def split_words(text: str) -> list[str]:
    """Lowercase and split; digits and punctuation become single characters."""
    out: list[str] = []
    for word in text.lower().split():
        run = ""
        for ch in word:
            if ch.isalpha():
                run += ch
            else:
                if run:
                    out.append(run)
                    run = ""
                out.append(ch)
        if run:
            out.append(run)
    return out


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_to_token(self) -> dict[int, str]:
        return {i: t for t, i in self.token_to_id.items()}

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(token_to_id=json.loads(payload))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def build_vocab(corpus) -> Vocabulary:
    """Collect word tokens from ``corpus``; digits and '.'/';' are always in."""
    tokens = set("0123456789.;,x")
    for text in corpus:
        tokens.update(split_words(text))
    table = {}
    for i, tok in enumerate(SPECIALS):
        table[tok] = i
    for tok in sorted(tokens):
        table[tok] = len(table)
    return Vocabulary(table)


@dataclass
class TokenSequence:
    ids: torch.Tensor  # (M,) int64, padded
    mask: torch.Tensor  # (M,) bool, True on real tokens (incl. BOS/EOS)


def tokenize(text: str, vocab: Vocabulary, max_tokens: int = 32) -> TokenSequence:
    """BOS + word/char tokens + EOS, truncated and padded to ``max_tokens``."""
    words = split_words(text)
    ids = [vocab.token_to_id[BOS]]
    ids += [vocab.token_to_id.get(w, vocab.unk_id) for w in words]
    ids = ids[: max_tokens - 1]
    ids.append(vocab.token_to_id[EOS])
    n = len(ids)
    ids += [vocab.pad_id] * (max_tokens - n)
    mask = torch.zeros(max_tokens, dtype=torch.bool)
    mask[:n] = True
    return TokenSequence(ids=torch.tensor(ids, dtype=torch.int64), mask=mask)


def detokenize(ids, vocab: Vocabulary) -> str:
    rev = vocab.id_to_token()
    words = []
    for i in ids:
        tok = rev[int(i)]
        if tok in SPECIALS:
            continue
        words.append(tok)
    return " ".join(words)


class CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, causal_mask):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, attn_mask=causal_mask, need_weights=False)
        x = x + h
        return x + self.mlp(self.norm2(x))


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float32) / dim)
    ang = pos * freq[None, :]
    emb = torch.zeros(n, dim)
    emb[:, 0::2] = torch.sin(ang)
    emb[:, 1::2] = torch.cos(ang)
    return emb


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + stacked causal blocks."""

    def __init__(self, vocab_size: int, config: TextConfig | None = None):
        super().__init__()
        cfg = config or TextConfig()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.embed_dim)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_tokens, cfg.embed_dim))
        self.blocks = nn.ModuleList(CausalBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.norm_out = nn.LayerNorm(cfg.embed_dim)
        mask = torch.triu(torch.ones(cfg.max_tokens, cfg.max_tokens, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", mask)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, M) int64 -> contextual embeddings (B, M, d)."""
        if ids.dim() != 2 or ids.shape[1] != self.cfg.max_tokens:
            raise ModelError(f"expected token ids of shape (B, {self.cfg.max_tokens}), got {tuple(ids.shape)}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ModelError("token id outside vocabulary range")
        x = self.embed(ids) + self.pos[None, :, :]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.norm_out(x)


def encode(tokens: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    """Single-sequence convenience wrapper; returns (M, d)."""
    return encoder(tokens.ids[None, :])[0]
