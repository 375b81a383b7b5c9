"""Caption encoding: embedding providers, projection, bidirectional LSTM, conditioning augmentation.

Word features are laid out ``(B, D, T)`` and sentence features ``(B, D)``,
following the AttnGAN convention. Masks are ``(B, T)`` booleans, True on real
tokens; real tokens must form a prefix of each row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .dataset import BOS, EOS, PAD
from .embedding_file import read_embedding_file, sequence_key


def lengths_from_mask(mask: Tensor) -> Tensor:
    lengths = mask.sum(dim=1)
    if (lengths == 0).any():
        raise ValueError("caption with no unmasked tokens")
    expected = torch.arange(mask.shape[1], device=mask.device)[None, :] < lengths[:, None]
    if not torch.equal(expected, mask.bool()):
        raise ValueError("mask must mark a prefix of each row")
    return lengths


class EmbeddingProvider(nn.Module):
    """Maps ``(B, T)`` token ids to ``(B, dim, T)`` per-token vectors; padded columns are zero."""

    name = "provider"
    dim: int

    def forward(self, tokens: Tensor, mask: Tensor) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError


class LearnedEmbedding(EmbeddingProvider):
    """Context-free embedding table, trained end to end."""

    name = "learned"

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.dim = dim
        self.table = nn.Embedding(vocab_size, dim, padding_idx=PAD)
        nn.init.uniform_(self.table.weight, -0.1, 0.1)
        with torch.no_grad():
            self.table.weight[PAD].zero_()

    def forward(self, tokens, mask):
        out = self.table(tokens) * mask[..., None].to(self.table.weight.dtype)
        return out.transpose(1, 2)


class _FrozenProvider(EmbeddingProvider):
    def __init__(self):
        super().__init__()
        self.register_buffer("_ref", torch.zeros(()), persistent=False)

    def _vectors(self, row: list[int]) -> np.ndarray:
        raise NotImplementedError

    def forward(self, tokens, mask):
        lengths = lengths_from_mask(mask)
        B, T = tokens.shape
        out = np.zeros((B, self.dim, T))
        for b in range(B):
            row = tokens[b, : int(lengths[b])].tolist()
            out[b, :, : len(row)] = self._vectors(row)
        return torch.as_tensor(out, dtype=self._ref.dtype, device=self._ref.device)


class HashedContextEmbedding(_FrozenProvider):
    """Deterministic contextual stand-in for a pretrained language model.

    Each token's vector is a token-specific Gaussian draw plus a smaller draw
    seeded by the (previous, current, next) token triple, so the same word gets
    related but distinct vectors in different contexts.
    """

    name = "hashed"

    def __init__(self, dim: int, seed: int = 0, context_scale: float = 0.5):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.context_scale = context_scale
        self._cache: dict[tuple, np.ndarray] = {}

    def _draw(self, *key: int) -> np.ndarray:
        if key not in self._cache:
            digest = hashlib.blake2b(np.asarray((self.seed,) + key, dtype="<i8").tobytes(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            self._cache[key] = rng.standard_normal(self.dim) / np.sqrt(self.dim)
        return self._cache[key]

    def _vectors(self, row):
        padded = [BOS] + row + [EOS]
        cols = [self._draw(-1, tok) + self.context_scale * self._draw(prev, tok, nxt)
                for prev, tok, nxt in zip(padded, padded[1:], padded[2:])]
        return np.stack(cols, axis=1)


class PrecomputedEmbedding(_FrozenProvider):
    """Vectors computed offline by a pretrained model, looked up by token-sequence hash."""

    name = "precomputed"

    def __init__(self, path: str | Path):
        super().__init__()
        self.path = Path(path)
        header, self._table = read_embedding_file(self.path)
        self.dim = int(header["dim"])
        self.source = header.get("provider", "unknown")

    def _vectors(self, row):
        key = sequence_key(row)
        if key not in self._table:
            raise KeyError(f"no precomputed embedding for tokens {row} in {self.path}")
        return self._table[key]


def embed_tokens(tokens: Tensor, mask: Tensor, provider: EmbeddingProvider,
                 expected_dim: int | None = None) -> Tensor:
    if expected_dim is not None and provider.dim != expected_dim:
        raise ValueError(f"provider {provider.name!r} has dim {provider.dim}, config expects {expected_dim}")
    return provider(tokens, mask)


@dataclass
class ConditioningSample:
    c: Tensor
    mu: Tensor
    sigma: Tensor


class TextEncoder(nn.Module):
    """Provider → shared affine projection → bidirectional LSTM.

    ``wiring="direct"`` skips the LSTM: word features are the projected
    embeddings and the sentence feature their masked mean.
    """

    def __init__(self, provider: EmbeddingProvider, d_text: int = 32, wiring: str = "rnn",
                 pooling: str = "final"):
        super().__init__()
        if d_text % 2:
            raise ValueError("d_text must be even (two LSTM directions)")
        if wiring not in ("rnn", "direct") or pooling not in ("final", "mean"):
            raise ValueError(f"unknown wiring/pooling {wiring!r}/{pooling!r}")
        self.provider = provider
        self.d_text = d_text
        self.wiring = wiring
        self.pooling = pooling
        self.projection = nn.Linear(provider.dim, d_text)
        self.rnn = nn.LSTM(d_text, d_text // 2, batch_first=True, bidirectional=True)

    def project_embeddings(self, raw: Tensor) -> Tensor:
        return self.projection(raw.transpose(1, 2)).transpose(1, 2)

    def forward(self, tokens: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        mask = mask.bool()
        lengths = lengths_from_mask(mask)
        fmask = mask[:, None, :].to(self.projection.weight.dtype)
        x = self.project_embeddings(embed_tokens(tokens, mask, self.provider)) * fmask
        if self.wiring == "direct":
            return x, x.sum(-1) / lengths[:, None].to(x.dtype)
        packed = pack_padded_sequence(x.transpose(1, 2), lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        words = out.transpose(1, 2) * fmask
        if self.pooling == "mean":
            sent = words.sum(-1) / lengths[:, None].to(words.dtype)
        else:
            sent = torch.cat([h_n[0], h_n[1]], dim=1)
        return words, sent


class ConditioningAugmentation(nn.Module):
    """One affine layer from the sentence feature to (mu, log sigma); c = mu + sigma * eps."""

    def __init__(self, d_text: int, d_cond: int):
        super().__init__()
        self.d_cond = d_cond
        self.fc = nn.Linear(d_text, 2 * d_cond)

    def forward(self, sent: Tensor, eps: Tensor) -> ConditioningSample:
        mu, log_sigma = self.fc(sent).chunk(2, dim=-1)
        sigma = torch.exp(log_sigma)
        return ConditioningSample(mu + sigma * eps, mu, sigma)


def ca_kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over dims and averaged over any batch axis."""
    kl = 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma)).sum(-1)
    return kl.mean()
