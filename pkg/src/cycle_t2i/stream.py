"""Caption regeneration from images: a conv encoder feeding a GRU decoder, the
cycle cross-entropy loss, and greedy readout."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .dataset import BOS, EOS, PAD

PROB_FLOOR = 1e-9


class CaptionImageEncoder(nn.Module):
    """Conv trunk → global average pool → affine map to the decoder hidden size."""

    def __init__(self, resolution: int = 64, hidden: int = 64, channels: int = 16):
        super().__init__()
        self.resolution = resolution
        n_down = int(math.log2(resolution // 4))
        layers, cin = [], 3
        for k in range(n_down):
            cout = channels * 2 ** min(k, 3)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1, padding_mode="replicate"), nn.LeakyReLU(0.2)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, hidden)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(f"caption encoder expects {self.resolution}px images, got {tuple(x.shape[-2:])}")
        return self.fc(self.trunk(x).mean(dim=(2, 3)))


class CaptionDecoder(nn.Module):
    """GRU conditioned on visual feature f twice: the initial state is
    tanh(W norm(f) + b), and norm(f) is appended to every input embedding.

    Feeding f at each step keeps the image reachable when the initial state saturates.
    """

    def __init__(self, vocab_size: int, hidden: int = 64, d_embed: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, d_embed)
        self.norm = nn.LayerNorm(hidden)
        self.init_h = nn.Linear(hidden, hidden)
        self.gru = nn.GRU(d_embed + hidden, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)

    def initial_state(self, feature: Tensor) -> Tensor:
        return torch.tanh(self.init_h(self.norm(feature)))[None]

    def _inputs(self, tokens: Tensor, feature: Tensor) -> Tensor:
        emb = self.embed(tokens)  # (B, L, d_embed)
        ctx = self.norm(feature)[:, None].expand(-1, emb.shape[1], -1)
        return torch.cat([emb, ctx], dim=-1)

    def forward(self, feature: Tensor, inputs: Tensor) -> Tensor:
        """Teacher-forced step distributions, (B, L, |V|)."""
        states, _ = self.gru(self._inputs(inputs, feature), self.initial_state(feature))
        return torch.softmax(self.out(states), dim=-1)

    def step(self, token: Tensor, h: Tensor, feature: Tensor) -> tuple[Tensor, Tensor]:
        out, h = self.gru(self._inputs(token[:, None], feature), h)
        return torch.softmax(self.out(out[:, 0]), dim=-1), h


class Stream(nn.Module):
    def __init__(self, vocab_size: int, resolution: int = 64, hidden: int = 64, d_embed: int = 32,
                 channels: int = 16):
        super().__init__()
        self.encoder = CaptionImageEncoder(resolution, hidden, channels)
        self.decoder = CaptionDecoder(vocab_size, hidden, d_embed)

    def forward(self, images: Tensor, inputs: Tensor) -> Tensor:
        return self.decoder(self.encoder(images), inputs)


def encode_for_caption(stream: Stream, x: Tensor) -> Tensor:
    return stream.encoder(x)


def decode_caption(stream: Stream, feature: Tensor, teacher: Tensor) -> Tensor:
    if not (teacher[:, 0] == BOS).all():
        raise ValueError("teacher tokens must start with <bos>")
    return stream.decoder(feature, teacher)


def teacher_forcing_pairs(tokens: Tensor, mask: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Caption (B, T) → decoder inputs ``[bos, w...]``, targets ``[w..., eos]`` and their mask, each (B, T+1)."""
    mask = mask.bool()
    B, T = tokens.shape
    lengths = mask.sum(1)
    tokens = tokens.masked_fill(~mask, PAD)
    inputs = torch.cat([torch.full((B, 1), BOS, dtype=tokens.dtype, device=tokens.device), tokens], dim=1)
    targets = torch.cat([tokens, torch.full((B, 1), PAD, dtype=tokens.dtype, device=tokens.device)], dim=1)
    targets[torch.arange(B), lengths] = EOS
    target_mask = torch.arange(T + 1, device=tokens.device)[None] <= lengths[:, None]
    return inputs.masked_fill(~target_mask, PAD), targets, target_mask


def cross_entropy_loss(probs: Tensor, targets: Tensor, mask: Tensor, reduction: str = "batch_mean") -> Tensor:
    """Negative log-likelihood of the target tokens.

    ``batch_mean`` sums over tokens and averages over the batch; ``token_mean``
    averages over all unmasked tokens.
    """
    picked = probs.gather(-1, targets[..., None]).squeeze(-1)
    nll = -torch.log(picked.clamp_min(PROB_FLOOR)) * mask.to(probs.dtype)
    if reduction == "batch_mean":
        return nll.sum() / probs.shape[0]
    if reduction == "token_mean":
        return nll.sum() / mask.sum().clamp_min(1)
    raise ValueError(f"unknown reduction {reduction!r}")


def token_accuracy(probs: Tensor, targets: Tensor, mask: Tensor) -> float:
    mask = mask.bool()
    hits = (probs.argmax(-1) == targets) & mask
    return float(hits.sum()) / float(mask.sum())


def _argmax_lowest(p: Tensor) -> Tensor:
    best = p.max(dim=-1, keepdim=True).values
    idx = torch.arange(p.shape[-1], device=p.device).expand_as(p)
    return torch.where(p == best, idx, p.shape[-1]).min(dim=-1).values


@torch.no_grad()
def greedy_decode(stream: Stream, feature: Tensor, max_len: int) -> list[list[int]]:
    """Argmax decoding from ``<bos>`` until ``<eos>`` or ``max_len`` tokens; ties go to the lowest id."""
    decoder = stream.decoder
    B = feature.shape[0]
    h = decoder.initial_state(feature)
    token = torch.full((B,), BOS, dtype=torch.long, device=feature.device)
    out: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    for _ in range(max_len):
        probs, h = decoder.step(token, h, feature)
        token = _argmax_lowest(probs)
        for b in range(B):
            if done[b]:
                continue
            t = int(token[b])
            if t == EOS:
                done[b] = True
            else:
                out[b].append(t)
        if all(done):
            break
    return out
