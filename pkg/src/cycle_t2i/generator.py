"""Stacked attentional generator: an initial stage from (c, z), then refinement stages
that attend from image regions over words and double the resolution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .text_encoder import ConditioningAugmentation, ConditioningSample, TextEncoder


def _norm2d(c: int, norm: str) -> nn.Module:
    return nn.BatchNorm2d(c) if norm == "batch" else nn.Identity()


def up_block(cin: int, cout: int, norm: str = "batch") -> nn.Sequential:
    """Nearest-neighbour 2x upsampling, 3x3 conv, GLU."""
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(cin, 2 * cout, 3, padding=1, bias=False),
                         _norm2d(2 * cout, norm), nn.GLU(dim=1))


class ResBlock(nn.Module):
    def __init__(self, c: int, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(c, 2 * c, 3, padding=1, bias=False), _norm2d(2 * c, norm),
                                  nn.GLU(dim=1),
                                  nn.Conv2d(c, c, 3, padding=1, bias=False), _norm2d(c, norm))

    def forward(self, x):
        return x + self.body(x)


class ImageHead(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, h):
        return torch.tanh(self.conv(h))


class InitialStage(nn.Module):
    def __init__(self, d_in: int, channels: int, resolution: int, norm: str = "batch"):
        super().__init__()
        n_up = int(math.log2(resolution // 4))
        if 4 * 2 ** n_up != resolution:
            raise ValueError(f"initial resolution must be 4 * 2**k, got {resolution}")
        self.c4 = channels * 2 ** n_up
        self.fc = nn.Sequential(nn.Linear(d_in, 2 * self.c4 * 16, bias=False),
                                nn.BatchNorm1d(2 * self.c4 * 16) if norm == "batch" else nn.Identity(),
                                nn.GLU(dim=1))
        self.ups = nn.Sequential(*[up_block(self.c4 // 2 ** k, self.c4 // 2 ** (k + 1), norm)
                                   for k in range(n_up)])

    def forward(self, c, z):
        x = self.fc(torch.cat([c, z], dim=1)).view(-1, self.c4, 4, 4)
        return self.ups(x)


def word_attention(h: Tensor, words: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
    """Each region attends over the (already projected) words.

    h: (B, C, H, W); words: (B, C, T); mask: (B, T).
    Returns the per-region word context (B, C, H, W) and beta (B, H*W, T), rows summing to 1.
    """
    mask = mask.bool()
    if not mask.any(dim=1).all():
        raise ValueError("word attention over a caption with every word masked")
    B, C, H, W = h.shape
    regions = h.reshape(B, C, H * W)
    scores = torch.bmm(regions.transpose(1, 2), words)  # (B, R, T)
    scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
    beta = torch.softmax(scores, dim=-1)
    context = torch.bmm(words, beta.transpose(1, 2))  # (B, C, R)
    return context.reshape(B, C, H, W), beta


class WordAttention(nn.Module):
    def __init__(self, channels: int, d_text: int):
        super().__init__()
        self.proj = nn.Conv1d(d_text, channels, 1, bias=False)

    def forward(self, h, words, mask):
        return word_attention(h, self.proj(words), mask)


class NextStage(nn.Module):
    """[h_prev; word context] → residual blocks → 2x upsample; halves the channel width."""

    def __init__(self, channels: int, d_text: int, n_res: int = 2, norm: str = "batch"):
        super().__init__()
        self.attention = WordAttention(channels, d_text)
        self.res = nn.Sequential(*[ResBlock(2 * channels, norm) for _ in range(n_res)])
        self.up = up_block(2 * channels, channels // 2, norm)

    def forward(self, h_prev, words, mask):
        context, beta = self.attention(h_prev, words, mask)
        h = self.up(self.res(torch.cat([h_prev, context], dim=1)))
        return h, beta


@dataclass
class GeneratorOutput:
    images: list[Tensor]
    attention: list[Tensor]  # one (B, R_i, T) map per refinement stage
    condition: ConditioningSample


class StackedGenerator(nn.Module):
    def __init__(self, d_text: int = 32, d_cond: int = 32, d_z: int = 32,
                 resolutions=(16, 32, 64), channels: int = 32, n_res: int = 2, norm: str = "batch"):
        super().__init__()
        if channels % 2 ** (len(resolutions) - 1):
            raise ValueError("channels must stay integral when halved per stage")
        self.d_z = d_z
        self.resolutions = list(resolutions)
        self.ca = ConditioningAugmentation(d_text, d_cond)
        self.initial = InitialStage(d_cond + d_z, channels, self.resolutions[0], norm)
        widths = [channels // 2 ** i for i in range(len(self.resolutions))]
        self.stages = nn.ModuleList(NextStage(w, d_text, n_res, norm) for w in widths[:-1])
        self.heads = nn.ModuleList(ImageHead(w) for w in widths)

    def initial_stage(self, c, z):
        h = self.initial(c, z)
        return h, self.heads[0](h)

    def next_stage(self, i, h_prev, words, mask):
        h, beta = self.stages[i - 1](h_prev, words, mask)
        return h, self.heads[i](h), beta

    def forward(self, sent: Tensor, words: Tensor, mask: Tensor, eps: Tensor, z: Tensor) -> GeneratorOutput:
        cond = self.ca(sent, eps)
        h, img = self.initial_stage(cond.c, z)
        images, attention = [img], []
        for i in range(1, len(self.resolutions)):
            h, img, beta = self.next_stage(i, h, words, mask)
            images.append(img)
            attention.append(beta)
        return GeneratorOutput(images, attention, cond)


def generate(text_encoder: TextEncoder, generator: StackedGenerator, tokens: Tensor, mask: Tensor,
             eps: Tensor, z: Tensor) -> tuple[GeneratorOutput, Tensor, Tensor]:
    """Caption tokens → images at every stage; also returns the word and sentence features used."""
    words, sent = text_encoder(tokens, mask)
    return generator(sent, words, mask, eps, z), words, sent
