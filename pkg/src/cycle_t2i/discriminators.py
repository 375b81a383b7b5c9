"""Per-stage discriminators with unconditional and sentence-conditional heads, and
the adversarial losses for both players."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

PROB_CLAMP = 1e-7


@dataclass
class DiscriminatorOutput:
    p_uncond: Tensor  # (B,)
    p_cond: Tensor  # (B,)


class StageDiscriminator(nn.Module):
    def __init__(self, resolution: int, d_text: int = 32, channels: int = 16, max_channels: int = 128):
        super().__init__()
        n_down = int(math.log2(resolution // 4))
        if 4 * 2 ** n_down != resolution:
            raise ValueError(f"resolution must be 4 * 2**k, got {resolution}")
        self.resolution = resolution
        layers, cin = [], 3
        for k in range(n_down):
            cout = min(channels * 2 ** k, max_channels)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.uncond_head = nn.Conv2d(cin, 1, 4)
        self.cond_joint = nn.Sequential(nn.Conv2d(cin + d_text, cin, 3, padding=1), nn.LeakyReLU(0.2))
        self.cond_head = nn.Conv2d(cin, 1, 4)

    def features(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"discriminator for {self.resolution}px got {tuple(x.shape[-2:])} image")
        return self.trunk(x)

    def forward(self, x: Tensor, sent: Tensor) -> DiscriminatorOutput:
        h = self.features(x)
        p_uncond = torch.sigmoid(self.uncond_head(h)).flatten()
        s = sent[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        p_cond = torch.sigmoid(self.cond_head(self.cond_joint(torch.cat([h, s], dim=1)))).flatten()
        return DiscriminatorOutput(p_uncond, p_cond)


def _log(p: Tensor) -> Tensor:
    return torch.log(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def _log1m(p: Tensor) -> Tensor:
    return torch.log(1.0 - p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def generator_stage_loss(fake: DiscriminatorOutput) -> Tensor:
    return (-0.5 * _log(fake.p_uncond) - 0.5 * _log(fake.p_cond)).mean()


def generator_adv_loss(fakes: Sequence[DiscriminatorOutput]) -> tuple[list[Tensor], Tensor]:
    """Per-stage generator losses and their sum."""
    per_stage = [generator_stage_loss(f) for f in fakes]
    return per_stage, torch.stack(per_stage).sum()


def discriminator_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput,
                       mismatch: DiscriminatorOutput | None = None, mismatch_weight: float = 0.0) -> Tensor:
    """Real/fake terms for both heads, each weighted 1/2.

    ``mismatch`` holds conditional outputs on real images paired with the wrong
    caption; it only contributes when ``mismatch_weight > 0``.
    """
    if real.p_uncond.shape != fake.p_uncond.shape:
        raise ValueError("real and fake batches must be the same size")
    loss = (-0.5 * _log(real.p_uncond) - 0.5 * _log1m(fake.p_uncond)
            - 0.5 * _log(real.p_cond) - 0.5 * _log1m(fake.p_cond)).mean()
    if mismatch is not None and mismatch_weight > 0:
        loss = loss - mismatch_weight * 0.5 * _log1m(mismatch.p_cond).mean()
    return loss
