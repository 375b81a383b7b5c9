"""Attention-based word/region image-text matching (DAMSM) and the combined generator objective.

Shapes: word features ``e`` are ``(..., D, T)``, region features ``v`` are
``(..., D, R)``, masks ``(..., T)``. Batch functions score every image i
against every caption j, giving ``(M, M)`` matrices indexed ``[image, caption]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MODES = ("attngan_baseline", "cyclegan_bert")


@dataclass(frozen=True)
class Hyperparameters:
    gamma_region: float = 5.0
    gamma_score: float = 5.0
    gamma_batch: float = 10.0
    lam: float = 5.0

    def __post_init__(self):
        if min(self.gamma_region, self.gamma_score, self.gamma_batch) <= 0:
            raise ValueError("all gammas must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class RegionFeatures:
    v: Tensor  # (B, D, R)
    v_bar: Tensor  # (B, D)


@dataclass
class DamsmLosses:
    l1w: Tensor
    l2w: Tensor
    l1s: Tensor
    l2s: Tensor

    @property
    def total(self) -> Tensor:
        return self.l1w + self.l2w + self.l1s + self.l2s


class ImageEncoder(nn.Module):
    """Conv encoder → ``region_edge``² local features and a pooled global feature.

    Replicate padding keeps a constant image constant across all regions.
    """

    def __init__(self, resolution: int = 64, d_common: int = 32, channels: int = 16, region_edge: int = 8):
        super().__init__()
        n_down = max(int(math.log2(resolution // region_edge)), 0) if region_edge < resolution else 0
        self.resolution = resolution
        self.region_edge = region_edge
        layers = [nn.Conv2d(3, channels, 3, padding=1, padding_mode="replicate"), nn.LeakyReLU(0.2)]
        cin = channels
        for k in range(n_down):
            cout = channels * 2 ** min(k + 1, 3)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1, padding_mode="replicate"), nn.LeakyReLU(0.2)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(region_edge)
        self.local = nn.Conv2d(cin, d_common, 1)
        self.glob = nn.Linear(cin, d_common)

    @property
    def n_regions(self) -> int:
        return self.region_edge ** 2

    def forward(self, x: Tensor) -> RegionFeatures:
        if tuple(x.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(f"image encoder expects {self.resolution}px images, got {tuple(x.shape[-2:])}")
        h = self.trunk(x)
        v = self.local(self.pool(h)).flatten(2)
        v_bar = self.glob(h.mean(dim=(2, 3)))
        return RegionFeatures(v, v_bar)


def encode_image(encoder: ImageEncoder, x: Tensor) -> RegionFeatures:
    return encoder(x)


def similarity_matrix(e: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """s[t, r] = <e_t, v_r>; rows of masked words become -inf."""
    if e.shape[-2] != v.shape[-2]:
        raise ValueError(f"word dim {e.shape[-2]} != region dim {v.shape[-2]}")
    s = torch.einsum("...dt,...dr->...tr", e, v)
    if mask is not None:
        s = s.masked_fill(~mask.bool()[..., :, None], float("-inf"))
    return s


def normalize_similarity(s: Tensor) -> Tensor:
    """Softmax over the word axis, independently per region column."""
    return torch.softmax(s, dim=-2)


def word_context(s_bar: Tensor, v: Tensor, gamma_region: float) -> tuple[Tensor, Tensor]:
    """alpha = softmax over regions of gamma * s_bar; returns contexts (..., D, T) and alpha (..., T, R)."""
    alpha = torch.softmax(gamma_region * s_bar, dim=-1)
    return torch.einsum("...dr,...tr->...dt", v, alpha), alpha


def _masked_cosine(a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
    """Cosine along dim -2 for (..., D, T) inputs; masked positions give 0."""
    sq_a = (a * a).sum(-2)
    sq_b = (b * b).sum(-2)
    if ((sq_a == 0) & mask).any() or ((sq_b == 0) & mask).any():
        raise ValueError("zero-norm vector in cosine similarity")
    one = torch.ones_like(sq_a)
    denom = torch.sqrt(torch.where(mask, sq_a, one)) * torch.sqrt(torch.where(mask, sq_b, one))
    return torch.where(mask, (a * b).sum(-2) / denom, torch.zeros_like(sq_a))


def matching_score(contexts: Tensor, e: Tensor, gamma_score: float, mask: Tensor | None = None) -> Tensor:
    """log sum_t exp(gamma * cos(c_t, e_t)) over unmasked words."""
    if mask is None:
        mask = torch.ones(e.shape[:-2] + e.shape[-1:], dtype=torch.bool, device=e.device)
    mask = mask.bool().expand(torch.broadcast_shapes(contexts.shape[:-2] + contexts.shape[-1:], mask.shape))
    cos = _masked_cosine(contexts, e.expand_as(contexts), mask)
    return torch.logsumexp((gamma_score * cos).masked_fill(~mask, float("-inf")), dim=-1)


def batch_posteriors(scores: Tensor, gamma_batch: float) -> tuple[Tensor, Tensor]:
    """scores[i, j] = R(Q_i, D_j) → (P(D_j | Q_i) row-softmax, P(Q_i | D_j) column-softmax)."""
    return torch.softmax(gamma_batch * scores, dim=1), torch.softmax(gamma_batch * scores, dim=0)


def word_score_matrix(words: Tensor, regions: Tensor, mask: Tensor, hyper: Hyperparameters) -> Tensor:
    """All-pairs word-level matching scores, (M images, M captions)."""
    e = words[None]  # (1, M_cap, D, T)
    v = regions[:, None]  # (M_img, 1, D, R)
    m = mask.bool()[None]
    s_bar = normalize_similarity(similarity_matrix(e, v, m))
    contexts, _ = word_context(s_bar, v, hyper.gamma_region)
    return matching_score(contexts, e, hyper.gamma_score, m)


def sentence_score_matrix(sent: Tensor, v_bar: Tensor) -> Tensor:
    """cos(v_bar_i, e_bar_j), (M images, M captions)."""
    return F.normalize(v_bar, dim=-1, eps=0.0) @ F.normalize(sent, dim=-1, eps=0.0).T


def _diag_nll(scores: Tensor, gamma_batch: float) -> tuple[Tensor, Tensor]:
    logits = gamma_batch * scores
    l1 = -torch.diagonal(torch.log_softmax(logits, dim=1)).sum()
    l2 = -torch.diagonal(torch.log_softmax(logits, dim=0)).sum()
    return l1, l2


def damsm_loss(words: Tensor, sent: Tensor, regions: RegionFeatures, mask: Tensor,
               hyper: Hyperparameters = Hyperparameters()) -> DamsmLosses:
    """Word- and sentence-level matching losses for a batch of aligned image/caption pairs."""
    l1w, l2w = _diag_nll(word_score_matrix(words, regions.v, mask, hyper), hyper.gamma_batch)
    l1s, l2s = _diag_nll(sentence_score_matrix(sent, regions.v_bar), hyper.gamma_batch)
    return DamsmLosses(l1w, l2w, l1s, l2s)


def total_objective(l_g, l_damsm, l_ce=None, lam: float = 5.0, mode: str = "attngan_baseline",
                    lam_ce: float | None = None):
    """L_G + lam * L_DAMSM, plus lam_ce * L_CE (lam_ce defaults to lam) in cycle mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    total = l_g + lam * l_damsm
    if mode == "cyclegan_bert" and l_ce is not None:
        total = total + (lam if lam_ce is None else lam_ce) * l_ce
    return total
