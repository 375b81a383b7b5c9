"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops (math / mpmath) so it shares
no code path with the vectorised torch implementations under test.
"""

import math

import numpy as np
import torch


def _lse(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def loop_similarity(e, v):
    """e: D x T, v: D x R nested lists → T x R."""
    D, T, R = len(e), len(e[0]), len(v[0])
    return [[sum(e[d][t] * v[d][r] for d in range(D)) for r in range(R)] for t in range(T)]


def loop_normalize(s, n_real):
    T, R = len(s), len(s[0])
    out = [[0.0] * R for _ in range(T)]
    for r in range(R):
        col = [s[t][r] for t in range(n_real)]
        z = _lse(col)
        for t in range(n_real):
            out[t][r] = math.exp(s[t][r] - z)
    return out


def loop_word_context(s_bar, v, gamma):
    T, R, D = len(s_bar), len(s_bar[0]), len(v)
    contexts, alphas = [], []
    for t in range(T):
        z = _lse([gamma * s_bar[t][r] for r in range(R)])
        alpha = [math.exp(gamma * s_bar[t][r] - z) for r in range(R)]
        alphas.append(alpha)
        contexts.append([sum(alpha[r] * v[d][r] for r in range(R)) for d in range(D)])
    return contexts, alphas  # contexts: T x D


def loop_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def loop_matching_score(e, v, n_real, g_region, g_score):
    s_bar = loop_normalize(loop_similarity(e, v), n_real)
    contexts, _ = loop_word_context(s_bar, v, g_region)
    D = len(e)
    return _lse([g_score * loop_cosine(contexts[t], [e[d][t] for d in range(D)]) for t in range(n_real)])


def loop_damsm(words, sents, regions, globs, lengths, g_region, g_score, g_batch):
    """Triple loop over (image i, caption j, word t); returns (l1w, l2w, l1s, l2s)."""
    M = len(words)
    Rw = [[loop_matching_score(words[j], regions[i], lengths[j], g_region, g_score) for j in range(M)]
          for i in range(M)]
    Rs = [[loop_cosine(globs[i], sents[j]) for j in range(M)] for i in range(M)]

    def losses(R):
        l1 = l2 = 0.0
        for i in range(M):
            l1 -= g_batch * R[i][i] - _lse([g_batch * R[i][j] for j in range(M)])
            l2 -= g_batch * R[i][i] - _lse([g_batch * R[j][i] for j in range(M)])
        return l1, l2

    return losses(Rw) + losses(Rs)


def fd_check(fn, tensors, n_samples=None, h=1e-6, seed=0):
    """Compare autograd against central differences on (optionally sampled) entries.

    Returns the relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||).
    """
    rng = np.random.default_rng(seed)
    tensors = list(tensors)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    auto, num = [], []
    picks = [(k, j) for k, t in enumerate(tensors) for j in range(t.numel())]
    if n_samples is not None and n_samples < len(picks):
        picks = [picks[i] for i in rng.choice(len(picks), n_samples, replace=False)]
    with torch.no_grad():
        for k, j in picks:
            flat = tensors[k].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            fp = fn().item()
            flat[j] = orig - h
            fm = fn().item()
            flat[j] = orig
            num.append((fp - fm) / (2 * h))
            g = grads[k]
            auto.append(0.0 if g is None else g.reshape(-1)[j].item())
    auto, num = np.array(auto), np.array(num)
    scale = max(np.linalg.norm(auto), np.linalg.norm(num), 1e-30)
    return float(np.linalg.norm(auto - num) / scale)

