"""Training orchestration: DAMSM pretraining, STREAM pretraining, adversarial training,
generation and checkpoint-level evaluation. Everything is seeded and runs on CPU."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, state_of
from .config import TrainConfig, write_config
from .damsm import ImageEncoder, damsm_loss, total_objective
from .dataset import (CaptionDataset, Vocabulary, generate_synthetic_dataset, load_cub_layout, pad_tokens,
                      split_class_disjoint, tokenize)
from .discriminators import StageDiscriminator, discriminator_loss, generator_adv_loss
from .evaluation import append_metrics
from .generator import StackedGenerator
from .stream import Stream, cross_entropy_loss, greedy_decode, teacher_forcing_pairs, token_accuracy
from .text_encoder import (EmbeddingProvider, HashedContextEmbedding, LearnedEmbedding, PrecomputedEmbedding,
                           TextEncoder, ca_kl_loss)

log = logging.getLogger(__name__)

RUNS_ENV = "CYCLE_T2I_RUNS"


class NumericalAbort(RuntimeError):
    """A loss became NaN/Inf; ``dump_path`` holds the offending batch."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# ----------------------------------------------------------------------------
# Construction
# ----------------------------------------------------------------------------

def build_dataset(config: TrainConfig) -> CaptionDataset:
    if config.dataset_path:
        return load_cub_layout(config.dataset_path, config.resolutions, config.crop_ratio, config.t_max)
    return generate_synthetic_dataset(config.synthetic_classes, config.synthetic_per_class, config.resolutions,
                                      config.seed, config.captions_per_image, config.t_max)


def split_classes(config: TrainConfig, dataset: CaptionDataset, which: str = "train") -> list[int]:
    if which == "all":
        return list(range(dataset.n_classes))
    manifest = split_class_disjoint(dataset.records, config.train_fraction, config.seed)
    return sorted(manifest.train_classes if which == "train" else manifest.test_classes)


def build_provider(config: TrainConfig, vocab_size: int) -> EmbeddingProvider:
    kind = config.provider_kind
    if kind == "learned":
        return LearnedEmbedding(vocab_size, config.provider_dim)
    if kind == "hashed":
        return HashedContextEmbedding(config.provider_dim, seed=config.seed)
    provider = PrecomputedEmbedding(config.provider_path)
    if provider.dim != config.provider_dim:
        raise ValueError(f"precomputed embeddings have dim {provider.dim}, config says {config.provider_dim}")
    return provider


def build_text_encoder(config: TrainConfig, vocab_size: int) -> TextEncoder:
    return TextEncoder(build_provider(config, vocab_size), config.d_text, config.encoder_wiring,
                       config.sentence_pooling)


def build_image_encoder(config: TrainConfig) -> ImageEncoder:
    return ImageEncoder(config.resolutions[-1], config.d_text, config.damsm_channels, config.region_edge)


def build_generator(config: TrainConfig) -> StackedGenerator:
    return StackedGenerator(config.d_text, config.d_cond, config.d_z, config.resolutions, config.gen_channels,
                            config.n_res, config.gen_norm)


def build_discriminators(config: TrainConfig) -> nn.ModuleList:
    return nn.ModuleList(StageDiscriminator(r, config.d_text, config.disc_channels) for r in config.resolutions)


def build_stream(config: TrainConfig, vocab_size: int) -> Stream:
    return Stream(vocab_size, config.resolutions[-1], config.stream_hidden, config.stream_embed,
                  config.stream_channels)


def _adam(params, lr: float, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2))


def run_dir_for(config: TrainConfig, root: str | Path | None = None) -> Path:
    """``<root>/<digest12>-s<seed>``; an existing directory gets a ``-rN`` suffix."""
    root = Path(root or os.environ.get(RUNS_ENV, "runs"))
    base = f"{config.digest()[:12]}-s{config.seed}"
    path, n = root / base, 1
    while path.exists():
        n += 1
        path = root / f"{base}-r{n}"
    path.mkdir(parents=True)
    write_config(config, path / "config.txt")
    return path


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------

@dataclass
class Batch:
    image_ids: list[str]
    images: list[Tensor]  # one (B, 3, r, r) tensor per pyramid level
    tokens: Tensor
    mask: Tensor
    class_ids: Tensor


class Batcher:
    """Epoch-seeded shuffling over images, one randomly chosen caption per image."""

    def __init__(self, dataset: CaptionDataset, image_ids: Sequence[str], batch_size: int, seed: int,
                 drop_last: bool = True):
        self.dataset = dataset
        self.image_ids = list(image_ids)
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        n_levels = len(dataset.images[self.image_ids[0]].pyramid)
        self.levels = [torch.from_numpy(np.stack([dataset.images[i].pyramid[k] for i in self.image_ids]))
                       for k in range(n_levels)]

    def __len__(self) -> int:
        n = len(self.image_ids)
        return n // self.batch_size if self.drop_last else math.ceil(n / self.batch_size)

    def epoch(self, epoch: int, shuffle: bool = True) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.image_ids)) if shuffle else np.arange(len(self.image_ids))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            ids = [self.image_ids[i] for i in idx]
            caps = [self.dataset.captions_of(i) for i in ids]
            chosen = [c[rng.integers(len(c))] for c in caps]
            tokens, mask = pad_tokens([r.tokens for r in chosen], self.dataset.t_max)
            yield Batch(ids, [lvl[torch.from_numpy(idx)] for lvl in self.levels], torch.from_numpy(tokens),
                        torch.from_numpy(mask), torch.tensor([r.class_id for r in chosen]))


def _check_finite(losses: dict[str, Tensor], batch: Batch, dump_dir: Path | None, tag: str):
    bad = [k for k, v in losses.items() if not torch.isfinite(v).all()]
    if not bad:
        return
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / f"abort_{tag}.pt"
        dump.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"image_ids": batch.image_ids, "tokens": batch.tokens, "mask": batch.mask,
                    "images": batch.images, "losses": {k: v.detach() for k, v in losses.items()}}, dump)
    raise NumericalAbort(f"non-finite loss {bad} at {tag}" + (f"; batch dumped to {dump}" if dump else ""), dump)


def _mean_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


# ----------------------------------------------------------------------------
# Pretraining
# ----------------------------------------------------------------------------

def pretrain_damsm(config: TrainConfig, dataset: CaptionDataset, out_path: str | Path | None = None,
                   epochs: int | None = None, dump_dir: str | Path | None = None) -> Checkpoint:
    """Fit the text and image encoders on real pairs by minimising the DAMSM loss."""
    epochs = config.damsm_epochs if epochs is None else epochs
    torch.manual_seed(config.seed)
    text_encoder = build_text_encoder(config, len(dataset.vocab))
    image_encoder = build_image_encoder(config)
    params = list(text_encoder.parameters()) + list(image_encoder.parameters())
    opt = _adam(params, config.damsm_lr, config)
    batcher = Batcher(dataset, dataset.image_ids(split_classes(config, dataset)), config.batch_size, config.seed)
    history = []
    for epoch in range(1, epochs + 1):
        text_encoder.train()
        image_encoder.train()
        rows = []
        for batch in batcher.epoch(epoch):
            words, sent = text_encoder(batch.tokens, batch.mask)
            losses = damsm_loss(words, sent, image_encoder(batch.images[-1]), batch.mask, config.hyper)
            named = {"L1w": losses.l1w, "L2w": losses.l2w, "L1s": losses.l1s, "L2s": losses.l2s,
                     "L_DAMSM": losses.total}
            _check_finite(named, batch, dump_dir, f"damsm_epoch{epoch}")
            opt.zero_grad()
            losses.total.backward()
            nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            rows.append({k: float(v.detach()) for k, v in named.items()})
        history.append({"epoch": epoch, **_mean_rows(rows)})
        log.info("damsm epoch %d: L_DAMSM %.4f", epoch, history[-1]["L_DAMSM"])
    ckpt = Checkpoint("damsm", epochs, config.to_dict(), config.digest(), config.seed, list(dataset.vocab.itos),
                      state_of({"text_encoder": text_encoder, "image_encoder": image_encoder}), history)
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt


def pretrain_stream(config: TrainConfig, dataset: CaptionDataset, out_path: str | Path | None = None,
                    epochs: int | None = None, image_ids: Sequence[str] | None = None,
                    dump_dir: str | Path | None = None) -> Checkpoint:
    """Fit the caption decoder on real images with teacher forcing."""
    epochs = config.stream_epochs if epochs is None else epochs
    torch.manual_seed(config.seed)
    stream = build_stream(config, len(dataset.vocab))
    opt = _adam(stream.parameters(), config.stream_lr, config)
    ids = dataset.image_ids(split_classes(config, dataset)) if image_ids is None else list(image_ids)
    batcher = Batcher(dataset, ids, min(config.batch_size, len(ids)), config.seed)
    history = []
    for epoch in range(1, epochs + 1):
        stream.train()
        rows = []
        for batch in batcher.epoch(epoch):
            inputs, targets, tmask = teacher_forcing_pairs(batch.tokens, batch.mask)
            probs = stream(batch.images[-1], inputs)
            loss = cross_entropy_loss(probs, targets, tmask, config.ce_reduction)
            _check_finite({"L_CE": loss}, batch, dump_dir, f"stream_epoch{epoch}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(stream.parameters(), 1.0)
            opt.step()
            rows.append({"L_CE": float(loss.detach()), "token_accuracy": token_accuracy(probs.detach(), targets, tmask)})
        history.append({"epoch": epoch, **_mean_rows(rows)})
        log.info("stream epoch %d: L_CE %.4f", epoch, history[-1]["L_CE"])
    ckpt = Checkpoint("stream", epochs, config.to_dict(), config.digest(), config.seed, list(dataset.vocab.itos),
                      state_of({"stream": stream}), history)
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt


# ----------------------------------------------------------------------------
# Adversarial training
# ----------------------------------------------------------------------------

@dataclass
class Models:
    config: TrainConfig
    vocab: Vocabulary
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    generator: StackedGenerator
    discriminators: nn.ModuleList
    stream: Stream | None
    epoch: int = 0

    def named_modules(self) -> dict[str, nn.Module]:
        mods = {"text_encoder": self.text_encoder, "image_encoder": self.image_encoder,
                "generator": self.generator, "discriminators": self.discriminators}
        if self.stream is not None:
            mods["stream"] = self.stream
        return mods


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def assemble_models(config: TrainConfig, vocab: Vocabulary, damsm: Checkpoint | None = None,
                    stream: Checkpoint | None = None) -> Models:
    torch.manual_seed(config.seed)
    text_encoder = build_text_encoder(config, len(vocab))
    image_encoder = build_image_encoder(config)
    if damsm is not None:
        damsm.load_into("text_encoder", text_encoder)
        damsm.load_into("image_encoder", image_encoder)
    generator = build_generator(config)
    discriminators = build_discriminators(config)
    stream_model = None
    if config.mode == "cyclegan_bert":
        stream_model = build_stream(config, len(vocab))
        if stream is not None:
            stream.load_into("stream", stream_model)
    return Models(config, vocab, _freeze(text_encoder), _freeze(image_encoder), generator, discriminators,
                  stream_model)


@dataclass
class TrainResult:
    run_dir: Path
    checkpoints: list[Path]
    metrics_path: Path
    history: list[dict]


def _gan_checkpoint(models: Models, epoch: int, history, optimizers) -> Checkpoint:
    return Checkpoint("gan", epoch, models.config.to_dict(), models.config.digest(), models.config.seed,
                      list(models.vocab.itos), state_of(models.named_modules()), list(history),
                      {k: v.state_dict() for k, v in optimizers.items()})


def train(config: TrainConfig, dataset: CaptionDataset, damsm: Checkpoint, stream: Checkpoint | None = None,
          run_dir: str | Path | None = None, epochs: int | None = None, resume: str | Path | None = None,
          override_digest: bool = False, save_initial: bool = True) -> TrainResult:
    """Alternate discriminator and generator updates; checkpoint every ``checkpoint_every`` epochs."""
    epochs = config.gan_epochs if epochs is None else epochs
    cycle = config.mode == "cyclegan_bert"
    if cycle and stream is None:
        raise ValueError("cyclegan_bert mode needs a pretrained STREAM checkpoint")
    run_dir = run_dir_for(config) if run_dir is None else Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    metrics_path = run_dir / "metrics.csv"
    models = assemble_models(config, dataset.vocab, damsm, stream)
    G, Ds = models.generator, models.discriminators
    opt_g = _adam(G.parameters(), config.lr, config)
    opt_ds = [_adam(D.parameters(), config.lr, config) for D in Ds]
    optimizers = {"generator": opt_g, **{f"disc_{i}": o for i, o in enumerate(opt_ds)}}
    opt_s = None
    if cycle:
        if config.stream_trainable:
            models.stream.train()
            opt_s = _adam(models.stream.parameters(), config.lr * config.stream_lr_scale, config)
            optimizers["stream"] = opt_s
        else:
            _freeze(models.stream)

    history: list[dict] = []
    start = 1
    if resume is not None:
        ck = load_checkpoint(resume, config.digest(), override_digest)
        for name, module in models.named_modules().items():
            ck.load_into(name, module)
        for name, opt in optimizers.items():
            opt.load_state_dict(ck.optimizers[name])
        history, start = list(ck.loss_history), ck.epoch + 1

    batcher = Batcher(dataset, dataset.image_ids(split_classes(config, dataset)), config.batch_size, config.seed)
    checkpoints = []
    if save_initial and start == 1:
        checkpoints.append(save_checkpoint(ckpt_dir / "epoch_0000.pt", _gan_checkpoint(models, 0, history, optimizers)))
    for epoch in range(start, epochs + 1):
        G.train()
        Ds.train()
        noise = torch.Generator().manual_seed(config.seed * 1_000_003 + epoch)
        rows = []
        for batch in batcher.epoch(epoch):
            with torch.no_grad():
                words, sent = models.text_encoder(batch.tokens, batch.mask)
            B = batch.tokens.shape[0]
            eps = torch.randn(B, config.d_cond, generator=noise)
            z = torch.randn(B, config.d_z, generator=noise)
            out = G(sent, words, batch.mask, eps, z)

            row: dict[str, Tensor] = {}
            for i, (D, opt_d) in enumerate(zip(Ds, opt_ds)):
                real = D(batch.images[i], sent)
                fake = D(out.images[i].detach(), sent)
                wrong = D(batch.images[i], sent.roll(1, 0)) if config.mismatch_weight > 0 else None
                loss_d = discriminator_loss(real, fake, wrong, config.mismatch_weight)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                row[f"L_D{i}"] = loss_d.detach()

            per_stage, l_g = generator_adv_loss([D(img, sent) for D, img in zip(Ds, out.images)])
            damsm_losses = damsm_loss(words, sent, models.image_encoder(out.images[-1]), batch.mask, config.hyper)
            l_ca = ca_kl_loss(out.condition.mu, out.condition.sigma)
            l_ce = None
            if cycle:
                inputs, targets, tmask = teacher_forcing_pairs(batch.tokens, batch.mask)
                l_ce = cross_entropy_loss(models.stream(out.images[-1], inputs), targets, tmask, config.ce_reduction)
            total = total_objective(l_g, damsm_losses.total, l_ce, config.lam, config.mode, config.ce_weight)
            total = total + config.kl_weight * l_ca
            opt_g.zero_grad()
            if opt_s is not None:
                opt_s.zero_grad()
            total.backward()
            opt_g.step()
            if opt_s is not None:
                opt_s.step()

            row.update({f"L_G{i}": v.detach() for i, v in enumerate(per_stage)})
            row.update(L_G=l_g.detach(), L_DAMSM=damsm_losses.total.detach(), L_CA=l_ca.detach(),
                       L_total=total.detach())
            if l_ce is not None:
                row["L_CE"] = l_ce.detach()
            _check_finite(row, batch, run_dir, f"gan_epoch{epoch}")
            rows.append({k: float(v) for k, v in row.items()})

        summary = _mean_rows(rows)
        history.append({"epoch": epoch, **summary})
        append_metrics(metrics_path, [(epoch, config.mode, k, v, config.seed) for k, v in summary.items()])
        log.info("gan epoch %d: L_G %.4f L_DAMSM %.4f", epoch, summary["L_G"], summary["L_DAMSM"])
        if epoch % config.checkpoint_every == 0 or epoch == epochs:
            ck = _gan_checkpoint(models, epoch, history, optimizers)
            checkpoints.append(save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.pt", ck))
    return TrainResult(run_dir, checkpoints, metrics_path, history)


# ----------------------------------------------------------------------------
# Inference helpers
# ----------------------------------------------------------------------------

def load_models(path: str | Path) -> Models:
    ck = load_checkpoint(path)
    if ck.kind != "gan":
        raise CheckpointError(f"{path} is a {ck.kind} checkpoint, not a generator checkpoint")
    config = TrainConfig(**ck.config)
    vocab = Vocabulary(tuple(ck.vocab))
    models = assemble_models(config, vocab)
    for name, module in models.named_modules().items():
        ck.load_into(name, module)
    for m in models.named_modules().values():
        m.eval()
    models.epoch = ck.epoch
    return models


@dataclass
class Generation:
    images: list[Tensor]  # per stage, (3, r, r)
    attention: list[Tensor]  # per refinement stage, (R_i, T)
    words: list[str]
    regenerated: str | None


@torch.no_grad()
def generate_from_text(models: Models, caption: str, seed: int = 0) -> Generation:
    tokens, mask = tokenize(caption, models.vocab, models.config.t_max)
    tokens, mask = torch.from_numpy(tokens)[None], torch.from_numpy(mask)[None]
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(1, models.config.d_cond, generator=gen)
    z = torch.randn(1, models.config.d_z, generator=gen)
    words, sent = models.text_encoder(tokens, mask)
    out = models.generator(sent, words, mask, eps, z)
    regenerated = None
    if models.stream is not None:
        ids = greedy_decode(models.stream, models.stream.encoder(out.images[-1]), models.config.t_max + 1)[0]
        regenerated = " ".join(models.vocab.word(i) for i in ids)
    return Generation([im[0] for im in out.images], [a[0] for a in out.attention],
                      [models.vocab.word(int(t)) for t in tokens[0]], regenerated)


def _to_uint8(image: Tensor) -> np.ndarray:
    return np.clip(np.round((image.permute(1, 2, 0).numpy().astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_generation(gen: Generation, out_dir: str | Path) -> list[Path]:
    """One PNG per stage, one attention grid per refinement stage, and the regenerated caption."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(gen.images):
        p = out_dir / f"stage{i}_{img.shape[-1]}px.png"
        Image.fromarray(_to_uint8(img)).save(p)
        written.append(p)
    for i, beta in enumerate(gen.attention, start=1):
        edge = int(round(math.sqrt(beta.shape[0])))
        fig, axes = plt.subplots(1, len(gen.words) + 1, figsize=(1.6 * (len(gen.words) + 1), 1.9))
        axes[0].imshow(_to_uint8(gen.images[i - 1]))
        axes[0].set_title("input", fontsize=8)
        for t, word in enumerate(gen.words):
            axes[t + 1].imshow(beta[:, t].reshape(edge, edge).numpy(), cmap="magma", vmin=0, vmax=float(beta.max()))
            axes[t + 1].set_title(word, fontsize=8)
        for ax in axes:
            ax.axis("off")
        fig.tight_layout()
        p = out_dir / f"attention_stage{i}.png"
        fig.savefig(p, dpi=90)
        plt.close(fig)
        written.append(p)
    if gen.regenerated is not None:
        p = out_dir / "regenerated_caption.txt"
        p.write_text(gen.regenerated + "\n")
        written.append(p)
    return written
