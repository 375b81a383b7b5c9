"""Walk through the synthetic shapes set and watch DAMSM learn to match captions to images.

Run: python3 demos/01_shapes_and_damsm.py   (about a minute on one CPU core)
"""

import numpy as np
import torch

from cycle_t2i import training as tr
from cycle_t2i.config import TrainConfig
from cycle_t2i.damsm import sentence_score_matrix, word_score_matrix
from cycle_t2i.dataset import pad_tokens

cfg = TrainConfig(mode="attngan_baseline", synthetic_per_class=32)
ds = tr.build_dataset(cfg)
print(f"{len(ds.images)} images, {len(ds.records)} captions, {ds.n_classes} classes, vocab {len(ds.vocab)}")
for k in range(3):
    rec = ds.records_of_class(k)[0]
    print(f"  class {k} ({ds.class_names[k]}): {rec.raw_text!r}")
print("pyramid levels:", [ex.shape for ex in ds.images[ds.image_ids()[0]].pyramid])

train_classes = tr.split_classes(cfg, ds, "train")
print("train classes", train_classes, "held-out", tr.split_classes(cfg, ds, "test"))

# one caption per class paired with one image per class: the diagonal is the correct match
ids = [ds.image_ids([k])[0] for k in train_classes]
recs = [ds.captions_of(i)[0] for i in ids]
tokens, mask = (torch.from_numpy(a) for a in pad_tokens([r.tokens for r in recs], ds.t_max))
images = torch.from_numpy(np.stack([ds.images[i].pyramid[-1] for i in ids]))


def retrieval(ck):
    text = tr.build_text_encoder(cfg, len(ds.vocab))
    img = tr.build_image_encoder(cfg)
    if ck is not None:
        ck.load_into("text_encoder", text)
        ck.load_into("image_encoder", img)
    with torch.no_grad():
        words, sent = text.eval()(tokens, mask)
        regions = img.eval()(images)
        word = word_score_matrix(words, regions.v, mask, cfg.hyper)
        sentence = sentence_score_matrix(sent, regions.v_bar)
    hits = lambda s: int((s.argmax(1) == torch.arange(len(ids))).sum())  # noqa: E731
    return hits(word), hits(sentence)


torch.manual_seed(cfg.seed)
print("untrained encoders: image->caption top-1 (word, sentence) =", retrieval(None), f"of {len(ids)}")
ck = tr.pretrain_damsm(cfg, ds, epochs=15)
for row in ck.loss_history[::3] + ck.loss_history[-1:]:
    print(f"  epoch {row['epoch']:2d}  L_DAMSM {row['L_DAMSM']:8.3f}")
print("after 15 epochs:   image->caption top-1 (word, sentence) =", retrieval(ck), f"of {len(ids)}")
