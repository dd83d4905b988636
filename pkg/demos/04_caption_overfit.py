"""Overfit the two-LSTM captioner on a single synthetic image, then watch
greedy decoding reproduce the training caption and the detector find the box.

Run: python3 demos/04_caption_overfit.py   (about a minute on a laptop CPU)
"""

import dataclasses

import numpy as np

import got.autodiff as ad
from got.captionhead import greedy_decode, reduce_roi_feature
from got.config import TrainConfig
from got.datasets import generate_synthetic_corpus
from got.geometry import roi_align_batch
from got.infer_eval import detect_and_caption
from got.trainer import init_model, init_velocity, train_step
from got import detectnet

corpus = generate_synthetic_corpus(1, seed=11, template_set=("a {color} {shape}",))
image = corpus[0]
caption = image.objects[0].captions[0]
print(f"training image {image.image_id}: one object, caption {caption!r}, box {image.objects[0].box}")

config = TrainConfig.preset("toy", task="caption", seed=0, learning_rate=0.02,
                            weight_decay=0.0, min_count=1)
vocab = corpus.build_vocabulary(1)
params = init_model(config, vocab, corpus.superclass_names)
velocity = init_velocity(params)
rng = np.random.default_rng(config.seed)

breakdown = {}
for i in range(1, 601):
    breakdown = train_step(image, params, velocity, config, rng, iteration=i)
    if i % 100 == 0:
        print(f"iter {i:4d}  " + "  ".join(f"{k}={v:.4f}" for k, v in breakdown.items()))

print("\ngreedy decode from the ground-truth box feature:")
fm = detectnet.backbone_forward(image.pixels, params.tensors, params.backbone)
pooled = roi_align_batch(fm, np.array([image.objects[0].box]), 1 / 8, 7)
visual = reduce_roi_feature(pooled, params.tensors)
decoded = greedy_decode(ad.Tensor(visual.data[0]), params.tensors, vocab, max_steps=6)
print(f"  decoded: {' '.join(decoded.words(vocab))!r}  (target {caption!r})")

# the single-image overfit never trains anchors in the proposal head's IoU
# dead band, so detection inference uses a strict objectness gate here
infer_cfg = dataclasses.replace(config, objectness_floor=0.9)
result = detect_and_caption(image, params, infer_cfg)
print("\ndetector output:")
for obj in result.objects:
    print(f"  box={tuple(round(v, 1) for v in obj.box)} superclass={obj.superclass} "
          f"score={obj.score:.3f} caption={obj.caption!r}")
