"""
Pre-train a tiny masked autoencoder and probe it
================================================

The whole self-supervised pipeline in under a minute of CPU: synthetic
shape images, masked-patch reconstruction, then a linear probe on the
frozen encoder. Every attack demo perturbs exactly this baseline, so the
data recipe here (10 shape classes, 200 images each, 32x32) is reused
throughout.
"""
import time

import numpy as np

from mimbd import (EncoderConfig, PretrainConfig, evaluate, generate_shapes,
                   pretrain, train_probe)

# --- data ---------------------------------------------------------------
# shapes-N draws one geometric class per label (disks, squares, crosses...)
# with jittered position, size, color, and background noise.
train = generate_shapes(num_classes=10, per_class=200, image_size=32, seed=0,
                        name="demo-train")
test = generate_shapes(num_classes=10, per_class=25, image_size=32, seed=99,
                       name="demo-test")
print(f"train: {len(train)} images {train.images.shape[1:]}  "
      f"test: {len(test)}")

# --- pre-training --------------------------------------------------------
# The default model: 4x4 patches -> 64 tokens, 75% of them masked and
# reconstructed from the visible quarter. No labels are used.
cfg = EncoderConfig()
t0 = time.time()
model, losses = pretrain(PretrainConfig(epochs=12, batch_size=64,
                                        warmup_epochs=2, seed=0), train, cfg)
print(f"pre-trained {sum(p.value.size for p in model.params())} params "
      f"in {time.time() - t0:.0f}s; loss {losses[0]:.4f} -> {losses[-1]:.4f}")

# --- embeddings -----------------------------------------------------------
# embed() mean-pools the encoder tokens over the *unmasked* image; images
# of the same class should already cluster.
emb = model.embed(test.images)
print(f"embedding matrix: {emb.shape}")
cents = np.stack([emb[test.labels == c].mean(axis=0) for c in range(10)])
gap = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
within = np.mean([np.linalg.norm(emb[test.labels == c] - cents[c], axis=1).mean()
                  for c in range(10)])
print(f"between-class centroid distance {gap[np.triu_indices(10, 1)].mean():.2f} "
      f"vs within-class spread {within:.2f}")

# --- linear probing -------------------------------------------------------
# The encoder stays frozen; only a single linear layer learns the labels.
probe = train_probe(model, train, epochs=150, lr=0.1, weight_decay=0.0,
                    lr_decay=0.98, seed=0)
metrics = evaluate(model, probe, test)
print(f"linear-probe test accuracy: {metrics.ta:.1f}%")
