"""
Triggers, placements, and what poisoned data looks like
=======================================================

Renders every trigger kind and placement strategy onto sample images and
saves a PNG-free gallery (SVG via matplotlib) plus the raw stamped
arrays, so you can eyeball exactly what each attack feeds the models.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mimbd import PlacementSpec, generate_shapes, make_trigger, stamp_all

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

data = generate_shapes(num_classes=10, per_class=1, image_size=32, seed=5,
                       name="gallery")
print(f"one sample per shape class: {data.images.shape}")

# --- the two trigger kinds --------------------------------------------------
# white: a flat patch, the classic downstream-poisoning stamp.
# seeded_random: 4x4 random RGB blocks upsampled — textured, so masked
# reconstruction has something to model (the pre-training attacks use it).
white = make_trigger("white", 7)
pattern = make_trigger("seeded_random", 7, seed=0)
print(f"white trigger {white.pixels.shape}, "
      f"patterned trigger {pattern.pixels.shape}")

placements = [
    ("fixed corner", PlacementSpec("fixed", coords=(25, 25))),
    ("center", PlacementSpec("center")),
    ("random", PlacementSpec("random", count=1)),
    ("grid of 4", PlacementSpec("multiple_grid", count=4)),
    ("grid of 9", PlacementSpec("multiple_grid", count=9)),
    ("localized", PlacementSpec("localization", margin=2)),
]

fig, axes = plt.subplots(len(placements), 6, figsize=(9, 1.6 * len(placements)))
for row, (label, spec) in enumerate(placements):
    stamped = stamp_all(data, pattern if "grid" in label else white, spec,
                        seed=row)
    for col in range(6):
        ax = axes[row, col]
        ax.imshow(np.clip(stamped.images[col], 0, 1))
        ax.set_xticks(())
        ax.set_yticks(())
        if col == 0:
            ax.set_ylabel(label, rotation=0, ha="right", va="center",
                          fontsize=8)
fig.suptitle("placement strategies (rows) on shape classes (columns)")
fig.tight_layout()
fig.savefig(OUT / "trigger_gallery.svg", format="svg")
plt.close(fig)
print(f"wrote {OUT / 'trigger_gallery.svg'}")

# --- single-image close-up ----------------------------------------------------
img = data.images[3]
one = stamp_all(data.subset([3]), pattern, PlacementSpec("center"), seed=0)
delta = np.abs(one.images[0] - img).sum(axis=-1)
print(f"stamp footprint: {np.count_nonzero(delta)} of {img.shape[0]**2} "
      f"pixels changed")
