#!/usr/bin/env python3
"""Walk through the preprocessing chain and the intensity operations.

Preprocessing: reorient to RAI, resample to the target spacing, crop a
fixed block around the cochlea landmark, then z-score / percentile-clip /
rescale to [-1, 1]. On top of that sit the label-assisted transformation
(which flips the tumor/cochlea profile of a source image toward the
target appearance) and the local training-time augmentations.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from msuda.phantom import PhantomConfig, iter_case_specs, generate_case
from msuda.volume import PreprocessConfig, preprocess_case
from msuda.intensity import (
    AugmentConfig, label_assisted_transform, augment_local_intensity,
    augment_contrast, flip_lr,
)

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

cfg = PhantomConfig(seed=3)
case = generate_case(cfg, iter_case_specs(cfg)[0])
print(f"case {case.case_id}: raw shape {case.image.shape}, "
      f"landmark {case.landmark}")

pp = PreprocessConfig(target_spacing=(1.0, 1.0, 1.0), crop_shape=(64, 48, 16))
img, lbl, landmark = preprocess_case(case.image, case.label, case.landmark, pp)
print(f"preprocessed: shape {img.shape}, range "
      f"[{img.data.min():.3f}, {img.data.max():.3f}], landmark -> {landmark}")

vs = (lbl.data == 1) | (lbl.data == 2)
print(f"tumor mean before transform: {img.data[vs].mean():+.3f}")

transformed = label_assisted_transform(img, lbl)
print(f"tumor mean after transform:  {transformed.data[vs].mean():+.3f}")
print(f"cochlea voxels after transform are exactly 1.0: "
      f"{np.all(transformed.data[lbl.data == 3] == 1.0)}")

rng = np.random.default_rng(0)
aug = augment_local_intensity(img, lbl, AugmentConfig(), rng)
contrasted = augment_contrast(img.data, p=1.0, rng=rng)
flipped, flipped_lbl = flip_lr(img, lbl)

z = img.data.shape[2] // 2
panels = [
    ("preprocessed", img.data), ("label-assisted", transformed.data),
    ("local intensity aug", aug.data), ("contrast aug", contrasted),
    ("LR flip", flipped.data),
]
fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
for ax, (title, data) in zip(axes, panels):
    ax.imshow(data[:, :, z].T, cmap="gray", vmin=-1, vmax=1)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "intensity_ops.png", dpi=110)
print(f"saved {out_dir / 'intensity_ops.png'}")
