#!/usr/bin/env python3
"""Segmentation training, ensembling, pseudo-label filtering, self-training.

Trains a tiny ensemble on source-style images (so it transfers poorly to
the opposite-profile target images), shows the reliability filter at work
on the resulting pseudo labels, and runs one self-training round. The full
adaptation effect needs the translation stage; here the focus is on the
segmentation machinery itself.
"""

from pathlib import Path

import numpy as np

from msuda.phantom import PhantomConfig, iter_case_specs, generate_case
from msuda.volume import PreprocessConfig, preprocess_case
from msuda.segmentation import SegConfig, train_ensemble, predict
from msuda.selftrain import self_training_round
from msuda.metrics import evaluate_dataset, write_report_markdown

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

phantom = PhantomConfig(n_source=4, n_target_per_site=2,
                        n_target_val_per_site=1, seed=21)
pp = PreprocessConfig(target_spacing=(1, 1, 1), crop_shape=(64, 48, 16))

source_pairs, target_train, target_val = [], [], []
for spec in iter_case_specs(phantom):
    case = generate_case(phantom, spec)
    img, lbl, _ = preprocess_case(case.image, case.label, case.landmark, pp)
    if case.split == "source-train":
        source_pairs.append((img, lbl))
    elif case.split == "target-train":
        target_train.append((case.case_id, img))
    else:
        target_val.append((case.case_id, img, lbl))

cfg = SegConfig(epochs=10, channels=(6, 12, 24), patch_shape=(64, 48, 8),
                ensemble_size=2, steps_per_epoch=6, val_interval=2)
print(f"training {cfg.ensemble_size}-model ensemble on "
      f"{len(source_pairs)} source cases (no adaptation)...")
models = train_ensemble(source_pairs, cfg, seed=0)
for m in models:
    print(f"  member {m.spec.arch}/{m.spec.aug_strength}: "
          f"best epoch {m.best_epoch}, val dice {m.best_val_dice:.3f}")

preds = {cid: predict(img, models, cfg).label for cid, img, _ in target_val}
refs = {cid: lbl for cid, _, lbl in target_val}
report = evaluate_dataset(preds, refs)
print("target-domain metrics without adaptation (expected to be poor):")
for k, v in report.mean_row().items():
    print(f"  {k:13s} {v:7.3f}")
write_report_markdown(report, out_dir / "no_adaptation_report.md")

print("\none self-training round on the unlabeled target images:")
records, train_set, new_models = self_training_round(
    models, target_train, source_pairs, round_idx=1, seg_cfg=cfg, seed=1)
for rec in records:
    print(f"  {rec.case_id}: reliable={rec.reliable} reason={rec.reason} "
          f"components={rec.n_components}")
n_reliable = sum(r.reliable for r in records)
print(f"kept {n_reliable}/{len(records)} pseudo labels; "
      f"retrained on {len(train_set)} cases")
