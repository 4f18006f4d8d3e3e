"""Pseudo-label reliability filtering and self-training rounds.

A pseudo label is unreliable when it predicts no tumor at all, or when the
tumor falls apart into multiple connected components spread over both
lateral halves. Components use 26-connectivity; a component's side is its
centroid x versus the midsagittal plane x = nx / 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import label as cc_label

from .volume import LabelMap, CLASS_INTRA, CLASS_EXTRA

logger = logging.getLogger(__name__)

REASON_OK = "ok"
REASON_NO_TUMOR = "no_tumor"
REASON_BILATERAL = "bilateral_components"

# "multiple tumor components on both sides":
#   bilateral_any  - >=2 components total with at least one on each side
#   per_side       - >=2 components on each side (laxer alternative reading)
MODE_BILATERAL_ANY = "bilateral_any"
MODE_PER_SIDE = "per_side"


@dataclass
class PseudoLabelRecord:
    case_id: str
    reliable: bool
    reason: str
    round_index: int
    n_components: int
    label_path: str | None = None

    def __post_init__(self):
        assert self.reliable == (self.reason == REASON_OK)

    def to_dict(self):
        return asdict(self)


def filter_pseudo_label(lbl, mode: str = MODE_BILATERAL_ANY):
    """Classify a predicted label as reliable or not; returns (bool, reason)."""
    data = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
    tumor = (data == CLASS_INTRA) | (data == CLASS_EXTRA)
    comps, n = cc_label(tumor, structure=np.ones((3, 3, 3)))
    if n == 0:
        return False, REASON_NO_TUMOR, 0
    if n >= 2:
        half = data.shape[0] / 2.0
        left = right = 0
        for k in range(1, n + 1):
            cx = np.argwhere(comps == k)[:, 0].mean()
            if cx < half:
                left += 1
            else:
                right += 1
        if mode == MODE_BILATERAL_ANY:
            bilateral = left >= 1 and right >= 1
        elif mode == MODE_PER_SIDE:
            bilateral = left >= 2 and right >= 2
        else:
            raise ValueError(f"unknown filter mode {mode!r}")
        if bilateral:
            return False, REASON_BILATERAL, n
    return True, REASON_OK, n


def make_record(case_id, lbl, round_index, mode=MODE_BILATERAL_ANY,
                label_path=None) -> PseudoLabelRecord:
    reliable, reason, n = filter_pseudo_label(lbl, mode=mode)
    return PseudoLabelRecord(case_id, reliable, reason, round_index, n, label_path)


def self_training_round(models, real_targets, synth_set, round_idx, seg_cfg,
                        seed, filter_mode=MODE_BILATERAL_ANY):
    """One self-training round.

    Predict pseudo labels on the real target cases with the current model
    ensemble, filter them, merge the reliable pairs with the synthetic set,
    and retrain every ensemble member from scratch. Returns the records,
    the merged train set, and the retrained models.
    """
    from .segmentation import predict, train_ensemble  # avoid import cycle

    records = []
    reliable_pairs = []
    for case_id, img in real_targets:
        pred = predict(img, models, seg_cfg)
        rec = make_record(case_id, pred.label, round_idx, mode=filter_mode)
        records.append(rec)
        if rec.reliable:
            reliable_pairs.append((case_id, img, pred.label))
    if not reliable_pairs:
        logger.warning("round %d: no reliable pseudo labels, training on the "
                       "synthetic set only", round_idx)
    train_set = list(synth_set) + [(img, lbl) for _, img, lbl in reliable_pairs]
    models = train_ensemble(train_set, seg_cfg, seed=seed)
    return records, train_set, models
