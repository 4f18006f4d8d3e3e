"""Hard-sample selection and oversampling through style interpolation.

Hard cases are source cases whose tumor has a tiny extra-meatal part, or a
large one with heterogeneous intensities. Oversampling re-translates each
hard case with site codes never seen in training, so the synthetic set
covers more styles where the segmenter struggles most.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import Volume, LabelMap, CLASS_INTRA, CLASS_EXTRA

logger = logging.getLogger(__name__)

SCHEME_CONVEX = "convex"
SCHEME_FREE = "free"


@dataclass
class HardSampleRule:
    tiny_extra_threshold: float = 0.05
    large_extra_threshold: float = 0.6
    heterogeneity_cv: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.tiny_extra_threshold < self.large_extra_threshold <= 1.0:
            raise ValueError("need 0 <= tiny < large <= 1")
        if self.heterogeneity_cv <= 0:
            raise ValueError("heterogeneity threshold must be > 0")


def extra_meatal_fraction(lbl) -> float | None:
    """|extra| / |tumor|, or None for tumor-free labels."""
    data = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
    n_intra = int((data == CLASS_INTRA).sum())
    n_extra = int((data == CLASS_EXTRA).sum())
    if n_intra + n_extra == 0:
        return None
    return n_extra / (n_intra + n_extra)


def intensity_cv(img, lbl, cls=CLASS_EXTRA) -> float:
    """Coefficient of variation of image intensities inside one class mask."""
    data = img.data if isinstance(img, Volume) else np.asarray(img)
    lbl_data = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
    vals = data[lbl_data == cls]
    if vals.size == 0:
        return 0.0
    mean = abs(float(vals.mean()))
    if mean < 1e-8:
        return float("inf")
    return float(vals.std()) / mean


def is_hard(img, lbl, rule: HardSampleRule) -> bool | None:
    """Apply the two hard-sample rules; None marks tumor-free cases."""
    frac = extra_meatal_fraction(lbl)
    if frac is None:
        return None
    if frac < rule.tiny_extra_threshold:
        return True
    if frac > rule.large_extra_threshold and intensity_cv(img, lbl) > rule.heterogeneity_cv:
        return True
    return False


def select_hard_samples(cases, rule: HardSampleRule) -> list:
    """cases: iterable of (case_id, Volume, LabelMap); returns hard case ids."""
    hard_ids = []
    for case_id, img, lbl in cases:
        verdict = is_hard(img, lbl, rule)
        if verdict is None:
            logger.warning("case %s has no tumor voxels, excluded from "
                           "hard-sample selection", case_id)
            continue
        if verdict:
            hard_ids.append(case_id)
    return hard_ids


def generate_unseen_codes(n: int, scheme: str = SCHEME_CONVEX, seed: int = 0,
                          n_sites: int = 3) -> np.ndarray:
    """Site codes away from the training one-hot vertices, (n, n_sites)."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_sites]))
    codes = []
    while len(codes) < n:
        if scheme == SCHEME_CONVEX:
            c = rng.dirichlet(np.ones(n_sites))
        elif scheme == SCHEME_FREE:
            c = rng.uniform(0.0, 1.0, size=n_sites)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        if scheme == SCHEME_CONVEX and (np.count_nonzero(c) < 2 or c.max() >= 1.0):
            continue  # exclude (numerically) one-hot draws
        if scheme == SCHEME_FREE and np.count_nonzero(c) <= 1:
            continue
        codes.append(c.astype(np.float64))
    return np.stack(codes)


def oversample(hard_cases, codes, nets, gen_cfg):
    """Translate every hard case with every unseen code.

    hard_cases: iterable of (case_id, Volume, LabelMap). Yields dicts with
    the synthetic volume, the pass-through label, and provenance.
    """
    from .synthesis import translate  # avoid import cycle

    out = []
    for case_id, img, lbl in hard_cases:
        for code_idx, code in enumerate(codes):
            synth, _ = translate(img, lbl, np.asarray(code), nets, gen_cfg)
            out.append({
                "case_id": f"{case_id}_os{code_idx}",
                "source_case": case_id,
                "code": [float(c) for c in code],
                "image": synth,
                "label": lbl,
            })
    return out
