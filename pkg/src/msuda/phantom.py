"""Deterministic multi-site two-modality phantom dataset.

Each case holds one tumor (an ellipsoid split by a canal cylinder into an
intra-meatal part inside the canal and an extra-meatal part outside) plus
two small cochlear ellipsoids, one per lateral half. Source-modality images
show a bright tumor and dark cochleae; target-modality images the opposite,
with a per-site monotone intensity transform (gain/gamma/bias) and site
noise on top. A configurable fraction of cases is constructed to be "hard":
a tiny extra-meatal part, or a large one with heterogeneous texture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, label as cc_label

from .volume import (
    Volume, LabelMap, save_volume, save_labelmap,
    CLASS_INTRA, CLASS_EXTRA, CLASS_COCHLEA,
)

MANIFEST_NAME = "manifest.json"

SPLIT_SOURCE_TRAIN = "source-train"
SPLIT_TARGET_TRAIN = "target-train"
SPLIT_TARGET_VAL = "target-val"


class PlacementError(RuntimeError):
    """Structure placement failed after bounded retries."""


@dataclass
class SiteStyle:
    """Monotone per-site intensity transform plus site noise level."""

    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.02


@dataclass
class StructureParams:
    """Size ranges (voxels) and extra-meatal fraction bands for the anatomy."""

    vs_semiaxis_range: tuple = (3.5, 6.0)       # x/y semi-axes of the tumor
    vs_semiaxis_z_range: tuple = (2.0, 3.2)
    cochlea_semiaxis_range: tuple = (1.5, 2.3)
    canal_radius_range: tuple = (2.6, 3.4)
    extra_fraction_range: tuple = (0.15, 0.45)  # ordinary cases
    tiny_extra_fraction: float = 0.02           # hard rule 1: < 5 percent
    large_extra_fraction: float = 0.72          # hard rule 2: > 60 percent


def default_site_styles(n_sites: int):
    """Clearly separated styles; gamma and bias push means the same way."""
    base = [
        SiteStyle(gain=1.0, bias=-0.12, gamma=2.00, noise_sigma=0.015),
        SiteStyle(gain=1.0, bias=0.00, gamma=1.00, noise_sigma=0.030),
        SiteStyle(gain=1.0, bias=0.12, gamma=0.50, noise_sigma=0.050),
    ]
    if n_sites <= 3:
        return tuple(base[:n_sites])
    extra = [SiteStyle(gain=1.0, bias=0.12 + 0.12 * k, gamma=0.45, noise_sigma=0.05)
             for k in range(n_sites - 3)]
    return tuple(base + extra)


@dataclass
class PhantomConfig:
    n_source: int = 6
    n_target_per_site: int = 2
    n_target_val_per_site: int = 2
    n_sites: int = 3
    shape: tuple = (64, 48, 16)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    hard_fraction: float = 0.25
    site_styles: tuple = None
    structure: StructureParams = field(default_factory=StructureParams)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if isinstance(self.structure, dict):
            self.structure = StructureParams(**self.structure)
        if self.n_source < 1 or self.n_target_per_site < 1 or self.n_sites < 1:
            raise ValueError("case counts and site count must be >= 1")
        if min(self.shape) < 8:
            raise ValueError(f"shape dims must be >= 8, got {self.shape}")
        if self.site_styles is None:
            self.site_styles = default_site_styles(self.n_sites)
        else:
            self.site_styles = tuple(
                s if isinstance(s, SiteStyle) else SiteStyle(**s)
                for s in self.site_styles)
        if len(self.site_styles) != self.n_sites:
            raise ValueError("need one SiteStyle per site")
        if any(s.noise_sigma < 0 for s in self.site_styles):
            raise ValueError("noise sigma must be >= 0")

    def site_names(self):
        return [f"S{i}" for i in range(self.n_sites)]

    def min_bias_gap(self):
        biases = sorted(s.bias for s in self.site_styles)
        if len(biases) < 2:
            return 0.0
        return min(b2 - b1 for b1, b2 in zip(biases, biases[1:]))


@dataclass
class PhantomCase:
    case_id: str
    image: Volume
    label: LabelMap
    landmark: tuple
    site_id: str | None
    modality: str
    split: str
    hard: bool
    hard_kind: str | None


def _ellipsoid(shape, center, semiaxes):
    x, y, z = np.ogrid[:shape[0], :shape[1], :shape[2]]
    return (((x - center[0]) / semiaxes[0]) ** 2
            + ((y - center[1]) / semiaxes[1]) ** 2
            + ((z - center[2]) / semiaxes[2]) ** 2) <= 1.0


def _smooth_noise(rng, shape, sigma):
    n = gaussian_filter(rng.normal(0.0, 1.0, size=shape), sigma=sigma)
    s = n.std()
    return n / s if s > 0 else n


def _case_geometry(rng, cfg: PhantomConfig, hard_kind):
    """Place canal, tumor, and cochleae; returns masks and the case label."""
    nx, ny, nz = cfg.shape
    sp = cfg.structure

    for _ in range(25):
        side = rng.integers(0, 2)  # 0: tumor in low-x half, 1: high-x half
        yc = ny / 2 + rng.uniform(-2, 2)
        zc = nz / 2 + rng.uniform(-1, 1)
        r_canal = rng.uniform(*sp.canal_radius_range)

        # canal runs along x from the lateral region to the midline mouth
        mouth = nx / 2 + rng.uniform(-2, 2)
        depth = rng.uniform(0.28, 0.36) * nx
        medial_dir = 1 if side == 0 else -1  # direction lateral -> mouth
        x_lat = mouth - medial_dir * depth
        x, y, z = np.ogrid[:nx, :ny, :nz]
        radial = ((y - yc) ** 2 + (z - zc) ** 2) <= r_canal ** 2
        canal = radial & (x >= min(x_lat, mouth)) & (x <= max(x_lat, mouth))

        # tumor semi-axes; tiny-extra tumors must fit inside the canal bore
        if hard_kind == "tiny_extra":
            a = rng.uniform(2.5, 4.0)
            b = c = min(r_canal - 0.6, rng.uniform(1.6, 2.4))
            frac_target = rng.uniform(0.0, sp.tiny_extra_fraction)
        else:
            a = rng.uniform(*sp.vs_semiaxis_range)
            b = rng.uniform(*sp.vs_semiaxis_range)
            c = rng.uniform(*sp.vs_semiaxis_z_range)
            if hard_kind == "large_hetero":
                frac_target = rng.uniform(sp.large_extra_fraction, 0.85)
            else:
                frac_target = rng.uniform(*sp.extra_fraction_range)

        # slide the tumor center along the canal axis until the fraction of
        # its volume outside the canal hits the target band (bisection)
        def extra_fraction_at(xe):
            vs = _ellipsoid(cfg.shape, (xe, yc, zc), (a, b, c))
            n_all = int(vs.sum())
            if n_all == 0:
                return None, vs
            n_extra = int((vs & ~canal).sum())
            return n_extra / n_all, vs

        # deep: whole x-extent inside the canal; shallow: fully past the mouth
        deep = x_lat + medial_dir * (a + 1)
        shallow = mouth + medial_dir * (a + 1)
        f_deep, _ = extra_fraction_at(deep)
        f_shallow, _ = extra_fraction_at(shallow)
        if f_deep is None or f_shallow is None:
            continue
        if not (f_deep <= frac_target <= f_shallow):
            # band unreachable with this geometry; accept a close endpoint
            # or try new shapes
            if abs(f_deep - frac_target) > 0.04 and abs(f_shallow - frac_target) > 0.04:
                continue
            xe = deep if abs(f_deep - frac_target) < abs(f_shallow - frac_target) else shallow
            _, vs = extra_fraction_at(xe)
        else:
            # fraction grows monotonically from the deep end to the shallow end
            lo, hi = deep, shallow
            for _ in range(24):
                mid = 0.5 * (lo + hi)
                f_mid, _ = extra_fraction_at(mid)
                if f_mid < frac_target:
                    lo = mid
                else:
                    hi = mid
            _, vs = extra_fraction_at(0.5 * (lo + hi))

        intra = vs & canal
        extra = vs & ~canal
        if hard_kind != "tiny_extra" and (intra.sum() == 0 or extra.sum() == 0):
            continue

        # cochleae: one per lateral half, near the canal, outside the tumor
        r_co = rng.uniform(*sp.cochlea_semiaxis_range)
        x_co = x_lat + medial_dir * 3
        placed = None
        for _ in range(10):
            y_co = yc + (r_canal + r_co + rng.uniform(1.0, 2.5)) * rng.choice([-1, 1])
            z_co = zc + rng.uniform(-1, 1)
            co1 = _ellipsoid(cfg.shape, (x_co, y_co, z_co), (r_co, r_co, max(1.2, r_co * 0.7)))
            co2_x = nx - 1 - x_co + rng.uniform(-1.5, 1.5)
            co2 = _ellipsoid(cfg.shape, (co2_x, y_co + rng.uniform(-1.5, 1.5), z_co),
                             (r_co, r_co, max(1.2, r_co * 0.7)))
            cochlea = co1 | co2
            if (cochlea & vs).any() or co1.sum() == 0 or co2.sum() == 0:
                continue
            placed = cochlea
            break
        if placed is None:
            continue
        cochlea = placed

        lbl = np.zeros(cfg.shape, dtype=np.uint8)
        lbl[intra] = CLASS_INTRA
        lbl[extra] = CLASS_EXTRA
        lbl[cochlea] = CLASS_COCHLEA
        if _valid_geometry(lbl, cfg.shape):
            return lbl, canal
    raise PlacementError(
        f"structure placement failed after bounded retries (seed context: {cfg.seed})")


def _valid_geometry(lbl, shape):
    """Check the case invariants: one tumor, face-adjacent parts, 2 cochleae."""
    tumor = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
    if tumor.sum() < 8:
        return False
    _, n_tumor = cc_label(tumor, structure=np.ones((3, 3, 3)))
    if n_tumor != 1:
        return False
    intra = lbl == CLASS_INTRA
    extra = lbl == CLASS_EXTRA
    if intra.any() and extra.any() and not _face_adjacent(intra, extra):
        return False
    coch, n_coch = cc_label(lbl == CLASS_COCHLEA, structure=np.ones((3, 3, 3)))
    if n_coch != 2:
        return False
    halves = set()
    for k in range(1, n_coch + 1):
        cx = np.argwhere(coch == k)[:, 0].mean()
        halves.add(cx < shape[0] / 2)
    return halves == {True, False}


def _face_adjacent(a, b):
    for ax in range(3):
        for shift in (1, -1):
            if (a & np.roll(b, shift, axis=ax)).any():
                return True
    return False


def _render_image(rng, lbl, canal, cfg, modality, hard_kind):
    """Paint structure intensities with smooth textures, pre-style."""
    shape = cfg.shape
    img = 0.30 + 0.03 * _smooth_noise(rng, shape, 2.0)
    tumor = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
    cochlea = lbl == CLASS_COCHLEA
    canal_only = canal & ~tumor & ~cochlea

    if modality == "source":
        levels = {"tumor": 0.85, "cochlea": 0.10, "canal": 0.38}
    else:
        levels = {"tumor": 0.12, "cochlea": 0.88, "canal": 0.72}

    img[canal_only] = levels["canal"] + 0.02 * _smooth_noise(rng, shape, 1.5)[canal_only]
    tex = 0.04 * _smooth_noise(rng, shape, 1.5)
    if hard_kind == "large_hetero":
        tex = tex + 0.16 * _smooth_noise(rng, shape, 1.0)
    img[tumor] = levels["tumor"] + tex[tumor]
    img[cochlea] = levels["cochlea"] + 0.02 * _smooth_noise(rng, shape, 1.0)[cochlea]
    img = gaussian_filter(img, sigma=0.5)
    return img


def _apply_style(rng, img, style: SiteStyle):
    x = np.clip(img, 0.0, None)
    y = style.gain * np.power(x, style.gamma) + style.bias
    if style.noise_sigma > 0:
        y = y + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return y


def _make_case(cfg: PhantomConfig, case_index, case_id, modality, site_idx, split):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, case_index]))
    hard = bool(rng.random() < cfg.hard_fraction)
    hard_kind = None
    if hard:
        hard_kind = "tiny_extra" if rng.random() < 0.5 else "large_hetero"

    lbl_data, canal = _case_geometry(rng, cfg, hard_kind)
    img_data = _render_image(rng, lbl_data, canal, cfg, modality, hard_kind)
    if modality == "source":
        # mild acquisition jitter, one nominal source distribution
        img_data = img_data * rng.uniform(0.97, 1.03) + rng.uniform(-0.02, 0.02)
        img_data = img_data + rng.normal(0.0, 0.01, size=img_data.shape)
        site_id = None
    else:
        img_data = _apply_style(rng, img_data, cfg.site_styles[site_idx])
        site_id = cfg.site_names()[site_idx]

    lbl = LabelMap(lbl_data, cfg.spacing, site_id=site_id, modality=modality)
    img = Volume(img_data.astype(np.float32), cfg.spacing,
                 site_id=site_id, modality=modality)
    cochlea_idx = np.argwhere(lbl_data == CLASS_COCHLEA)
    landmark = tuple(int(round(c)) for c in cochlea_idx.mean(axis=0))
    return PhantomCase(case_id, img, lbl, landmark, site_id, modality, split,
                       hard, hard_kind)


def iter_case_specs(cfg: PhantomConfig):
    """Deterministic (index, id, modality, site_idx, split) enumeration."""
    specs = []
    idx = 0
    for i in range(cfg.n_source):
        specs.append((idx, f"src{i:03d}", "source", None, SPLIT_SOURCE_TRAIN))
        idx += 1
    for s in range(cfg.n_sites):
        for i in range(cfg.n_target_per_site):
            specs.append((idx, f"tgt{s}{i:03d}", "target", s, SPLIT_TARGET_TRAIN))
            idx += 1
    for s in range(cfg.n_sites):
        for i in range(cfg.n_target_val_per_site):
            specs.append((idx, f"val{s}{i:03d}", "target", s, SPLIT_TARGET_VAL))
            idx += 1
    return specs


def generate_case(cfg: PhantomConfig, spec) -> PhantomCase:
    idx, case_id, modality, site_idx, split = spec
    return _make_case(cfg, idx, case_id, modality, site_idx, split)


def generate_dataset(cfg: PhantomConfig, out_dir) -> dict:
    """Generate all cases and write them plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in iter_case_specs(cfg):
        case = generate_case(cfg, spec)
        img_rel = f"{case.case_id}_img"
        lbl_rel = f"{case.case_id}_lbl"
        save_volume(case.image, out_dir / img_rel)
        save_labelmap(case.label, out_dir / lbl_rel)
        entries.append({
            "case_id": case.case_id,
            "split": case.split,
            "modality": case.modality,
            "site_id": case.site_id,
            "hard": case.hard,
            "hard_kind": case.hard_kind,
            "landmark": list(case.landmark),
            "image": img_rel,
            "label": lbl_rel,
        })
    manifest = {
        "kind": "phantom-dataset",
        "config": _config_dict(cfg),
        "sites": cfg.site_names(),
        "cases": entries,
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def _config_dict(cfg: PhantomConfig):
    d = asdict(cfg)
    d["site_styles"] = [asdict(s) for s in cfg.site_styles]
    return d


def style_signature(v: Volume, bins: int = 32) -> np.ndarray:
    """Normalized intensity histogram over [-1, 1]; sums to 1."""
    data = np.clip(v.data, -1.0, 1.0)
    hist, _ = np.histogram(data, bins=bins, range=(-1.0, 1.0))
    total = hist.sum()
    if total == 0:
        return np.zeros(bins)
    return hist.astype(np.float64) / total
